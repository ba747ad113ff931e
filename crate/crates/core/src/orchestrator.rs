//! End-to-end pipeline: ingest fixture repositories, build the curriculum,
//! then train, evaluate and prove sorries repository by repository.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{dataset_to_json, parse_corpus, parse_dataset, Corpus, CorpusError, Theorem, TheoremStatus};
use crate::curriculum::{build_curriculum, CurriculumError, CurriculumReport};
use crate::database::{canonical_json, DatabaseError, DatasetStrategy, DynamicDatabase, RepoId, RepoMetadata, RepositoryRecord};
use crate::metrics::{MetricError, MetricReport, PerformanceMatrix, DEFAULT_WINDOW};
use crate::retriever::{
    compute_fisher, eval_pairs, mine_training_examples, precompute_embeddings, task_recall, Checkpoint,
    EmbeddingModel, EvaluationTask, Optimizer, RetrieverError, TrainConfig, DEFAULT_K,
};
use crate::search::{
    accessible_premises, best_first_search, build_dependency_graph, replay_proof, retrieve_premises,
    EnvironmentFixture, FixtureEnvironment, SearchBudget, SearchError, SearchResult, TableGenerator,
    DEFAULT_CANDIDATES, DEFAULT_FRACTION, DEFAULT_MAX_PREMISES,
};

pub const REPO_FILE: &str = "repo.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const THEOREMS_FILE: &str = "theorems.json";
pub const ENVIRONMENT_FILE: &str = "environment.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Curriculum,
    Dataset,
    Training,
    Evaluation,
    Proving,
    Metrics,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Curriculum => "curriculum",
            Stage::Dataset => "dataset",
            Stage::Training => "training",
            Stage::Evaluation => "evaluation",
            Stage::Proving => "proving",
            Stage::Metrics => "metrics",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Database(#[from] DatabaseError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, source: e.into() })
    }
}

fn invalid(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError::Stage { stage, source: StageError::Invalid(msg.into()) }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::IoFailure { path: path.to_path_buf(), source }
}

/// Everything read from one fixture directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RepoFixture {
    pub record: RepositoryRecord,
    pub environment: EnvironmentFixture,
}

#[derive(Serialize, Deserialize)]
struct RepoManifest {
    url: String,
    commit: String,
    metadata: RepoMetadata,
    #[serde(default)]
    traced_files: Vec<String>,
}

impl RepoFixture {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| PipelineError::IoFailure { path, source })
        };
        let manifest: RepoManifest = serde_json::from_str(&read(REPO_FILE)?)
            .map_err(|e| invalid(Stage::Ingest, format!("{}: {e}", dir.join(REPO_FILE).display())))?;
        let corpus = parse_corpus(&read(CORPUS_FILE)?).at(Stage::Ingest)?;
        let theorems = parse_dataset(&read(THEOREMS_FILE)?).at(Stage::Ingest)?;
        let environment = EnvironmentFixture::parse(&read(ENVIRONMENT_FILE)?).at(Stage::Ingest)?;
        let record = RepositoryRecord::new(
            RepoId::new(manifest.url, manifest.commit),
            manifest.metadata,
            theorems,
            corpus.files().to_vec(),
            manifest.traced_files,
        );
        record.validate().at(Stage::Ingest)?;
        Ok(RepoFixture { record, environment })
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let r = &self.record;
        let manifest = RepoManifest {
            url: r.id.url.clone(),
            commit: r.id.commit.clone(),
            metadata: r.metadata.clone(),
            traced_files: r.traced_files.clone(),
        };
        let corpus = Corpus::from_files(r.premise_files.clone()).at(Stage::Ingest)?;
        let theorems: Vec<Theorem> = r.theorems.iter().cloned().collect();
        let files = [
            (REPO_FILE, canonical_json(&manifest)),
            (CORPUS_FILE, corpus.to_jsonl()),
            (THEOREMS_FILE, dataset_to_json(&theorems)),
            (ENVIRONMENT_FILE, self.environment.to_json()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Run settings, read from TOML. Relative fixture paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fixtures: Vec<PathBuf>,
    pub strategy: DatasetStrategy,
    pub seed: u64,
    pub window: usize,
    /// 0 disables EWC.
    pub ewc_lambda: f64,
    pub optimizer: String,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub embedding_dim: usize,
    pub hash_buckets: usize,
    pub time_budget_ms: u64,
    pub max_expansions: Option<usize>,
    pub candidates: usize,
    pub retrieval_fraction: f64,
    pub max_premises: usize,
    /// Attempt sorries after each repository's training.
    pub prove_sorries: bool,
    /// Retry still-unproven sorries once more after the last repository.
    pub final_pass: bool,
    /// Fill `elapsed_ms` in proof records; off by default because wall
    /// time breaks byte-identical reruns.
    pub record_timings: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fixtures: Vec::new(),
            strategy: DatasetStrategy::SingleRepo,
            seed: 0,
            window: DEFAULT_WINDOW,
            ewc_lambda: 0.0,
            optimizer: "adamw".into(),
            lr: 1e-3,
            batch_size: 16,
            warmup_steps: 0,
            embedding_dim: 8,
            hash_buckets: 1024,
            time_budget_ms: 600_000,
            max_expansions: Some(1000),
            candidates: DEFAULT_CANDIDATES,
            retrieval_fraction: DEFAULT_FRACTION,
            max_premises: DEFAULT_MAX_PREMISES,
            prove_sorries: true,
            final_pass: false,
            record_timings: false,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(Stage::Config, e.to_string()))?;
        for p in cfg.fixtures.iter_mut().chain(cfg.out.iter_mut()) {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self, step: usize) -> Result<TrainConfig, PipelineError> {
        let optimizer = match self.optimizer.as_str() {
            "adamw" => Optimizer::adamw(),
            "sgd" => Optimizer::Sgd,
            other => return Err(invalid(Stage::Config, format!("unknown optimizer `{other}`"))),
        };
        Ok(TrainConfig {
            optimizer,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            ewc_lambda: (self.ewc_lambda > 0.0).then_some(self.ewc_lambda),
            seed: self.seed.wrapping_add(step as u64),
            k: DEFAULT_K,
            ..TrainConfig::default()
        })
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            budget: SearchBudget {
                time: Duration::from_millis(self.time_budget_ms),
                max_expansions: self.max_expansions,
                candidates: self.candidates,
            },
            fraction: self.retrieval_fraction,
            max_premises: self.max_premises,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.window < 2 {
            return Err(invalid(Stage::Config, format!("window must be at least 2, got {}", self.window)));
        }
        if !(self.ewc_lambda >= 0.0 && self.ewc_lambda.is_finite()) {
            return Err(invalid(Stage::Config, format!("ewc_lambda must be >= 0, got {}", self.ewc_lambda)));
        }
        self.train_config(0).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSettings {
    pub budget: SearchBudget,
    pub fraction: f64,
    pub max_premises: usize,
}

/// Searches one theorem with premises retrieved from `corpus` by `model`.
pub fn attempt_theorem(
    model: &EmbeddingModel,
    corpus: &Corpus,
    environment: &EnvironmentFixture,
    theorem: &Theorem,
    settings: &SearchSettings,
) -> Result<SearchResult, SearchError> {
    let graph = build_dependency_graph(corpus)?;
    let accessible = accessible_premises(&graph, corpus, &theorem.file_path, theorem.start)?;
    let index = precompute_embeddings(model, corpus);
    index.check_fresh(model)?;
    let env = FixtureEnvironment::new(environment)?;
    let generator = TableGenerator::new(environment);
    let mut retrieval = |state: &str| {
        retrieve_premises(model, &index, state, &accessible, settings.fraction, settings.max_premises)
            .expect("index is fresh and covers the corpus")
    };
    best_first_search(&env, &generator, &mut retrieval, &theorem.key(), &settings.budget)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofRecord {
    pub theorem_key: String,
    pub repo: String,
    /// 1-based curriculum step after which the attempt ran; `T + 1` for the
    /// final pass.
    pub stage: usize,
    pub status: String,
    pub proof: Vec<String>,
    pub expansions: usize,
    pub elapsed_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub repo: String,
    pub steps: usize,
    pub examples: usize,
    pub final_loss: f64,
    pub val_r10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub curriculum: CurriculumReport,
    pub order: Vec<String>,
    pub epochs: Vec<EpochSummary>,
    pub matrix: PerformanceMatrix,
    /// `None` for a single-repository curriculum.
    pub metrics: Option<MetricReport>,
    pub proofs: Vec<ProofRecord>,
    pub database: DynamicDatabase,
    pub checkpoint: Checkpoint,
}

impl RunReport {
    pub fn proved(&self) -> impl Iterator<Item = &ProofRecord> {
        self.proofs.iter().filter(|p| p.status == "proved")
    }
}

pub fn load_fixtures(paths: &[PathBuf]) -> Result<Vec<RepoFixture>, PipelineError> {
    paths.iter().map(|p| RepoFixture::load(p)).collect()
}

/// Curriculum over the fixtures' cached difficulties.
pub fn fixture_curriculum(fixtures: &[RepoFixture]) -> Result<CurriculumReport, PipelineError> {
    let items: Vec<_> = fixtures
        .iter()
        .map(|f| {
            let diffs = f.record.difficulty_cache.iter().map(|(k, d)| (k.clone(), *d)).collect();
            (f.record.id.to_string(), diffs)
        })
        .collect();
    build_curriculum(&items).at(Stage::Curriculum)
}

pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if config.fixtures.is_empty() {
        return Err(invalid(Stage::Config, "no fixtures"));
    }
    let fixtures = load_fixtures(&config.fixtures)?;
    run_fixtures(config, fixtures)
}

/// The pipeline on already-loaded fixtures; `config.fixtures` is ignored.
pub fn run_fixtures(config: &RunConfig, fixtures: Vec<RepoFixture>) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if fixtures.is_empty() {
        return Err(invalid(Stage::Config, "no fixtures"));
    }
    let curriculum = fixture_curriculum(&fixtures)?;
    let mut by_id: BTreeMap<String, RepoFixture> = BTreeMap::new();
    for f in fixtures {
        let id = f.record.id.to_string();
        if by_id.insert(id.clone(), f).is_some() {
            return Err(invalid(Stage::Ingest, format!("repository {id} given twice")));
        }
    }
    let order = curriculum.repo_ids();
    let mut db = DynamicDatabase::new();
    for id in &order {
        db.add_repository(by_id[id].record.clone()).at(Stage::Ingest)?;
    }
    let ids: Vec<RepoId> = order.iter().map(|s| s.parse().expect("display round-trips")).collect();

    let model = EmbeddingModel::random(config.embedding_dim, config.hash_buckets, config.seed).at(Stage::Training)?;
    let mut checkpoint = Checkpoint::fresh(model);
    let settings = config.search_settings();
    let mut tasks: Vec<EvaluationTask> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut validation = Vec::new();
    let mut epochs = Vec::new();
    let mut proofs = Vec::new();

    for (k, id) in ids.iter().enumerate() {
        let name = id.to_string();
        let members = match config.strategy {
            DatasetStrategy::SingleRepo => &ids[k..=k],
            DatasetStrategy::MergeAll => &ids[..=k],
        };
        let dataset = db.generate_dataset(members, config.strategy, config.seed).at(Stage::Dataset)?;
        let train_cfg = config.train_config(k)?;
        let (mut next, log) =
            crate::retriever::train_one_epoch(&checkpoint, &dataset.split, &dataset.corpus, &name, &train_cfg)
                .at(Stage::Training)?;
        if train_cfg.ewc_lambda.is_some() {
            // Anchor the next task to this one.
            let examples = mine_training_examples(&dataset.split.train, &dataset.corpus, train_cfg.seed)
                .at(Stage::Training)?;
            next.fisher = Some(compute_fisher(&next.model, &examples, train_cfg.batch_size).at(Stage::Training)?);
            next.anchor = Some(next.model.theta().to_vec());
        }
        checkpoint = next;
        validation.push(100.0 * checkpoint.best_val_r10);
        epochs.push(EpochSummary {
            repo: name.clone(),
            steps: log.steps,
            examples: log.examples,
            final_loss: log.final_loss,
            val_r10: checkpoint.best_val_r10,
        });

        tasks.push(EvaluationTask {
            name: name.clone(),
            corpus: dataset.corpus.clone(),
            test_pairs: eval_pairs(&dataset.split.test),
        });
        let row = tasks
            .iter()
            .map(|t| task_recall(&checkpoint.model, t, DEFAULT_K).map(|r| 100.0 * r))
            .collect::<Result<Vec<_>, _>>()
            .at(Stage::Evaluation)?;
        rows.push(row);

        if config.prove_sorries {
            proofs.extend(prove_repository(&mut db, &by_id[&name], &checkpoint.model, &settings, k + 1, config)?);
        }
    }

    if config.prove_sorries && config.final_pass {
        for id in &order {
            proofs.extend(prove_repository(&mut db, &by_id[id], &checkpoint.model, &settings, ids.len() + 1, config)?);
        }
    }

    let matrix = PerformanceMatrix::new(rows, validation).at(Stage::Metrics)?;
    let metrics = if matrix.tasks() >= 2 { Some(MetricReport::from_matrix(&matrix, config.window).at(Stage::Metrics)?) } else { None };
    Ok(RunReport { curriculum, order, epochs, matrix, metrics, proofs, database: db, checkpoint })
}

/// Attempts every still-unproven sorry of one repository, in key order, and
/// records the proofs that replay.
pub fn prove_repository(
    db: &mut DynamicDatabase,
    fixture: &RepoFixture,
    model: &EmbeddingModel,
    settings: &SearchSettings,
    stage: usize,
    config: &RunConfig,
) -> Result<Vec<ProofRecord>, PipelineError> {
    let id = &fixture.record.id;
    let record = db.repository(id).ok_or_else(|| invalid(Stage::Proving, format!("{id} missing")))?;
    let corpus = record.corpus().at(Stage::Proving)?;
    let mut pending: Vec<Theorem> = record.theorems.sorry_unproven.clone();
    pending.sort_by_key(|t| t.key());
    let env = FixtureEnvironment::new(&fixture.environment).at(Stage::Proving)?;
    let mut out = Vec::new();
    for theorem in pending {
        debug_assert_eq!(theorem.status, TheoremStatus::SorryUnproven);
        let result = attempt_theorem(model, &corpus, &fixture.environment, &theorem, settings).at(Stage::Proving)?;
        let key = theorem.key();
        let proof = result.status.proof().map(<[String]>::to_vec).unwrap_or_default();
        if result.status.proof().is_some() {
            if !replay_proof(&env, &key, &proof) {
                return Err(invalid(Stage::Proving, format!("proof of {key} does not replay")));
            }
            db.record_sorry_proof(&key, proof.clone()).at(Stage::Proving)?;
        }
        out.push(ProofRecord {
            theorem_key: key.to_string(),
            repo: id.to_string(),
            stage,
            status: result.status.label().to_string(),
            proof,
            expansions: result.stats.expansions,
            elapsed_ms: config.record_timings.then_some(result.stats.elapsed.as_millis() as u64),
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CurriculumFile<'a> {
    #[serde(flatten)]
    report: &'a CurriculumReport,
    epochs: &'a [EpochSummary],
}

pub const REPORT_FILES: [&str; 6] =
    ["matrix.csv", "validation.csv", "metrics.json", "proofs.json", "curriculum.json", "database.json"];

/// Writes every report file into `out_dir`, creating it if needed.
pub fn emit_reports(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics = match &report.metrics {
        Some(m) => canonical_json(m),
        None => canonical_json(&serde_json::json!({ "tasks": report.matrix.tasks(), "metrics": null })),
    };
    let bodies = [
        report.matrix.to_csv(),
        report.matrix.validation_csv(),
        metrics,
        canonical_json(&report.proofs),
        canonical_json(&CurriculumFile { report: &report.curriculum, epochs: &report.epochs }),
        report.database.to_json(),
    ];
    let mut written = Vec::new();
    for (name, body) in REPORT_FILES.iter().zip(bodies) {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_resolves_paths() {
        let text = r#"
fixtures = ["a", "/abs/b"]
strategy = "merge_all"
seed = 9
ewc_lambda = 0.5
out = "out"
"#;
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.fixtures, [PathBuf::from("/base/a"), PathBuf::from("/abs/b")]);
        assert_eq!(cfg.strategy, DatasetStrategy::MergeAll);
        assert_eq!(cfg.out, Some(PathBuf::from("/base/out")));
        assert_eq!(cfg.train_config(2).unwrap().seed, 11);
        assert_eq!(cfg.train_config(0).unwrap().ewc_lambda, Some(0.5));
        assert_eq!(cfg.window, DEFAULT_WINDOW);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("colour = 3", Path::new(".")).is_err());
        let cfg = RunConfig { fixtures: vec!["x".into()], window: 1, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(PipelineError::Stage { stage: Stage::Config, .. })));
        let cfg = RunConfig { fixtures: vec!["x".into()], optimizer: "lbfgs".into(), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig { fixtures: vec!["/f".into()], seed: 4, ..Default::default() };
        assert_eq!(RunConfig::parse(&cfg.to_toml(), Path::new("/")).unwrap(), cfg);
    }

    #[test]
    fn missing_fixture_is_an_io_failure() {
        let err = RepoFixture::load(Path::new("/nonexistent/fixture")).unwrap_err();
        assert!(matches!(err, PipelineError::IoFailure { .. }));
    }
}
