use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lifelong_core::database::canonical_json;
use lifelong_core::metrics::{composite_score, MetricReport, MetricValues, PerformanceMatrix};
use lifelong_core::orchestrator::{
    emit_reports, fixture_curriculum, load_fixtures, prove_repository, run_pipeline, RunConfig,
};
use lifelong_core::{Checkpoint, DatasetStrategy, DynamicDatabase};

const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "lifelong", version, about = "Lifelong premise retrieval and proof search on local fixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load fixture repositories into a database and persist it.
    Ingest(Common),
    /// Compute difficulties, thresholds and the repository order.
    Curriculum(Common),
    /// Train through the curriculum without proving; writes a checkpoint.
    Train(Common),
    /// Attempt every sorry with a trained checkpoint.
    Prove {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Lifelong metrics from a matrix CSV, or composite scores for setups.
    Metrics(MetricsArgs),
    /// The full pipeline with every report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixture directory; repeatable, replaces the config's list.
    #[arg(long = "fixture")]
    fixtures: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// single | merge-all
    #[arg(long)]
    strategy: Option<DatasetStrategy>,
    #[arg(long)]
    ewc_lambda: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    time_budget_ms: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if !self.fixtures.is_empty() {
            cfg.fixtures = self.fixtures.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.ewc_lambda {
            cfg.ewc_lambda = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.time_budget_ms {
            cfg.time_budget_ms = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if cfg.fixtures.is_empty() {
            bail!("no fixtures: pass --config or --fixture");
        }
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

#[derive(Args)]
struct MetricsArgs {
    /// CSV with `after_task,eval_task,r10` rows.
    #[arg(long, required_unless_present = "setups")]
    matrix: Option<PathBuf>,
    /// CSV with `task,val_r10` rows.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// JSON object mapping setup names to {wf5, fm, cfr, ebwt, wp5, ip}.
    #[arg(long, conflicts_with = "matrix")]
    setups: Option<PathBuf>,
    #[arg(long, default_value_t = lifelong_core::metrics::DEFAULT_WINDOW)]
    window: usize,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn ingest(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let mut db = DynamicDatabase::new();
    for f in load_fixtures(&cfg.fixtures)? {
        println!(
            "{}: {} theorems, {} premise files",
            f.record.id,
            f.record.theorems.len(),
            f.record.premise_files.len()
        );
        db.add_repository(f.record)?;
    }
    let path = out.join("database.json");
    db.persist(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn curriculum(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let report = fixture_curriculum(&load_fixtures(&cfg.fixtures)?)?;
    for (i, e) in report.order.iter().enumerate() {
        println!("{}. {} (easy {})", i + 1, e.repo_id, e.counts.easy);
    }
    let path = out.join("curriculum.json");
    write(&path, &canonical_json(&report))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let (mut cfg, out) = common.resolve()?;
    cfg.prove_sorries = false;
    let report = run_pipeline(&cfg)?;
    for e in &report.epochs {
        println!("{}: {} steps, val R@10 {:.4}", e.repo, e.steps, e.val_r10);
    }
    write(&out.join("matrix.csv"), &report.matrix.to_csv())?;
    write(&out.join("validation.csv"), &report.matrix.validation_csv())?;
    let path = out.join(CHECKPOINT_FILE);
    report.checkpoint.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn prove(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&ck_path)?;
    let fixtures = load_fixtures(&cfg.fixtures)?;
    let order = fixture_curriculum(&fixtures)?.repo_ids();
    let mut db = DynamicDatabase::new();
    for id in &order {
        let f = fixtures.iter().find(|f| &f.record.id.to_string() == id).expect("curriculum id");
        db.add_repository(f.record.clone())?;
    }
    let settings = cfg.search_settings();
    let mut proofs = Vec::new();
    for id in &order {
        let f = fixtures.iter().find(|f| &f.record.id.to_string() == id).expect("curriculum id");
        proofs.extend(prove_repository(&mut db, f, &ck.model, &settings, order.len(), &cfg)?);
    }
    for p in &proofs {
        println!("{} {} {}", p.status, p.theorem_key, p.proof.join("; "));
    }
    write(&out.join("proofs.json"), &canonical_json(&proofs))?;
    db.persist(&out.join("database.json"))?;
    println!("wrote {}", out.join("proofs.json").display());
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let json = if let Some(path) = &args.setups {
        let setups: BTreeMap<String, MetricValues> =
            serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        canonical_json(&composite_score(&setups)?)
    } else {
        let matrix_path = args.matrix.as_ref().expect("clap enforces --matrix");
        let validation = args.validation.as_deref().map(read).transpose()?;
        let matrix = PerformanceMatrix::from_csv(&read(matrix_path)?, validation.as_deref())?;
        MetricReport::from_matrix(&matrix, args.window)?.to_json()
    };
    print!("{json}");
    if let Some(path) = &args.out {
        write(path, &json)?;
    }
    Ok(())
}

fn run(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let report = run_pipeline(&cfg)?;
    println!("order: {}", report.order.join(" -> "));
    for e in &report.epochs {
        println!("{}: {} steps, val R@10 {:.4}", e.repo, e.steps, e.val_r10);
    }
    if let Some(m) = &report.metrics {
        let v = m.metrics;
        println!(
            "WF{w} {:.4}  FM {:.4}  CFR {:.4}  EBWT {:.4}  WP{w} {:.4}  IP {:.4}",
            v.wf5,
            v.fm,
            v.cfr,
            v.ebwt,
            v.wp5,
            v.ip,
            w = m.window
        );
    }
    println!("proved {} of {} sorry attempts", report.proved().count(), report.proofs.len());
    for path in emit_reports(&report, &out)? {
        println!("wrote {}", path.display());
    }
    report.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(c) => ingest(&c),
        Command::Curriculum(c) => curriculum(&c),
        Command::Train(c) => train(&c),
        Command::Prove { common, checkpoint } => prove(&common, checkpoint.as_deref()),
        Command::Metrics(m) => metrics(&m),
        Command::Run(c) => run(&c),
    }
}
