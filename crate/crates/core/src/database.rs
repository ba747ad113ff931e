//! Persistent store of traced repositories and dataset generation.
//!
//! Repositories are kept in insertion order; the last entry is the most
//! recently added and wins theorem collisions when datasets are merged.
//! The on-disk document is canonical JSON (sorted keys, pretty printed), so
//! `persist` after `load` reproduces the same bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    dataset_to_json, random_split, Corpus, CorpusError, DatasetSplit, PremiseFile, Theorem,
    TheoremKey, TheoremStatus, DEFAULT_SPLIT_FRACTION,
};
use crate::curriculum::{compute_difficulty, Difficulty};

#[derive(Debug, thiserror::Error)]
pub enum DatabaseError {
    #[error("invalid record for {repo}: {reason}")]
    InvalidRecord { repo: String, reason: String },
    #[error("theorem {0} not found")]
    NotFound(TheoremKey),
    #[error("theorem {0} is already proven")]
    AlreadyProven(TheoremKey),
    #[error("unknown repository {0}")]
    UnknownRepo(String),
    #[error("single-repo datasets take exactly one repository, got {0}")]
    SingleRepoArity(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
    #[error("corrupt database document: {0}")]
    CorruptDocument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatabaseError + '_ {
    move |source| DatabaseError::IoFailure { path: path.to_path_buf(), source }
}

/// Repository identity: distinct commits of one URL are distinct repositories.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RepoId {
    pub url: String,
    pub commit: String,
}

impl RepoId {
    pub fn new(url: impl Into<String>, commit: impl Into<String>) -> Self {
        Self { url: url.into(), commit: commit.into() }
    }
}

impl fmt::Display for RepoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.url, self.commit)
    }
}

impl FromStr for RepoId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (url, commit) = s.rsplit_once('@').ok_or_else(|| format!("expected url@commit, got `{s}`"))?;
        Ok(RepoId::new(url, commit))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepoMetadata {
    pub name: String,
    pub date_added: String,
    pub toolchain_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SorryProof {
    pub theorem: Theorem,
    pub proof: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremGroups {
    pub proven: Vec<Theorem>,
    pub sorry_unproven: Vec<Theorem>,
    pub sorry_proven: Vec<SorryProof>,
}

impl TheoremGroups {
    pub fn iter(&self) -> impl Iterator<Item = &Theorem> {
        self.proven
            .iter()
            .chain(&self.sorry_unproven)
            .chain(self.sorry_proven.iter().map(|s| &s.theorem))
    }

    pub fn len(&self) -> usize {
        self.proven.len() + self.sorry_unproven.len() + self.sorry_proven.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

mod key_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: TheoremKey,
        difficulty: Difficulty,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<TheoremKey, Difficulty>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> =
            map.iter().map(|(k, d)| Entry { key: k.clone(), difficulty: *d }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<TheoremKey, Difficulty>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.key, e.difficulty)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepositoryRecord {
    pub id: RepoId,
    pub metadata: RepoMetadata,
    pub theorems: TheoremGroups,
    pub premise_files: Vec<PremiseFile>,
    pub traced_files: Vec<String>,
    #[serde(with = "key_map")]
    pub difficulty_cache: BTreeMap<TheoremKey, Difficulty>,
}

impl RepositoryRecord {
    /// Groups theorems by status and fills the difficulty cache.
    pub fn new(
        id: RepoId,
        metadata: RepoMetadata,
        theorems: Vec<Theorem>,
        premise_files: Vec<PremiseFile>,
        traced_files: Vec<String>,
    ) -> Self {
        let mut groups = TheoremGroups::default();
        let mut difficulty_cache = BTreeMap::new();
        for t in theorems {
            difficulty_cache.insert(t.key(), compute_difficulty(&t));
            match t.status {
                TheoremStatus::Proven => groups.proven.push(t),
                TheoremStatus::SorryUnproven => groups.sorry_unproven.push(t),
                // Traced sorry-proven theorems arrive without a stored proof.
                TheoremStatus::SorryProven => {
                    groups.sorry_proven.push(SorryProof { theorem: t, proof: Vec::new() })
                }
            }
        }
        RepositoryRecord { id, metadata, theorems: groups, premise_files, traced_files, difficulty_cache }
    }

    pub fn validate(&self) -> Result<(), DatabaseError> {
        let invalid = |reason: String| DatabaseError::InvalidRecord { repo: self.id.to_string(), reason };
        let groups = [
            (TheoremStatus::Proven, self.theorems.proven.iter().collect::<Vec<_>>()),
            (TheoremStatus::SorryUnproven, self.theorems.sorry_unproven.iter().collect()),
            (TheoremStatus::SorryProven, self.theorems.sorry_proven.iter().map(|s| &s.theorem).collect()),
        ];
        let mut keys = HashSet::new();
        for (status, members) in &groups {
            for t in members {
                if t.status != *status {
                    return Err(invalid(format!("{} filed under {status:?}", t.key())));
                }
                t.validate().map_err(|e| invalid(e.to_string()))?;
                if !keys.insert(t.key()) {
                    return Err(invalid(format!("duplicate theorem {}", t.key())));
                }
            }
        }
        if let Some(k) = self.difficulty_cache.keys().find(|k| !keys.contains(*k)) {
            return Err(invalid(format!("cached difficulty for unknown theorem {k}")));
        }
        Corpus::from_files(self.premise_files.clone()).map_err(|e| invalid(e.to_string()))?;
        let mut traced = HashSet::new();
        if let Some(p) = self.traced_files.iter().find(|p| !traced.insert(p.as_str())) {
            return Err(invalid(format!("duplicate traced file {p}")));
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<Corpus, CorpusError> {
        Corpus::from_files(self.premise_files.clone())
    }

    pub fn theorem(&self, key: &TheoremKey) -> Option<&Theorem> {
        self.theorems.iter().find(|t| &t.key() == key)
    }

    /// Theorems usable for training and evaluation: everything but
    /// unproven sorries.
    pub fn dataset_theorems(&self) -> impl Iterator<Item = &Theorem> {
        self.theorems.proven.iter().chain(self.theorems.sorry_proven.iter().map(|s| &s.theorem))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStrategy {
    SingleRepo,
    MergeAll,
}

impl FromStr for DatasetStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "single_repo" | "single-repo" => Ok(DatasetStrategy::SingleRepo),
            "merge-all" | "merge_all" => Ok(DatasetStrategy::MergeAll),
            other => Err(format!("unknown strategy `{other}` (expected single or merge-all)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub theorems: usize,
    pub premise_files: usize,
    pub premises: usize,
    pub traced_files: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub repo_ids: Vec<String>,
    pub strategy: DatasetStrategy,
    pub counts: DatasetCounts,
    pub splits: SplitSizes,
    /// Latest `date_added` among contributing repositories, which keeps
    /// generation reproducible.
    pub created_at: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub split: DatasetSplit,
    pub corpus: Corpus,
    pub traced_files: Vec<String>,
    pub metadata: DatasetMetadata,
}

impl GeneratedDataset {
    /// Writes corpus.jsonl, train.json, val.json, test.json and metadata.json.
    pub fn write_to(&self, dir: &Path) -> Result<(), DatabaseError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))
        };
        write("corpus.jsonl", self.corpus.to_jsonl())?;
        write("train.json", dataset_to_json(&self.split.train))?;
        write("val.json", dataset_to_json(&self.split.val))?;
        write("test.json", dataset_to_json(&self.split.test))?;
        write("metadata.json", canonical_json(&self.metadata))
    }
}

/// Sorted-key pretty JSON with a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
    s.push('\n');
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicDatabase {
    pub repositories: Vec<RepositoryRecord>,
}

impl DynamicDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `record`, or replaces an existing record with the same id and
    /// moves it to the most recent position.
    pub fn add_repository(&mut self, record: RepositoryRecord) -> Result<(), DatabaseError> {
        record.validate()?;
        self.repositories.retain(|r| r.id != record.id);
        self.repositories.push(record);
        Ok(())
    }

    pub fn repository(&self, id: &RepoId) -> Option<&RepositoryRecord> {
        self.repositories.iter().find(|r| &r.id == id)
    }

    fn position(&self, id: &RepoId) -> Result<usize, DatabaseError> {
        self.repositories
            .iter()
            .position(|r| &r.id == id)
            .ok_or_else(|| DatabaseError::UnknownRepo(id.to_string()))
    }

    /// Exact-match lookup, most recent repository first.
    pub fn theorem(&self, key: &TheoremKey) -> Option<(&RepoId, &Theorem)> {
        self.repositories.iter().rev().find_map(|r| r.theorem(key).map(|t| (&r.id, t)))
    }

    pub fn proven_count(&self) -> usize {
        self.repositories
            .iter()
            .map(|r| r.theorems.proven.len() + r.theorems.sorry_proven.len())
            .sum()
    }

    pub fn theorem_count(&self) -> usize {
        self.repositories.iter().map(|r| r.theorems.len()).sum()
    }

    /// Marks an unproven sorry as proven and stores its proof. Acts on the
    /// most recently added repository holding the key.
    pub fn record_sorry_proof(
        &mut self,
        key: &TheoremKey,
        proof: Vec<String>,
    ) -> Result<(), DatabaseError> {
        let repo = self
            .repositories
            .iter_mut()
            .rev()
            .find(|r| r.theorem(key).is_some())
            .ok_or_else(|| DatabaseError::NotFound(key.clone()))?;
        let groups = &mut repo.theorems;
        let Some(idx) = groups.sorry_unproven.iter().position(|t| &t.key() == key) else {
            return Err(DatabaseError::AlreadyProven(key.clone()));
        };
        let mut theorem = groups.sorry_unproven.remove(idx);
        theorem.status = TheoremStatus::SorryProven;
        groups.sorry_proven.push(SorryProof { theorem, proof });
        Ok(())
    }

    /// Builds train/val/test splits and a merged corpus from `repo_ids`.
    ///
    /// Theorem collisions keep the copy from the most recently added
    /// repository; premise-file and traced-file collisions keep the first
    /// one met in `repo_ids` order.
    pub fn generate_dataset(
        &self,
        repo_ids: &[RepoId],
        strategy: DatasetStrategy,
        seed: u64,
    ) -> Result<GeneratedDataset, DatabaseError> {
        if strategy == DatasetStrategy::SingleRepo && repo_ids.len() != 1 {
            return Err(DatabaseError::SingleRepoArity(repo_ids.len()));
        }
        let positions: Vec<usize> = repo_ids.iter().map(|id| self.position(id)).collect::<Result<_, _>>()?;

        let mut order: Vec<TheoremKey> = Vec::new();
        let mut chosen: HashMap<TheoremKey, (usize, &Theorem)> = HashMap::new();
        let mut files: Vec<PremiseFile> = Vec::new();
        let mut file_paths = HashSet::new();
        let mut traced_files = Vec::new();
        let mut traced_seen = HashSet::new();
        for &pos in &positions {
            let repo = &self.repositories[pos];
            for t in repo.dataset_theorems() {
                let key = t.key();
                match chosen.get(&key) {
                    Some(&(prev, _)) if prev >= pos => {}
                    Some(_) => {
                        chosen.insert(key, (pos, t));
                    }
                    None => {
                        order.push(key.clone());
                        chosen.insert(key, (pos, t));
                    }
                }
            }
            for f in &repo.premise_files {
                if file_paths.insert(f.path.clone()) {
                    files.push(f.clone());
                }
            }
            for p in &repo.traced_files {
                if traced_seen.insert(p.clone()) {
                    traced_files.push(p.clone());
                }
            }
        }
        let theorems: Vec<Theorem> = order.iter().map(|k| chosen[k].1.clone()).collect();
        let corpus = Corpus::from_files(files)?;
        let split = random_split(&theorems, seed, DEFAULT_SPLIT_FRACTION, DEFAULT_SPLIT_FRACTION)?;
        let created_at = positions
            .iter()
            .map(|&p| self.repositories[p].metadata.date_added.clone())
            .max()
            .unwrap_or_default();
        let metadata = DatasetMetadata {
            repo_ids: repo_ids.iter().map(RepoId::to_string).collect(),
            strategy,
            counts: DatasetCounts {
                theorems: theorems.len(),
                premise_files: corpus.files().len(),
                premises: corpus.premise_count(),
                traced_files: traced_files.len(),
            },
            splits: SplitSizes { train: split.train.len(), val: split.val.len(), test: split.test.len() },
            created_at,
        };
        Ok(GeneratedDataset { split, corpus, traced_files, metadata })
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, DatabaseError> {
        let db: DynamicDatabase =
            serde_json::from_str(text).map_err(|e| DatabaseError::CorruptDocument(e.to_string()))?;
        let mut ids = HashSet::new();
        for r in &db.repositories {
            if !ids.insert(&r.id) {
                return Err(DatabaseError::CorruptDocument(format!("duplicate repository {}", r.id)));
            }
            r.validate().map_err(|e| DatabaseError::CorruptDocument(e.to_string()))?;
        }
        Ok(db)
    }

    pub fn persist(&self, path: &Path) -> Result<(), DatabaseError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatabaseError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}
