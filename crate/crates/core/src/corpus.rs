//! Premise corpus and theorem datasets.
//!
//! The corpus is a JSON Lines file with one object per traced source file.
//! Files are kept in topological import order: every imported file precedes
//! its importers, with ties broken by input order.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserializer;
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};

/// Text LeanDojo-style traces use for the state after a closing tactic.
pub const PROVED_MARKER: &str = "no goals";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed corpus line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("duplicate file path `{0}`")]
    DuplicatePath(String),
    #[error("file `{path}` imports unknown file `{import}`")]
    UnknownImport { path: String, import: String },
    #[error("import cycle through {0:?}")]
    ImportCycle(Vec<String>),
    #[error("file `{0}` imports itself")]
    SelfImport(String),
    #[error("duplicate premise `{name}` in `{path}`")]
    DuplicatePremise { path: String, name: String },
    #[error("invalid premise `{name}`: {reason}")]
    InvalidPremise { name: String, reason: String },
    #[error("malformed dataset: {0}")]
    MalformedDataset(String),
    #[error("invalid theorem `{name}`: {reason}")]
    InvalidTheorem { name: String, reason: String },
    #[error("need at least 3 theorems to split, got {0}")]
    TooFewTheorems(usize),
    #[error("duplicate theorem {0}")]
    DuplicateTheorem(TheoremKey),
    #[error("invalid split fractions val={val} test={test}")]
    InvalidFractions { val: f64, test: f64 },
}

/// 1-based (line, column) source position. Ordering is lexicographic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl Pos {
    pub fn new(line: u32, col: u32) -> Self {
        Self { line, col }
    }

    fn is_valid(self) -> bool {
        self.line >= 1 && self.col >= 1
    }
}

impl Serialize for Pos {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(&self.line)?;
        tup.serialize_element(&self.col)?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Pos {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (line, col) = <(u32, u32)>::deserialize(deserializer)?;
        Ok(Pos { line, col })
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PremiseKind {
    Definition,
    #[serde(alias = "theorem-like", alias = "lemma")]
    Theorem,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Premise {
    pub full_name: String,
    pub file_path: String,
    pub statement: String,
    pub start: Pos,
    pub end: Pos,
    pub kind: PremiseKind,
}

impl Premise {
    /// Text fed to the retriever for this premise.
    pub fn retrieval_text(&self) -> String {
        format!("{} : {}", self.full_name, self.statement)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PremiseFile {
    pub path: String,
    pub imports: Vec<String>,
    pub premises: Vec<Premise>,
}

impl PremiseFile {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.imports.iter().any(|i| i == &self.path) {
            return Err(CorpusError::SelfImport(self.path.clone()));
        }
        let mut seen = HashSet::new();
        for p in &self.premises {
            validate_premise(p)?;
            if !seen.insert(p.full_name.as_str()) {
                return Err(CorpusError::DuplicatePremise {
                    path: self.path.clone(),
                    name: p.full_name.clone(),
                });
            }
        }
        Ok(())
    }
}

fn validate_premise(p: &Premise) -> Result<(), CorpusError> {
    let invalid = |reason: &str| CorpusError::InvalidPremise {
        name: p.full_name.clone(),
        reason: reason.to_string(),
    };
    if p.full_name.is_empty() {
        return Err(invalid("empty full_name"));
    }
    if !p.start.is_valid() || !p.end.is_valid() {
        return Err(invalid("positions are 1-based"));
    }
    if p.start > p.end {
        return Err(invalid("start after end"));
    }
    Ok(())
}

// On-disk shape of one corpus line.
#[derive(Serialize, Deserialize)]
struct FileRecord {
    path: String,
    imports: Vec<String>,
    premises: Vec<PremiseRecord>,
}

#[derive(Serialize, Deserialize)]
struct PremiseRecord {
    full_name: String,
    code: String,
    start: Pos,
    end: Pos,
    kind: PremiseKind,
}

impl From<FileRecord> for PremiseFile {
    fn from(rec: FileRecord) -> Self {
        let premises = rec
            .premises
            .into_iter()
            .map(|p| Premise {
                full_name: p.full_name,
                file_path: rec.path.clone(),
                statement: p.code,
                start: p.start,
                end: p.end,
                kind: p.kind,
            })
            .collect();
        PremiseFile { path: rec.path, imports: rec.imports, premises }
    }
}

impl From<&PremiseFile> for FileRecord {
    fn from(f: &PremiseFile) -> Self {
        FileRecord {
            path: f.path.clone(),
            imports: f.imports.clone(),
            premises: f
                .premises
                .iter()
                .map(|p| PremiseRecord {
                    full_name: p.full_name.clone(),
                    code: p.statement.clone(),
                    start: p.start,
                    end: p.end,
                    kind: p.kind,
                })
                .collect(),
        }
    }
}

impl Serialize for PremiseFile {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        FileRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PremiseFile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        FileRecord::deserialize(deserializer).map(PremiseFile::from)
    }
}

/// Validated, topologically ordered set of premise files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    files: Vec<PremiseFile>,
    premise_count: usize,
}

impl Corpus {
    /// Validates `files` and reorders them topologically.
    pub fn from_files(files: Vec<PremiseFile>) -> Result<Self, CorpusError> {
        let mut paths = HashSet::new();
        for f in &files {
            f.validate()?;
            if !paths.insert(f.path.as_str()) {
                return Err(CorpusError::DuplicatePath(f.path.clone()));
            }
        }
        let mut names: HashMap<&str, &str> = HashMap::new();
        for f in &files {
            for p in &f.premises {
                if names.insert(p.full_name.as_str(), f.path.as_str()).is_some() {
                    return Err(CorpusError::DuplicatePremise {
                        path: f.path.clone(),
                        name: p.full_name.clone(),
                    });
                }
            }
        }
        let order = topological_order(&files)?;
        let mut slots: Vec<Option<PremiseFile>> = files.into_iter().map(Some).collect();
        let files: Vec<PremiseFile> =
            order.into_iter().map(|i| slots[i].take().expect("each index once")).collect();
        let premise_count = files.iter().map(|f| f.premises.len()).sum();
        Ok(Corpus { files, premise_count })
    }

    pub fn files(&self) -> &[PremiseFile] {
        &self.files
    }

    pub fn premise_count(&self) -> usize {
        self.premise_count
    }

    pub fn file(&self, path: &str) -> Option<&PremiseFile> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn premises(&self) -> impl Iterator<Item = &Premise> {
        self.files.iter().flat_map(|f| f.premises.iter())
    }

    pub fn premise(&self, full_name: &str) -> Option<&Premise> {
        self.premises().find(|p| p.full_name == full_name)
    }

    /// JSON Lines text, one file per line, in corpus order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.files {
            out.push_str(&serde_json::to_string(&FileRecord::from(f)).expect("corpus serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses a JSON Lines corpus. Blank lines are ignored.
pub fn parse_corpus(jsonl_text: &str) -> Result<Corpus, CorpusError> {
    let mut files = Vec::new();
    for (idx, line) in jsonl_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FileRecord = serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
            line_no: idx + 1,
            reason: e.to_string(),
        })?;
        files.push(PremiseFile::from(rec));
    }
    Corpus::from_files(files)
}

/// Returns indices into `files` such that every imported file precedes its
/// importer. Among ready files the one earliest in the input goes first.
pub fn topological_order(files: &[PremiseFile]) -> Result<Vec<usize>, CorpusError> {
    let index: HashMap<&str, usize> =
        files.iter().enumerate().map(|(i, f)| (f.path.as_str(), i)).collect();
    let mut pending = vec![0usize; files.len()];
    let mut importers: Vec<Vec<usize>> = vec![Vec::new(); files.len()];
    for (i, f) in files.iter().enumerate() {
        let mut deps = BTreeSet::new();
        for imp in &f.imports {
            let &j = index.get(imp.as_str()).ok_or_else(|| CorpusError::UnknownImport {
                path: f.path.clone(),
                import: imp.clone(),
            })?;
            if j == i {
                return Err(CorpusError::SelfImport(f.path.clone()));
            }
            deps.insert(j);
        }
        pending[i] = deps.len();
        for j in deps {
            importers[j].push(i);
        }
    }

    let mut ready: BTreeSet<usize> = (0..files.len()).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(files.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &k in &importers[i] {
            pending[k] -= 1;
            if pending[k] == 0 {
                ready.insert(k);
            }
        }
    }
    if order.len() < files.len() {
        return Err(CorpusError::ImportCycle(find_cycle(files, &index, &pending)));
    }
    Ok(order)
}

/// Same as [`topological_order`] but returns paths.
pub fn topological_paths(files: &[PremiseFile]) -> Result<Vec<String>, CorpusError> {
    Ok(topological_order(files)?.into_iter().map(|i| files[i].path.clone()).collect())
}

// Walks import edges among unresolved files until a node repeats. Every
// unresolved file has an unresolved import, so the walk cannot dead-end.
fn find_cycle(files: &[PremiseFile], index: &HashMap<&str, usize>, pending: &[usize]) -> Vec<String> {
    let start = (0..files.len()).find(|&i| pending[i] > 0).expect("cycle exists");
    let mut seen_at: HashMap<usize, usize> = HashMap::new();
    let mut walk = Vec::new();
    let mut cur = start;
    loop {
        if let Some(&pos) = seen_at.get(&cur) {
            let mut cycle: Vec<usize> = walk[pos..].to_vec();
            let min_pos = (0..cycle.len()).min_by_key(|&k| cycle[k]).expect("non-empty");
            cycle.rotate_left(min_pos);
            return cycle.into_iter().map(|i| files[i].path.clone()).collect();
        }
        seen_at.insert(cur, walk.len());
        walk.push(cur);
        cur = files[cur]
            .imports
            .iter()
            .map(|imp| index[imp.as_str()])
            .find(|&j| pending[j] > 0)
            .expect("unresolved file has an unresolved import");
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnnotatedTactic {
    pub text: String,
    pub premises: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceRecord {
    full_name: String,
}

impl Serialize for AnnotatedTactic {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let prov: Vec<ProvenanceRecord> =
            self.premises.iter().map(|n| ProvenanceRecord { full_name: n.clone() }).collect();
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(&self.text)?;
        tup.serialize_element(&prov)?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for AnnotatedTactic {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (text, prov) = <(String, Vec<ProvenanceRecord>)>::deserialize(deserializer)?;
        Ok(AnnotatedTactic { text, premises: prov.into_iter().map(|p| p.full_name).collect() })
    }
}

/// Proof state after a tactic: either another goal state or closed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum StateAfter {
    Goals(String),
    Proved,
}

impl Serialize for StateAfter {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            StateAfter::Goals(s) => serializer.serialize_str(s),
            StateAfter::Proved => serializer.serialize_str(PROVED_MARKER),
        }
    }
}

impl<'de> Deserialize<'de> for StateAfter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == PROVED_MARKER { StateAfter::Proved } else { StateAfter::Goals(s) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracedTactic {
    pub tactic: String,
    pub annotated_tactic: AnnotatedTactic,
    pub state_before: String,
    pub state_after: StateAfter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremStatus {
    #[default]
    Proven,
    SorryUnproven,
    SorryProven,
}

/// Identity of a theorem across repositories and commits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TheoremKey {
    pub file_path: String,
    pub full_name: String,
    pub statement: String,
}

impl fmt::Display for TheoremKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.file_path, self.full_name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem {
    #[serde(rename = "url")]
    pub repo_url: String,
    pub commit: String,
    pub file_path: String,
    pub full_name: String,
    pub statement: String,
    pub start: Pos,
    pub end: Pos,
    #[serde(default)]
    pub traced_tactics: Vec<TracedTactic>,
    #[serde(default)]
    pub status: TheoremStatus,
}

impl Theorem {
    pub fn key(&self) -> TheoremKey {
        TheoremKey {
            file_path: self.file_path.clone(),
            full_name: self.full_name.clone(),
            statement: self.statement.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidTheorem {
            name: self.full_name.clone(),
            reason,
        };
        if self.full_name.is_empty() {
            return Err(invalid("empty full_name".into()));
        }
        if !self.start.is_valid() || !self.end.is_valid() || self.start > self.end {
            return Err(invalid("bad position range".into()));
        }
        if self.status == TheoremStatus::SorryUnproven && !self.traced_tactics.is_empty() {
            return Err(invalid("unproven sorry carries traced tactics".into()));
        }
        for t in &self.traced_tactics {
            for name in &t.annotated_tactic.premises {
                if !t.annotated_tactic.text.contains(name.as_str()) {
                    return Err(invalid(format!("premise `{name}` not in annotated tactic")));
                }
            }
        }
        Ok(())
    }
}

/// Parses a JSON array of theorem records and validates each one.
pub fn parse_dataset(json_text: &str) -> Result<Vec<Theorem>, CorpusError> {
    let theorems: Vec<Theorem> = serde_json::from_str(json_text)
        .map_err(|e| CorpusError::MalformedDataset(e.to_string()))?;
    for t in &theorems {
        t.validate()?;
    }
    Ok(theorems)
}

pub fn dataset_to_json(theorems: &[Theorem]) -> String {
    serde_json::to_string_pretty(theorems).expect("theorems serialize")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Theorem>,
    pub val: Vec<Theorem>,
    pub test: Vec<Theorem>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const DEFAULT_SPLIT_FRACTION: f64 = 0.02;

fn split_size(n: usize, frac: f64) -> usize {
    // 100 * 0.02 must not floor to 1 through rounding noise.
    (((n as f64) * frac + 1e-9).floor() as usize).max(1)
}

/// Seeded uniform split. Val and test each get `max(1, floor(n * frac))`
/// theorems; each split keeps the input order of its members.
pub fn random_split(
    theorems: &[Theorem],
    seed: u64,
    val_frac: f64,
    test_frac: f64,
) -> Result<DatasetSplit, CorpusError> {
    let n = theorems.len();
    if n < 3 {
        return Err(CorpusError::TooFewTheorems(n));
    }
    let valid_frac = |f: f64| (0.0..1.0).contains(&f);
    if !valid_frac(val_frac) || !valid_frac(test_frac) {
        return Err(CorpusError::InvalidFractions { val: val_frac, test: test_frac });
    }
    let n_val = split_size(n, val_frac);
    let n_test = split_size(n, test_frac);
    if n_val + n_test >= n {
        return Err(CorpusError::InvalidFractions { val: val_frac, test: test_frac });
    }
    let mut keys = HashSet::new();
    for t in theorems {
        let key = t.key();
        if keys.contains(&key) {
            return Err(CorpusError::DuplicateTheorem(key));
        }
        keys.insert(key);
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bucket = vec![0u8; n];
    for &i in &idx[..n_val] {
        bucket[i] = 1;
    }
    for &i in &idx[n_val..n_val + n_test] {
        bucket[i] = 2;
    }
    let mut split = DatasetSplit::default();
    for (t, b) in theorems.iter().zip(bucket) {
        match b {
            0 => split.train.push(t.clone()),
            1 => split.val.push(t.clone()),
            _ => split.test.push(t.clone()),
        }
    }
    Ok(split)
}
