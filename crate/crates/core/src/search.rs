//! Premise accessibility, retrieval, and best-first proof search.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{topological_order, Corpus, CorpusError, Pos, Premise, PremiseFile, TheoremKey};
use crate::retriever::{EmbeddingIndex, EmbeddingModel, RetrieverError};

pub const PROVED_TARGET: &str = "PROVED";
pub const DEFAULT_FRACTION: f64 = 0.25;
pub const DEFAULT_MAX_PREMISES: usize = 100;
pub const DEFAULT_CANDIDATES: usize = 64;
pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(600);

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("import cycle: {}", .0.join(" -> "))]
    ImportCycle(Vec<String>),
    #[error("{path} imports unknown file {import}")]
    UnknownImport { path: String, import: String },
    #[error("file {0} is not in the dependency graph")]
    UnknownFile(String),
    #[error("premise {0} has no embedding in the index")]
    MissingEmbedding(String),
    #[error("no initial state for theorem {0}")]
    UnknownTheorem(String),
    #[error("invalid environment fixture: {0}")]
    InvalidFixture(String),
    #[error("invalid retrieval fraction {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
}

impl From<CorpusError> for SearchError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::ImportCycle(c) => SearchError::ImportCycle(c),
            CorpusError::UnknownImport { path, import } => SearchError::UnknownImport { path, import },
            other => SearchError::InvalidFixture(other.to_string()),
        }
    }
}

/// File import graph with its reflexive-transitive closure.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraph {
    /// Paths in topological order (imports first).
    pub nodes: Vec<String>,
    pub edges: BTreeMap<String, Vec<String>>,
    pub closure: BTreeMap<String, BTreeSet<String>>,
}

impl DependencyGraph {
    pub fn from_files(files: &[PremiseFile]) -> Result<Self, SearchError> {
        let order = topological_order(files)?;
        let mut closure: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut nodes = Vec::with_capacity(order.len());
        for i in order {
            let f = &files[i];
            let mut reach = BTreeSet::from([f.path.clone()]);
            for imp in &f.imports {
                // Imports precede importers in topological order.
                reach.extend(closure[imp].iter().cloned());
            }
            closure.insert(f.path.clone(), reach);
            nodes.push(f.path.clone());
        }
        let edges = files.iter().map(|f| (f.path.clone(), f.imports.clone())).collect();
        Ok(DependencyGraph { nodes, edges, closure })
    }

    pub fn reachable(&self, path: &str) -> Option<&BTreeSet<String>> {
        self.closure.get(path)
    }
}

pub fn build_dependency_graph(corpus: &Corpus) -> Result<DependencyGraph, SearchError> {
    DependencyGraph::from_files(corpus.files())
}

/// Premises a theorem at `start` in `file_path` may use: everything in
/// transitively imported files, plus same-file premises ending before it.
pub fn accessible_premises(
    graph: &DependencyGraph,
    corpus: &Corpus,
    file_path: &str,
    start: Pos,
) -> Result<Vec<Premise>, SearchError> {
    let reach = graph.reachable(file_path).ok_or_else(|| SearchError::UnknownFile(file_path.to_string()))?;
    let mut out = Vec::new();
    for path in graph.nodes.iter().filter(|p| reach.contains(*p)) {
        let Some(file) = corpus.file(path) else { continue };
        let mut ps: Vec<&Premise> = file.premises.iter().collect();
        ps.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.full_name.cmp(&b.full_name)));
        if path == file_path {
            out.extend(ps.into_iter().filter(|p| p.end < start).cloned());
        } else {
            out.extend(ps.into_iter().cloned());
        }
    }
    Ok(out)
}

/// Number of premises kept for `n` accessible ones.
pub fn retrieval_cutoff(n: usize, fraction: f64, max_n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let top = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    top.min(n).min(max_n)
}

/// Accessible premises ranked by cosine similarity to the state, cut to the
/// top `fraction` and then to at most `max_n`.
pub fn retrieve_premises(
    model: &EmbeddingModel,
    index: &EmbeddingIndex,
    state_text: &str,
    accessible: &[Premise],
    fraction: f64,
    max_n: usize,
) -> Result<Vec<Premise>, SearchError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SearchError::InvalidFraction(fraction));
    }
    index.check_fresh(model)?;
    let by_name: BTreeMap<&str, &Premise> = accessible.iter().map(|p| (p.full_name.as_str(), p)).collect();
    if let Some(missing) = by_name.keys().find(|k| !index.entries.contains_key(**k)) {
        return Err(SearchError::MissingEmbedding(missing.to_string()));
    }
    let names: BTreeSet<&str> = by_name.keys().copied().collect();
    let query = model.embed_text(state_text);
    let keep = retrieval_cutoff(names.len(), fraction, max_n);
    Ok(index.rank(&query, Some(&names)).into_iter().take(keep).map(|(k, _)| by_name[k].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TacticOutcome {
    Next(String),
    Proved,
    Invalid,
    /// The environment itself broke; treated as an invalid edge.
    Failure(String),
}

pub trait ProofEnvironment {
    fn initial_state(&self, theorem: &TheoremKey) -> Option<String>;
    fn apply(&self, state: &str, tactic: &str) -> TacticOutcome;
    fn is_proved(&self, _state: &str) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tactic: String,
    pub log_prob: f64,
}

pub trait TacticGenerator {
    fn propose(&self, state: &str, premises: &[Premise], n: usize) -> Vec<Candidate>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchBudget {
    pub time: Duration,
    pub max_expansions: Option<usize>,
    pub candidates: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget { time: DEFAULT_TIME_LIMIT, max_expansions: None, candidates: DEFAULT_CANDIDATES }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchStatus {
    Proved { proof: Vec<String>, log_prob: f64 },
    Exhausted,
    Timeout,
}

impl SearchStatus {
    pub fn label(&self) -> &'static str {
        match self {
            SearchStatus::Proved { .. } => "proved",
            SearchStatus::Exhausted => "exhausted",
            SearchStatus::Timeout => "timeout",
        }
    }

    pub fn proof(&self) -> Option<&[String]> {
        match self {
            SearchStatus::Proved { proof, .. } => Some(proof),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchStats {
    pub expansions: usize,
    pub elapsed: Duration,
    pub env_failures: Vec<String>,
    /// Candidates dropped for a non-finite or positive log-prob.
    pub rejected_candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub status: SearchStatus,
    pub stats: SearchStats,
}

struct Node {
    state: Option<String>,
    parent: Option<usize>,
    tactic: Option<String>,
    score: f64,
}

#[derive(PartialEq)]
struct Entry {
    score: f64,
    seq: usize,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn path_to(nodes: &[Node], mut id: usize) -> Vec<String> {
    let mut out = Vec::new();
    while let Some(t) = &nodes[id].tactic {
        out.push(t.clone());
        id = nodes[id].parent.expect("non-root node has a parent");
    }
    out.reverse();
    out
}

/// Best-first search on cumulative log-prob. Proved nodes go through the
/// queue like any other, so the first one popped is a maximum-likelihood
/// proof.
pub fn best_first_search<E, G>(
    env: &E,
    generator: &G,
    retrieval: &mut dyn FnMut(&str) -> Vec<Premise>,
    theorem: &TheoremKey,
    budget: &SearchBudget,
) -> Result<SearchResult, SearchError>
where
    E: ProofEnvironment + ?Sized,
    G: TacticGenerator + ?Sized,
{
    let clock = Instant::now();
    let root = env.initial_state(theorem).ok_or_else(|| SearchError::UnknownTheorem(theorem.to_string()))?;
    let mut stats = SearchStats::default();
    let finish = |status, mut stats: SearchStats| {
        stats.elapsed = clock.elapsed();
        Ok(SearchResult { status, stats })
    };
    if env.is_proved(&root) {
        return finish(SearchStatus::Proved { proof: Vec::new(), log_prob: 0.0 }, stats);
    }

    let mut nodes = vec![Node { state: Some(root.clone()), parent: None, tactic: None, score: 0.0 }];
    let mut heap = BinaryHeap::from([Entry { score: 0.0, seq: 0, node: 0 }]);
    let mut seq = 1;
    let mut best: HashMap<String, f64> = HashMap::from([(root, 0.0)]);
    let mut expanded: HashSet<String> = HashSet::new();

    while let Some(Entry { score, node, .. }) = heap.pop() {
        let Some(state) = nodes[node].state.clone() else {
            return finish(SearchStatus::Proved { proof: path_to(&nodes, node), log_prob: score }, stats);
        };
        if expanded.contains(&state) || best.get(&state).is_some_and(|&b| score < b) {
            continue;
        }
        if clock.elapsed() >= budget.time || budget.max_expansions.is_some_and(|m| stats.expansions >= m) {
            return finish(SearchStatus::Timeout, stats);
        }
        expanded.insert(state.clone());
        stats.expansions += 1;

        let premises = retrieval(&state);
        let mut candidates = generator.propose(&state, &premises, budget.candidates);
        candidates.truncate(budget.candidates);
        for c in candidates {
            if !c.log_prob.is_finite() || c.log_prob > 0.0 {
                stats.rejected_candidates += 1;
                continue;
            }
            let child_score = score + c.log_prob;
            let child_state = match env.apply(&state, &c.tactic) {
                TacticOutcome::Proved => None,
                TacticOutcome::Next(s) if env.is_proved(&s) => None,
                TacticOutcome::Next(s) => {
                    if expanded.contains(&s) || best.get(&s).is_some_and(|&b| b >= child_score) {
                        continue;
                    }
                    best.insert(s.clone(), child_score);
                    Some(s)
                }
                TacticOutcome::Invalid => continue,
                TacticOutcome::Failure(detail) => {
                    stats.env_failures.push(detail);
                    continue;
                }
            };
            nodes.push(Node { state: child_state, parent: Some(node), tactic: Some(c.tactic), score: child_score });
            heap.push(Entry { score: child_score, seq, node: nodes.len() - 1 });
            seq += 1;
        }
    }
    debug_assert!(nodes.iter().all(|n| n.score <= 0.0));
    finish(SearchStatus::Exhausted, stats)
}

/// True iff `proof` drives the theorem from its initial state to Proved,
/// with nothing left over.
pub fn replay_proof<E: ProofEnvironment + ?Sized>(env: &E, theorem: &TheoremKey, proof: &[String]) -> bool {
    let Some(mut state) = env.initial_state(theorem) else { return false };
    if env.is_proved(&state) {
        return proof.is_empty();
    }
    for (i, tactic) in proof.iter().enumerate() {
        let last = i + 1 == proof.len();
        match env.apply(&state, tactic) {
            TacticOutcome::Proved => return last,
            TacticOutcome::Next(s) if env.is_proved(&s) => return last,
            TacticOutcome::Next(s) => state = s,
            TacticOutcome::Invalid | TacticOutcome::Failure(_) => return false,
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundProof {
    pub proof: Vec<String>,
    pub log_prob: f64,
}

/// Every proof of at most `depth_limit` tactics, by exhaustive DFS.
/// Sorted by log-prob descending, then proof text.
pub fn brute_force_prove<E, G>(
    env: &E,
    generator: &G,
    retrieval: &mut dyn FnMut(&str) -> Vec<Premise>,
    theorem: &TheoremKey,
    depth_limit: usize,
    candidates: usize,
) -> Vec<FoundProof>
where
    E: ProofEnvironment + ?Sized,
    G: TacticGenerator + ?Sized,
{
    let Some(root) = env.initial_state(theorem) else { return Vec::new() };
    let mut found = Vec::new();
    if env.is_proved(&root) {
        found.push(FoundProof { proof: Vec::new(), log_prob: 0.0 });
        return found;
    }
    let mut path = Vec::new();
    dfs(env, generator, retrieval, &root, 0.0, depth_limit, candidates, &mut path, &mut found);
    found.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.proof.cmp(&b.proof)));
    found
}

#[allow(clippy::too_many_arguments)]
fn dfs<E, G>(
    env: &E,
    generator: &G,
    retrieval: &mut dyn FnMut(&str) -> Vec<Premise>,
    state: &str,
    score: f64,
    depth_left: usize,
    candidates: usize,
    path: &mut Vec<String>,
    found: &mut Vec<FoundProof>,
) where
    E: ProofEnvironment + ?Sized,
    G: TacticGenerator + ?Sized,
{
    if depth_left == 0 {
        return;
    }
    let premises = retrieval(state);
    let mut cands = generator.propose(state, &premises, candidates);
    cands.truncate(candidates);
    for c in cands {
        if !c.log_prob.is_finite() || c.log_prob > 0.0 {
            continue;
        }
        path.push(c.tactic.clone());
        match env.apply(state, &c.tactic) {
            TacticOutcome::Proved => found.push(FoundProof { proof: path.clone(), log_prob: score + c.log_prob }),
            TacticOutcome::Next(s) if env.is_proved(&s) => {
                found.push(FoundProof { proof: path.clone(), log_prob: score + c.log_prob })
            }
            TacticOutcome::Next(s) => {
                dfs(env, generator, retrieval, &s, score + c.log_prob, depth_left - 1, candidates, path, found)
            }
            TacticOutcome::Invalid | TacticOutcome::Failure(_) => {}
        }
        path.pop();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureEdge {
    pub from: String,
    pub tactic: String,
    pub log_prob: f64,
    /// A state name or `PROVED`.
    pub to: String,
    /// Premise the generator must have been handed to propose this edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
}

/// Labeled state graph. `initial` maps theorem full names to states.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFixture {
    pub states: Vec<String>,
    pub edges: Vec<FixtureEdge>,
    pub initial: BTreeMap<String, String>,
    #[serde(default)]
    pub goals: Vec<String>,
}

impl EnvironmentFixture {
    pub fn parse(text: &str) -> Result<Self, SearchError> {
        let f: EnvironmentFixture =
            serde_json::from_str(text).map_err(|e| SearchError::InvalidFixture(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidFixture(m));
        let states: HashSet<&str> = self.states.iter().map(String::as_str).collect();
        if states.len() != self.states.len() {
            return bad("duplicate state".into());
        }
        if states.contains(PROVED_TARGET) {
            return bad(format!("`{PROVED_TARGET}` is reserved"));
        }
        for s in self.goals.iter().chain(self.initial.values()) {
            if !states.contains(s.as_str()) {
                return bad(format!("unknown state `{s}`"));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if !states.contains(e.from.as_str()) {
                return bad(format!("edge from unknown state `{}`", e.from));
            }
            if e.to != PROVED_TARGET && !states.contains(e.to.as_str()) {
                return bad(format!("edge to unknown state `{}`", e.to));
            }
            if !e.log_prob.is_finite() || e.log_prob > 0.0 {
                return bad(format!("log_prob {} on `{}` must be finite and <= 0", e.log_prob, e.tactic));
            }
            if !seen.insert((e.from.as_str(), e.tactic.as_str())) {
                return bad(format!("duplicate tactic `{}` from `{}`", e.tactic, e.from));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        crate::database::canonical_json(self)
    }
}

/// Deterministic environment backed by a fixture.
#[derive(Clone, Debug)]
pub struct FixtureEnvironment {
    initial: BTreeMap<String, String>,
    goals: HashSet<String>,
    transitions: HashMap<(String, String), String>,
}

impl FixtureEnvironment {
    pub fn new(fixture: &EnvironmentFixture) -> Result<Self, SearchError> {
        fixture.validate()?;
        Ok(FixtureEnvironment {
            initial: fixture.initial.clone(),
            goals: fixture.goals.iter().cloned().collect(),
            transitions: fixture.edges.iter().map(|e| ((e.from.clone(), e.tactic.clone()), e.to.clone())).collect(),
        })
    }
}

impl ProofEnvironment for FixtureEnvironment {
    fn initial_state(&self, theorem: &TheoremKey) -> Option<String> {
        self.initial.get(&theorem.full_name).cloned()
    }

    fn apply(&self, state: &str, tactic: &str) -> TacticOutcome {
        match self.transitions.get(&(state.to_string(), tactic.to_string())) {
            Some(to) if to == PROVED_TARGET => TacticOutcome::Proved,
            Some(to) => TacticOutcome::Next(to.clone()),
            None => TacticOutcome::Invalid,
        }
    }

    fn is_proved(&self, state: &str) -> bool {
        self.goals.contains(state)
    }
}

/// Proposes a fixture's outgoing edges with their fixed log-probs. Edges
/// that name a premise are offered only when that premise was retrieved.
#[derive(Clone, Debug)]
pub struct TableGenerator {
    table: HashMap<String, Vec<FixtureEdge>>,
}

impl TableGenerator {
    pub fn new(fixture: &EnvironmentFixture) -> Self {
        let mut table: HashMap<String, Vec<FixtureEdge>> = HashMap::new();
        for e in &fixture.edges {
            table.entry(e.from.clone()).or_default().push(e.clone());
        }
        for edges in table.values_mut() {
            edges.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tactic.cmp(&b.tactic)));
        }
        TableGenerator { table }
    }
}

impl TacticGenerator for TableGenerator {
    fn propose(&self, state: &str, premises: &[Premise], n: usize) -> Vec<Candidate> {
        let Some(edges) = self.table.get(state) else { return Vec::new() };
        edges
            .iter()
            .filter(|e| e.premise.as_ref().is_none_or(|p| premises.iter().any(|q| &q.full_name == p)))
            .take(n)
            .map(|e| Candidate { tactic: e.tactic.clone(), log_prob: e.log_prob })
            .collect()
    }
}

pub const SYNTHETIC_THEOREM: &str = "synthetic";

/// Random layered state graph: at most `max_tactics` tactic names and proofs
/// of at most `max_depth` steps. Edges only go one layer deeper, so every
/// path terminates.
pub fn synthetic_fixture(seed: u64, max_tactics: usize, max_depth: usize) -> EnvironmentFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tactics = rng.gen_range(1..=max_tactics.max(1));
    let depth = max_depth.max(1);
    let mut layers: Vec<Vec<String>> = vec![vec!["s0".into()]];
    for l in 1..depth {
        let width = rng.gen_range(1..=3);
        layers.push((0..width).map(|i| format!("s{l}_{i}")).collect());
    }
    let mut f = EnvironmentFixture {
        states: layers.iter().flatten().cloned().collect(),
        initial: BTreeMap::from([(SYNTHETIC_THEOREM.to_string(), "s0".to_string())]),
        ..Default::default()
    };
    for (l, layer) in layers.iter().enumerate() {
        for s in layer {
            for t in 0..tactics {
                if !rng.gen_bool(0.5) {
                    continue;
                }
                let to = match layers.get(l + 1) {
                    Some(next) if !rng.gen_bool(0.2) => next[rng.gen_range(0..next.len())].clone(),
                    Some(_) => PROVED_TARGET.to_string(),
                    None if rng.gen_bool(0.5) => PROVED_TARGET.to_string(),
                    None => continue,
                };
                let log_prob = -(rng.gen_range(1..=300) as f64) / 100.0;
                f.edges.push(FixtureEdge { from: s.clone(), tactic: format!("t{t}"), log_prob, to, premise: None });
            }
        }
    }
    if depth > 1 && rng.gen_bool(0.25) {
        let last = &layers[depth - 1];
        f.goals.push(last[rng.gen_range(0..last.len())].clone());
    }
    f
}

pub fn synthetic_key() -> TheoremKey {
    TheoremKey { file_path: "Synthetic.lean".into(), full_name: SYNTHETIC_THEOREM.into(), statement: String::new() }
}
