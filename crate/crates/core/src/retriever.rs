//! Premise retriever: a hashed byte n-gram linear encoder trained with a
//! contrastive objective, plus EWC, Fisher estimation, embedding indexes and
//! recall evaluation.
//!
//! Text is mapped to a sparse feature vector (byte 1-, 2- and 3-grams hashed
//! into `buckets` slots, L2-normalized, plus a constant bias slot), projected
//! by a `dim x (buckets + 1)` matrix, and L2-normalized. Cosine similarity
//! between unit vectors is a plain dot product.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, DatasetSplit, Premise, Theorem};

pub const DEFAULT_K: usize = 10;
pub const NEGATIVES_PER_EXAMPLE: usize = 3;
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("no training examples")]
    EmptyDataset,
    #[error("embedding index built for model {index}, queried with {model}")]
    StaleIndex { index: String, model: String },
    #[error("empty ground-truth premise set for state `{0}`")]
    EmptyGroundTruth(String),
    #[error("no evaluation pairs")]
    NoEvaluationPairs,
    #[error("no datasets to evaluate")]
    NoDatasets,
    #[error("need at least {needed} premises for negative sampling, corpus has {got}")]
    TooFewPremises { needed: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

type Sparse = Vec<(usize, f64)>;

// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Byte n-grams of length 1 to 3, in text order.
pub fn byte_ngrams(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut grams = Vec::new();
    for n in 1..=3 {
        grams.extend(bytes.windows(n));
    }
    grams
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    dim: usize,
    buckets: usize,
    theta: Vec<f64>,
}

impl EmbeddingModel {
    pub fn new(dim: usize, buckets: usize, theta: Vec<f64>) -> Result<Self, RetrieverError> {
        if dim < 2 || buckets == 0 {
            return Err(RetrieverError::InvalidConfig(format!("dim={dim} buckets={buckets}")));
        }
        let expected = dim * (buckets + 1);
        if theta.len() != expected {
            return Err(RetrieverError::ShapeMismatch { expected, got: theta.len() });
        }
        Ok(Self { dim, buckets, theta })
    }

    /// Entries drawn uniformly from `[-scale, scale]` with `scale = 1/sqrt(buckets + 1)`.
    pub fn random(dim: usize, buckets: usize, seed: u64) -> Result<Self, RetrieverError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((buckets + 1) as f64).sqrt();
        let theta = (0..dim * (buckets + 1)).map(|_| rng.gen_range(-scale..scale)).collect();
        Self::new(dim, buckets, theta)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<(), RetrieverError> {
        if theta.len() != self.theta.len() {
            return Err(RetrieverError::ShapeMismatch { expected: self.theta.len(), got: theta.len() });
        }
        self.theta = theta;
        Ok(())
    }

    fn width(&self) -> usize {
        self.buckets + 1
    }

    /// Sparse feature vector sorted by slot; the last slot is the bias.
    pub fn features(&self, text: &str) -> Sparse {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for g in byte_ngrams(text) {
            *counts.entry((fnv1a(g) % self.buckets as u64) as usize).or_default() += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        let mut x: Sparse = counts.into_iter().map(|(j, c)| (j, c / norm)).collect();
        x.push((self.buckets, 1.0));
        x
    }

    fn project(&self, x: &Sparse) -> Vec<f64> {
        let w = self.width();
        (0..self.dim)
            .map(|r| {
                let row = &self.theta[r * w..(r + 1) * w];
                x.iter().map(|&(j, v)| row[j] * v).sum()
            })
            .collect()
    }

    fn embed_features(&self, x: &Sparse) -> (Vec<f64>, f64) {
        let v = self.project(x);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut e = vec![0.0; self.dim];
            e[0] = 1.0;
            return (e, 0.0);
        }
        (v.into_iter().map(|a| a / norm).collect(), norm)
    }

    /// Unit-norm embedding. A zero projection maps to the first basis vector.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.embed_features(&self.features(text)).0
    }

    pub fn embed_premise(&self, premise: &Premise) -> Vec<f64> {
        self.embed_text(&premise.retrieval_text())
    }

    /// Hex SHA-256 over the shape and the parameter bit patterns.
    pub fn version_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.buckets as u64).to_le_bytes());
        for t in &self.theta {
            h.update(t.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log softmax` of the positive among `[pos; negs]` cosine similarities
/// at temperature 1.
pub fn contrastive_loss(state: &[f64], pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    let mut sims = Vec::with_capacity(1 + negs.len());
    sims.push(dot(state, pos));
    sims.extend(negs.iter().map(|n| dot(state, n)));
    log_sum_exp(&sims) - sims[0]
}

fn check_len(expected: usize, got: usize) -> Result<(), RetrieverError> {
    if expected != got {
        return Err(RetrieverError::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// `(lambda / 2) * sum_i F_i (theta_i - anchor_i)^2`.
pub fn ewc_penalty(theta: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<f64, RetrieverError> {
    check_len(theta.len(), anchor.len())?;
    check_len(theta.len(), fisher.len())?;
    let s: f64 = theta.iter().zip(anchor).zip(fisher).map(|((t, a), f)| f * (t - a) * (t - a)).sum();
    Ok(0.5 * lambda * s)
}

pub fn ewc_gradient(theta: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<Vec<f64>, RetrieverError> {
    check_len(theta.len(), anchor.len())?;
    check_len(theta.len(), fisher.len())?;
    Ok(theta.iter().zip(anchor).zip(fisher).map(|((t, a), f)| lambda * f * (t - a)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub state: String,
    pub positive: Premise,
    pub negatives: Vec<Premise>,
}

// Pre-hashed texts: state first, then positive, then negatives.
struct Encoded {
    texts: Vec<Sparse>,
}

fn encode(model: &EmbeddingModel, ex: &TrainingExample) -> Encoded {
    let mut texts = vec![model.features(&ex.state), model.features(&ex.positive.retrieval_text())];
    texts.extend(ex.negatives.iter().map(|n| model.features(&n.retrieval_text())));
    Encoded { texts }
}

// Adds d(loss)/d(theta) for one example into `grad` and returns the loss.
fn accumulate_example(model: &EmbeddingModel, ex: &Encoded, scale: f64, grad: &mut [f64]) -> f64 {
    let embs: Vec<(Vec<f64>, f64)> = ex.texts.iter().map(|x| model.embed_features(x)).collect();
    let state = &embs[0].0;
    let sims: Vec<f64> = embs[1..].iter().map(|(e, _)| dot(state, e)).collect();
    let lse = log_sum_exp(&sims);
    let loss = lse - sims[0];
    // dL/dsim_i = softmax_i - [i == 0]
    let g: Vec<f64> = sims
        .iter()
        .enumerate()
        .map(|(i, s)| (s - lse).exp() - if i == 0 { 1.0 } else { 0.0 })
        .collect();

    let d = model.dim;
    let mut d_emb: Vec<Vec<f64>> = vec![vec![0.0; d]; embs.len()];
    for (i, gi) in g.iter().enumerate() {
        let cand = &embs[i + 1].0;
        for r in 0..d {
            d_emb[0][r] += gi * cand[r];
            d_emb[i + 1][r] += gi * state[r];
        }
    }
    let w = model.width();
    for ((x, (e, norm)), de) in ex.texts.iter().zip(&embs).zip(&d_emb) {
        if *norm == 0.0 {
            continue;
        }
        // through e = v / |v|: dv = (de - e (e . de)) / |v|
        let proj = dot(e, de);
        for r in 0..d {
            let dv = (de[r] - e[r] * proj) / norm * scale;
            if dv == 0.0 {
                continue;
            }
            let row = &mut grad[r * w..(r + 1) * w];
            for &(j, xv) in x {
                row[j] += dv * xv;
            }
        }
    }
    loss
}

fn batch_loss_grad(model: &EmbeddingModel, batch: &[&Encoded]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.theta.len()];
    let scale = 1.0 / batch.len() as f64;
    let loss = batch.iter().map(|ex| accumulate_example(model, ex, scale, &mut grad)).sum::<f64>() * scale;
    (loss, grad)
}

/// EWC term applied during training.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcTerm {
    pub lambda: f64,
    pub fisher: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl EwcTerm {
    pub fn penalty(&self, theta: &[f64]) -> Result<f64, RetrieverError> {
        ewc_penalty(theta, &self.anchor, &self.fisher, self.lambda)
    }
}

/// Mean contrastive loss over `examples` plus the optional EWC penalty, and
/// its analytic gradient with respect to the model parameters.
pub fn objective_and_gradient(
    model: &EmbeddingModel,
    examples: &[TrainingExample],
    ewc: Option<&EwcTerm>,
) -> Result<(f64, Vec<f64>), RetrieverError> {
    if examples.is_empty() {
        return Err(RetrieverError::EmptyDataset);
    }
    let encoded: Vec<Encoded> = examples.iter().map(|e| encode(model, e)).collect();
    let refs: Vec<&Encoded> = encoded.iter().collect();
    let (mut loss, mut grad) = batch_loss_grad(model, &refs);
    if let Some(term) = ewc {
        loss += term.penalty(&model.theta)?;
        let g = ewc_gradient(&model.theta, &term.anchor, &term.fisher, term.lambda)?;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Objective value only; used by finite-difference checks.
pub fn objective(
    model: &EmbeddingModel,
    examples: &[TrainingExample],
    ewc: Option<&EwcTerm>,
) -> Result<f64, RetrieverError> {
    let mut loss = 0.0;
    for ex in examples {
        let s = model.embed_text(&ex.state);
        let p = model.embed_premise(&ex.positive);
        let n: Vec<Vec<f64>> = ex.negatives.iter().map(|n| model.embed_premise(n)).collect();
        loss += contrastive_loss(&s, &p, &n);
    }
    loss /= examples.len().max(1) as f64;
    if let Some(term) = ewc {
        loss += term.penalty(&model.theta)?;
    }
    Ok(loss)
}

/// Diagonal Fisher estimate: mean over consecutive batches of the squared
/// batch gradient of the contrastive loss.
pub fn compute_fisher(
    model: &EmbeddingModel,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<Vec<f64>, RetrieverError> {
    if examples.is_empty() {
        return Err(RetrieverError::EmptyDataset);
    }
    let encoded: Vec<Encoded> = examples.iter().map(|e| encode(model, e)).collect();
    let grads = encoded.chunks(batch_size.max(1)).map(|chunk| {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        batch_loss_grad(model, &refs).1
    });
    Ok(fisher_from_gradients(grads, model.theta.len()))
}

/// Mean of elementwise squared gradients.
pub fn fisher_from_gradients<I: IntoIterator<Item = Vec<f64>>>(grads: I, len: usize) -> Vec<f64> {
    let mut f = vec![0.0; len];
    let mut batches = 0usize;
    for g in grads {
        f.iter_mut().zip(&g).for_each(|(a, b)| *a += b * b);
        batches += 1;
    }
    if batches > 0 {
        f.iter_mut().for_each(|a| *a /= batches as f64);
    }
    f
}

/// One example per (traced tactic, referenced premise). Each example gets
/// three negatives; one comes from the positive's file when that file has
/// another premise. Premise names missing from the corpus are skipped.
pub fn mine_training_examples(
    theorems: &[Theorem],
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<TrainingExample>, RetrieverError> {
    let all: Vec<&Premise> = corpus.premises().collect();
    let by_name: BTreeMap<&str, usize> = all.iter().enumerate().map(|(i, p)| (p.full_name.as_str(), i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in theorems {
        for tac in &t.traced_tactics {
            for name in &tac.annotated_tactic.premises {
                let Some(&pos_idx) = by_name.get(name.as_str()) else { continue };
                if all.len() < NEGATIVES_PER_EXAMPLE + 1 {
                    return Err(RetrieverError::TooFewPremises {
                        needed: NEGATIVES_PER_EXAMPLE + 1,
                        got: all.len(),
                    });
                }
                let positive = all[pos_idx];
                let mut chosen: Vec<usize> = Vec::with_capacity(NEGATIVES_PER_EXAMPLE);
                let same_file: Vec<usize> = (0..all.len())
                    .filter(|&i| i != pos_idx && all[i].file_path == positive.file_path)
                    .collect();
                if let Some(&i) = same_file.choose(&mut rng) {
                    chosen.push(i);
                }
                let rest: Vec<usize> = (0..all.len()).filter(|i| *i != pos_idx && !chosen.contains(i)).collect();
                let need = NEGATIVES_PER_EXAMPLE - chosen.len();
                chosen.extend(index::sample(&mut rng, rest.len(), need).into_iter().map(|k| rest[k]));
                out.push(TrainingExample {
                    state: tac.state_before.clone(),
                    positive: positive.clone(),
                    negatives: chosen.into_iter().map(|i| all[i].clone()).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Precomputed premise embeddings tied to one model version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub version_hash: String,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_fresh(&self, model: &EmbeddingModel) -> Result<(), RetrieverError> {
        let current = model.version_hash();
        if current != self.version_hash {
            return Err(RetrieverError::StaleIndex { index: self.version_hash.clone(), model: current });
        }
        Ok(())
    }

    /// Keys ranked by similarity to `query`, descending; ties by key.
    /// `candidates` restricts the ranking when given.
    pub fn rank<'a>(&'a self, query: &[f64], candidates: Option<&BTreeSet<&str>>) -> Vec<(&'a str, f64)> {
        let mut scored: Vec<(&str, f64)> = self
            .entries
            .iter()
            .filter(|(k, _)| candidates.is_none_or(|c| c.contains(k.as_str())))
            .map(|(k, v)| (k.as_str(), dot(query, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieverError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, RetrieverError> {
        read_json(path)
    }
}

pub fn precompute_embeddings(model: &EmbeddingModel, corpus: &Corpus) -> EmbeddingIndex {
    EmbeddingIndex {
        version_hash: model.version_hash(),
        entries: corpus.premises().map(|p| (p.full_name.clone(), model.embed_premise(p))).collect(),
    }
}

/// A proof state and the premises its tactic actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub state: String,
    pub premises: BTreeSet<String>,
}

/// Evaluation pairs for every traced tactic that references a premise.
pub fn eval_pairs(theorems: &[Theorem]) -> Vec<EvalPair> {
    theorems
        .iter()
        .flat_map(|t| &t.traced_tactics)
        .filter(|tac| !tac.annotated_tactic.premises.is_empty())
        .map(|tac| EvalPair {
            state: tac.state_before.clone(),
            premises: tac.annotated_tactic.premises.iter().cloned().collect(),
        })
        .collect()
}

/// Mean over pairs of the fraction of ground-truth premises among the top
/// `k` ranked entries.
pub fn recall_at_k(
    model: &EmbeddingModel,
    index: &EmbeddingIndex,
    pairs: &[EvalPair],
    k: usize,
) -> Result<f64, RetrieverError> {
    index.check_fresh(model)?;
    if pairs.is_empty() {
        return Err(RetrieverError::NoEvaluationPairs);
    }
    let mut total = 0.0;
    for pair in pairs {
        if pair.premises.is_empty() {
            return Err(RetrieverError::EmptyGroundTruth(pair.state.clone()));
        }
        let q = model.embed_text(&pair.state);
        let ranked = index.rank(&q, None);
        let hits = ranked.iter().take(k).filter(|(key, _)| pair.premises.contains(*key)).count();
        total += hits as f64 / pair.premises.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// A previously learned task: its test pairs and the corpus they retrieve from.
#[derive(Clone, Debug)]
pub struct EvaluationTask {
    pub name: String,
    pub corpus: Corpus,
    pub test_pairs: Vec<EvalPair>,
}

pub fn task_recall(model: &EmbeddingModel, task: &EvaluationTask, k: usize) -> Result<f64, RetrieverError> {
    let index = precompute_embeddings(model, &task.corpus);
    recall_at_k(model, &index, &task.test_pairs, k)
}

/// Unweighted mean of test R@k over `tasks`.
pub fn average_test_recall(model: &EmbeddingModel, tasks: &[EvaluationTask], k: usize) -> Result<f64, RetrieverError> {
    if tasks.is_empty() {
        return Err(RetrieverError::NoDatasets);
    }
    let recalls = tasks.iter().map(|t| task_recall(model, t, k)).collect::<Result<Vec<_>, _>>()?;
    Ok(mean(&recalls))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Parameter update rule. Both apply the clipped gradient under the same
/// learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct OptimizerState {
    rule: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(rule: Optimizer, len: usize) -> Self {
        let (m, v) = match rule {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::AdamW { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        Self { rule, m, v, t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, grad_scale: f64) {
        match self.rule {
            Optimizer::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= lr * grad_scale * g;
                }
            }
            Optimizer::AdamW { beta1, beta2, eps, weight_decay } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..theta.len() {
                    let g = grad[i] * grad_scale;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    theta[i] -= lr * (update + weight_decay * theta[i]);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub clip: f64,
    /// EWC strength; used only when the checkpoint carries Fisher and anchor.
    pub ewc_lambda: Option<f64>,
    /// Steps between validation passes; `None` means four per epoch.
    pub eval_every: Option<usize>,
    pub seed: u64,
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adamw(),
            lr: 1e-3,
            warmup_steps: 0,
            batch_size: 16,
            clip: 1.0,
            ewc_lambda: None,
            eval_every: None,
            seed: 0,
            k: DEFAULT_K,
        }
    }
}

/// Linear warmup to `base`, then cosine decay toward zero over the rest.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub history: Vec<String>,
    pub best_val_r10: f64,
    pub fisher: Option<Vec<f64>>,
    pub anchor: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: u32,
    #[serde(flatten)]
    checkpoint: Checkpoint,
}

impl Checkpoint {
    pub fn fresh(model: EmbeddingModel) -> Self {
        Self { model, history: Vec::new(), best_val_r10: 0.0, fisher: None, anchor: None }
    }

    pub fn ewc_term(&self, lambda: f64) -> Option<EwcTerm> {
        Some(EwcTerm { lambda, fisher: self.fisher.clone()?, anchor: self.anchor.clone()? })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieverError> {
        write_json(path, &CheckpointFile { format: CHECKPOINT_FORMAT, checkpoint: self.clone() })
    }

    pub fn load(path: &Path) -> Result<Self, RetrieverError> {
        let file: CheckpointFile = read_json(path)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(RetrieverError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint format {}", file.format),
            });
        }
        let ck = file.checkpoint;
        EmbeddingModel::new(ck.model.dim, ck.model.buckets, ck.model.theta.clone()).map_err(|e| {
            RetrieverError::Corrupt { path: path.to_path_buf(), reason: e.to_string() }
        })?;
        Ok(ck)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RetrieverError> {
    let io = |source| RetrieverError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string(value).expect("serializable");
    fs::write(path, text).map_err(|source| RetrieverError::Io { path: path.to_path_buf(), source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RetrieverError> {
    let text = fs::read_to_string(path).map_err(|source| RetrieverError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| RetrieverError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

/// Validation R@k of a model on a split's validation theorems.
pub fn validation_recall(
    model: &EmbeddingModel,
    corpus: &Corpus,
    val_pairs: &[EvalPair],
    k: usize,
) -> Result<f64, RetrieverError> {
    let index = precompute_embeddings(model, corpus);
    recall_at_k(model, &index, val_pairs, k)
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub steps: usize,
    pub examples: usize,
    /// `(step, validation R@k)` for every evaluation pass.
    pub evaluations: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// One pass of clipped first-order updates over the mined training examples.
/// Returns the evaluated iterate with the highest validation recall (later
/// iterates win ties) with `tag` appended to its history.
pub fn train_one_epoch(
    checkpoint: &Checkpoint,
    split: &DatasetSplit,
    corpus: &Corpus,
    tag: &str,
    config: &TrainConfig,
) -> Result<(Checkpoint, EpochLog), RetrieverError> {
    let mut examples = mine_training_examples(&split.train, corpus, config.seed)?;
    if examples.is_empty() {
        return Err(RetrieverError::EmptyDataset);
    }
    let val_pairs = eval_pairs(&split.val);
    if val_pairs.is_empty() {
        return Err(RetrieverError::NoEvaluationPairs);
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    let ewc = config.ewc_lambda.and_then(|l| checkpoint.ewc_term(l));

    let mut model = checkpoint.model.clone();
    let encoded: Vec<Encoded> = examples.iter().map(|e| encode(&model, e)).collect();
    let batch = config.batch_size.max(1);
    let total = encoded.len().div_ceil(batch);
    let eval_every = config.eval_every.unwrap_or_else(|| total.div_ceil(4)).max(1);

    let mut opt = OptimizerState::new(config.optimizer, model.theta.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluations = Vec::new();
    let mut final_loss = 0.0;
    for (step, chunk) in encoded.chunks(batch).enumerate() {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let (mut loss, mut grad) = batch_loss_grad(&model, &refs);
        if let Some(term) = &ewc {
            loss += term.penalty(&model.theta)?;
            let g = ewc_gradient(&model.theta, &term.anchor, &term.fisher, term.lambda)?;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        final_loss = loss;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip_scale = if norm > config.clip { config.clip / norm } else { 1.0 };
        let lr = learning_rate(config.lr, step, config.warmup_steps, total);
        opt.step(&mut model.theta, &grad, lr, clip_scale);

        if (step + 1) % eval_every == 0 || step + 1 == total {
            let r = validation_recall(&model, corpus, &val_pairs, config.k)?;
            evaluations.push((step + 1, r));
            if best.as_ref().is_none_or(|(b, _)| r >= *b) {
                best = Some((r, model.theta.clone()));
            }
        }
    }

    let (best_val_r10, theta) = best.expect("at least one evaluation per epoch");
    model.set_theta(theta)?;
    let mut history = checkpoint.history.clone();
    history.push(tag.to_string());
    let out = Checkpoint {
        model,
        history,
        best_val_r10,
        fisher: checkpoint.fisher.clone(),
        anchor: checkpoint.anchor.clone(),
    };
    Ok((out, EpochLog { steps: total, examples: examples.len(), evaluations, final_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::file;
    use crate::corpus::{AnnotatedTactic, Pos, StateAfter, TheoremStatus, TracedTactic};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = EmbeddingModel::random(8, 64, 1).unwrap();
        for text in ["", "a", "theorem foo : 1 + 1 = 2", "∀ x ∈ s, f x ≤ g x"] {
            let a = m.embed_text(text);
            assert_eq!(a, m.embed_text(text));
            assert!(close(norm(&a), 1.0, 1e-9), "{text}");
        }
    }

    #[test]
    fn zero_projection_falls_back_to_basis() {
        let m = EmbeddingModel::new(2, 1, vec![0.0; 4]).unwrap();
        assert_eq!(m.embed_text("x"), vec![1.0, 0.0]);
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(EmbeddingModel::new(1, 4, vec![0.0; 5]).is_err());
        assert!(matches!(
            EmbeddingModel::new(2, 4, vec![0.0; 9]),
            Err(RetrieverError::ShapeMismatch { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn disjoint_ngrams_give_orthogonal_embeddings_under_identity() {
        // Oracle: n-gram sets extracted independently of the hashing path.
        fn grams(s: &str) -> BTreeSet<String> {
            let chars: Vec<char> = s.chars().collect();
            (1..=3).flat_map(|n| chars.windows(n).map(|w| w.iter().collect::<String>()).collect::<Vec<_>>()).collect()
        }
        assert!(grams("ab").is_disjoint(&grams("cd")));
        let buckets = 4096;
        let width = buckets + 1;
        // identity on the n-gram slots, zero bias column
        let mut theta = vec![0.0; width * width];
        for i in 0..buckets {
            theta[i * width + i] = 1.0;
        }
        let m = EmbeddingModel::new(width, buckets, theta).unwrap();
        let fa: BTreeSet<usize> = m.features("ab").iter().map(|x| x.0).filter(|&j| j < buckets).collect();
        let fc: BTreeSet<usize> = m.features("cd").iter().map(|x| x.0).filter(|&j| j < buckets).collect();
        assert_eq!(fa.len(), grams("ab").len());
        assert!(fa.is_disjoint(&fc));
        assert!(close(dot(&m.embed_text("ab"), &m.embed_text("cd")), 0.0, 1e-12));
        assert!(close(dot(&m.embed_text("ab"), &m.embed_text("ab")), 1.0, 1e-12));
    }

    #[test]
    fn contrastive_loss_examples() {
        let s = vec![1.0, 0.0];
        let same = vec![0.6, 0.8];
        assert!(close(contrastive_loss(&s, &same, std::slice::from_ref(&same)), 2f64.ln(), 1e-12));
        assert!(close(contrastive_loss(&s, &same, &[same.clone(), same.clone()]), 3f64.ln(), 1e-12));
        let orth = vec![0.0, 1.0];
        let l = contrastive_loss(&s, &s, &[orth.clone(), orth.clone(), orth]);
        assert!(close(l, (1.0 + 3.0 * (-1f64).exp()).ln(), 1e-12));
        assert!(close(l, 0.7436684, 1e-7));
    }

    #[test]
    fn ewc_examples() {
        assert!(close(ewc_penalty(&[1.5], &[1.0], &[2.0], 0.1).unwrap(), 0.025, 1e-15));
        assert_eq!(ewc_penalty(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0], 0.1).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&[1.0], &[5.0], &[3.0], 0.0).unwrap(), 0.0);
        assert!(matches!(ewc_penalty(&[1.0], &[1.0, 2.0], &[1.0], 0.1), Err(RetrieverError::ShapeMismatch { .. })));
    }

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_from_gradients(vec![vec![1.0], vec![3.0]], 1), vec![5.0]);
        assert_eq!(fisher_from_gradients(vec![vec![0.0, 0.0]; 3], 2), vec![0.0, 0.0]);
        assert_eq!(fisher_from_gradients(vec![vec![-2.5]], 1), vec![6.25]);
    }

    pub(crate) fn toy_corpus() -> Corpus {
        Corpus::from_files(vec![
            file("A", &[], &["a0", "a1", "a2"]),
            file("B", &["A"], &["b0"]),
            file("C", &[], &["c0", "c1"]),
        ])
        .unwrap()
    }

    fn tactic(premises: &[&str], state: &str) -> TracedTactic {
        let text = format!("apply {}", premises.join(" "));
        TracedTactic {
            tactic: text.clone(),
            annotated_tactic: AnnotatedTactic { text, premises: premises.iter().map(|s| s.to_string()).collect() },
            state_before: state.into(),
            state_after: StateAfter::Proved,
        }
    }

    fn thm(name: &str, tactics: Vec<TracedTactic>) -> Theorem {
        Theorem {
            repo_url: "u".into(),
            commit: "c".into(),
            file_path: "B".into(),
            full_name: name.into(),
            statement: name.into(),
            start: Pos::new(40, 1),
            end: Pos::new(41, 1),
            traced_tactics: tactics,
            status: TheoremStatus::Proven,
        }
    }

    #[test]
    fn mining_counts_and_negatives() {
        let corpus = toy_corpus();
        let ts = vec![thm("t", vec![tactic(&["a0", "b0"], "s0"), tactic(&["missing"], "s1")])];
        let ex = mine_training_examples(&ts, &corpus, 9).unwrap();
        assert_eq!(ex.len(), 2);
        for e in &ex {
            assert_eq!(e.negatives.len(), 3);
            let names: BTreeSet<&str> = e.negatives.iter().map(|p| p.full_name.as_str()).collect();
            assert_eq!(names.len(), 3);
            assert!(!names.contains(e.positive.full_name.as_str()));
        }
        // a0's file has other premises: one negative comes from it
        assert!(ex[0].negatives[0].file_path == "A");
        assert_eq!(ex, mine_training_examples(&ts, &corpus, 9).unwrap());
    }

    #[test]
    fn mining_with_singleton_file_samples_all_randomly() {
        let corpus = toy_corpus();
        let ts = vec![thm("t", vec![tactic(&["b0"], "s")])];
        for seed in 0..20 {
            let ex = mine_training_examples(&ts, &corpus, seed).unwrap();
            assert!(ex[0].negatives.iter().all(|n| n.full_name != "b0"));
        }
    }

    #[test]
    fn mining_needs_four_premises() {
        let corpus = Corpus::from_files(vec![file("A", &[], &["a0", "a1", "a2"])]).unwrap();
        let ts = vec![thm("t", vec![tactic(&["a0"], "s")])];
        assert!(matches!(
            mine_training_examples(&ts, &corpus, 0),
            Err(RetrieverError::TooFewPremises { .. })
        ));
    }

    #[test]
    fn index_coverage_and_staleness() {
        let corpus = toy_corpus();
        let m = EmbeddingModel::random(4, 32, 3).unwrap();
        let idx = precompute_embeddings(&m, &corpus);
        assert_eq!(idx.len(), 6);
        for p in corpus.premises() {
            assert_eq!(idx.entries[&p.full_name], m.embed_premise(p));
        }
        assert!(precompute_embeddings(&m, &Corpus::default()).is_empty());
        let mut m2 = m.clone();
        let mut theta = m2.theta().to_vec();
        theta[0] += 1e-3;
        m2.set_theta(theta).unwrap();
        let pairs = vec![EvalPair { state: "s".into(), premises: ["a0".to_string()].into() }];
        assert!(matches!(recall_at_k(&m2, &idx, &pairs, 10), Err(RetrieverError::StaleIndex { .. })));
    }

    fn fixed_index(entries: &[(&str, [f64; 2])]) -> (EmbeddingModel, EmbeddingIndex) {
        // constant-embedding model: bias column only, so every text maps to [1, 0]
        let m = EmbeddingModel::new(2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let idx = EmbeddingIndex {
            version_hash: m.version_hash(),
            entries: entries.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect(),
        };
        (m, idx)
    }

    fn pair(gt: &[&str]) -> EvalPair {
        EvalPair { state: "q".into(), premises: gt.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn recall_examples() {
        let (m, idx) = fixed_index(&[("p1", [1.0, 0.0]), ("p2", [-1.0, 0.0]), ("p3", [0.0, 1.0])]);
        assert_eq!(recall_at_k(&m, &idx, &[pair(&["p1", "p2"])], 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&m, &idx, &[pair(&["p1"])], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&m, &idx, &[pair(&["p2"])], 2).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&m, &idx, &[pair(&[])], 2), Err(RetrieverError::EmptyGroundTruth(_))));
        assert!(matches!(recall_at_k(&m, &idx, &[], 2), Err(RetrieverError::NoEvaluationPairs)));
    }

    #[test]
    fn recall_ties_broken_by_key() {
        let (m, idx) = fixed_index(&[("b", [0.0, 1.0]), ("a", [0.0, 1.0]), ("c", [0.0, 1.0])]);
        assert_eq!(recall_at_k(&m, &idx, &[pair(&["a"])], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&m, &idx, &[pair(&["c"])], 2).unwrap(), 0.0);
    }

    #[test]
    fn average_recall_examples() {
        let (m, _) = fixed_index(&[]);
        let corpus = Corpus::from_files(vec![file("A", &[], &["x", "y"])]).unwrap();
        // m embeds everything to [1,0], so both premises tie and "x" ranks first
        let task = |gt: &[&str]| EvaluationTask { name: "t".into(), corpus: corpus.clone(), test_pairs: vec![pair(gt)] };
        let t_full = task(&["x"]);
        let t_half = task(&["x", "y"]);
        assert_eq!(average_test_recall(&m, std::slice::from_ref(&t_full), 1).unwrap(), 1.0);
        assert_eq!(average_test_recall(&m, &[t_full, t_half.clone()], 1).unwrap(), 0.75);
        assert_eq!(average_test_recall(&m, &[task(&["y"]), task(&["y"]), task(&["y"])], 1).unwrap(), 0.0);
        assert!(matches!(average_test_recall(&m, &[], 1), Err(RetrieverError::NoDatasets)));
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(1.0, 0, 4, 10), 0.25);
        assert_eq!(learning_rate(1.0, 3, 4, 10), 1.0);
        assert_eq!(learning_rate(1.0, 4, 4, 10), 1.0);
        assert!(learning_rate(1.0, 9, 4, 10) < 0.1);
        assert_eq!(learning_rate(2.0, 0, 0, 1), 2.0);
    }

    fn small_split() -> DatasetSplit {
        let corpus_names = ["a0", "a1", "a2", "b0", "c0", "c1"];
        let mk = |i: usize| thm(&format!("t{i}"), vec![tactic(&[corpus_names[i % 6]], &format!("goal {}", corpus_names[i % 6]))]);
        DatasetSplit { train: (0..12).map(mk).collect(), val: vec![mk(1), mk(4)], test: vec![mk(2)] }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let corpus = toy_corpus();
        let ck = Checkpoint::fresh(EmbeddingModel::random(4, 32, 5).unwrap());
        let cfg = TrainConfig { lr: 0.0, batch_size: 4, ..Default::default() };
        let (out, log) = train_one_epoch(&ck, &small_split(), &corpus, "r", &cfg).unwrap();
        assert_eq!(out.model, ck.model);
        assert_eq!(out.history, ["r"]);
        assert_eq!(log.steps, 3);
        assert_eq!(log.evaluations.len(), 3);
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_is_best() {
        let corpus = toy_corpus();
        let ck = Checkpoint::fresh(EmbeddingModel::random(4, 32, 5).unwrap());
        let cfg = TrainConfig { lr: 0.5, batch_size: 2, eval_every: Some(2), seed: 11, ..Default::default() };
        let split = small_split();
        let (a, log) = train_one_epoch(&ck, &split, &corpus, "r", &cfg).unwrap();
        let (b, _) = train_one_epoch(&ck, &split, &corpus, "r", &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |c: &Checkpoint| c.model.theta().iter().map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let last = log.evaluations.last().unwrap().1;
        assert!(a.best_val_r10 >= last);
        let recomputed = validation_recall(&a.model, &corpus, &eval_pairs(&split.val), 10).unwrap();
        assert_eq!(recomputed, a.best_val_r10);
    }

    #[test]
    fn checkpoint_and_index_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::fresh(EmbeddingModel::random(3, 16, 8).unwrap());
        ck.fisher = Some(vec![0.125; ck.model.theta().len()]);
        ck.anchor = Some(ck.model.theta().to_vec());
        ck.history.push("r1".into());
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let idx = precompute_embeddings(&ck.model, &toy_corpus());
        let ipath = dir.path().join("index.json");
        idx.save(&ipath).unwrap();
        assert_eq!(EmbeddingIndex::load(&ipath).unwrap(), idx);
        fs::write(&path, "{\"format\": 1}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(RetrieverError::Corrupt { .. })));
    }

    fn random_examples(seed: u64) -> Vec<TrainingExample> {
        let corpus = toy_corpus();
        let ts = vec![thm("t", vec![tactic(&["a1"], "x + y = y + x"), tactic(&["c0", "b0"], "n < n + 1")])];
        mine_training_examples(&ts, &corpus, seed).unwrap()
    }

    // Central differences, step 1e-5; relative error of the full gradient vector.
    fn fd_check(model: &EmbeddingModel, ex: &[TrainingExample], ewc: Option<&EwcTerm>) -> f64 {
        let (_, analytic) = objective_and_gradient(model, ex, ewc).unwrap();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..model.theta().len())
            .map(|i| {
                let mut plus = model.clone();
                let mut t = model.theta().to_vec();
                t[i] += h;
                plus.set_theta(t.clone()).unwrap();
                let mut minus = model.clone();
                t[i] -= 2.0 * h;
                minus.set_theta(t).unwrap();
                (objective(&plus, ex, ewc).unwrap() - objective(&minus, ex, ewc).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        diff / norm(&analytic).max(norm(&numeric)).max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>(), lambda in 0.0f64..2.0) {
            // 2 x (3 + 1) = 8 parameters
            let model = EmbeddingModel::random(2, 3, seed).unwrap();
            let ex = random_examples(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = model.theta().len();
            let ewc = EwcTerm {
                lambda,
                fisher: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
                anchor: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            prop_assert!(fd_check(&model, &ex, Some(&ewc)) < 1e-4);
            prop_assert!(fd_check(&model, &ex, None) < 1e-4);
        }
    }

    #[test]
    fn single_step_decreases_loss_as_predicted() {
        // one example, one step; the step is checked against an independent
        // finite-difference gradient of the loss
        let corpus = toy_corpus();
        let split = DatasetSplit {
            train: vec![thm("t", vec![tactic(&["a1"], "x + y = y + x")])],
            val: vec![thm("v", vec![tactic(&["a1"], "x + y = y + x")])],
            test: vec![],
        };
        let model = EmbeddingModel::random(2, 3, 42).unwrap();
        let ex = mine_training_examples(&split.train, &corpus, 1).unwrap();
        assert_eq!(ex.len(), 1);
        let before = objective(&model, &ex, None).unwrap();
        let h = 1e-6;
        let g_fd: Vec<f64> = (0..model.theta().len())
            .map(|i| {
                let mut t = model.theta().to_vec();
                t[i] += h;
                let mut p = model.clone();
                p.set_theta(t.clone()).unwrap();
                t[i] -= 2.0 * h;
                let mut m = model.clone();
                m.set_theta(t).unwrap();
                (objective(&p, &ex, None).unwrap() - objective(&m, &ex, None).unwrap()) / (2.0 * h)
            })
            .collect();
        let lr = 1e-3;
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, lr, batch_size: 1, clip: 1e9, seed: 1, ..Default::default() };
        let (after_ck, log) = train_one_epoch(&Checkpoint::fresh(model.clone()), &split, &corpus, "r", &cfg).unwrap();
        assert_eq!(log.steps, 1);
        let after = objective(&after_ck.model, &ex, None).unwrap();
        assert!(after < before);
        let expected_theta: Vec<f64> = model.theta().iter().zip(&g_fd).map(|(t, g)| t - lr * g).collect();
        let max_dev = after_ck.model.theta().iter().zip(&expected_theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_dev < 1e-8, "{max_dev}");
        let predicted = before - lr * g_fd.iter().map(|g| g * g).sum::<f64>();
        assert!((after - predicted).abs() < 1e-5);
    }
}
