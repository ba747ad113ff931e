//! Lifelong-learning metrics over a lower-triangular performance matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 5;

/// Composite weights in (wf5, fm, cfr, ebwt, wp5, ip) order.
pub const WEIGHTS: [f64; 6] = [0.2, 0.2, 0.2, 0.2, 0.1, 0.1];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no input")]
    EmptyInput,
    #[error("window must be at least 2, got {0}")]
    InvalidWindow(usize),
    #[error("need at least {needed} tasks, got {got}")]
    TooFewTasks { needed: usize, got: usize },
    #[error("curve maximum is zero")]
    DegenerateCurve,
    #[error("row {row} has {got} entries, expected {expected}")]
    IncompleteMatrix { row: usize, expected: usize, got: usize },
    #[error("R[{after}][{eval}] = {value} is outside [0, 100]")]
    OutOfRange { after: usize, eval: usize, value: f64 },
    #[error("validation series has {got} entries for {tasks} tasks")]
    ValidationLength { tasks: usize, got: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid TPPS input: {0}")]
    InvalidTpps(String),
}

/// `rows[j][i]` is test R@10 (percent) after task j+1 on task i+1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    rows: Vec<Vec<f64>>,
    validation: Vec<f64>,
}

impl PerformanceMatrix {
    pub fn new(rows: Vec<Vec<f64>>, validation: Vec<f64>) -> Result<Self, MetricError> {
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(MetricError::IncompleteMatrix { row: j + 1, expected: j + 1, got: row.len() });
            }
            for (i, &v) in row.iter().enumerate() {
                if !(0.0..=100.0).contains(&v) {
                    return Err(MetricError::OutOfRange { after: j + 1, eval: i + 1, value: v });
                }
            }
        }
        if !validation.is_empty() && validation.len() != rows.len() {
            return Err(MetricError::ValidationLength { tasks: rows.len(), got: validation.len() });
        }
        Ok(PerformanceMatrix { rows, validation })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn validation(&self) -> &[f64] {
        &self.validation
    }

    /// 1-based accessor.
    pub fn get(&self, after: usize, eval: usize) -> f64 {
        self.rows[after - 1][eval - 1]
    }

    pub fn scaled(&self, c: f64) -> Result<Self, MetricError> {
        let rows = self.rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        PerformanceMatrix::new(rows, self.validation.iter().map(|v| v * c).collect())
    }

    /// Parses `after_task,eval_task,r10` rows and an optional `task,val_r10`
    /// series. Tasks are 1-based.
    pub fn from_csv(matrix_csv: &str, validation_csv: Option<&str>) -> Result<Self, MetricError> {
        let csv_err = |e: csv::Error| MetricError::Csv(e.to_string());
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(matrix_csv.as_bytes());
        for rec in reader.deserialize::<MatrixRow>() {
            let r = rec.map_err(csv_err)?;
            if r.after_task == 0 || r.eval_task == 0 || r.eval_task > r.after_task {
                return Err(MetricError::Csv(format!("cell ({}, {}) is not lower-triangular", r.after_task, r.eval_task)));
            }
            if cells.insert((r.after_task, r.eval_task), r.r10).is_some() {
                return Err(MetricError::Csv(format!("duplicate cell ({}, {})", r.after_task, r.eval_task)));
            }
        }
        let tasks = cells.keys().map(|k| k.0).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(tasks);
        for j in 1..=tasks {
            let row: Vec<f64> = (1..=j).filter_map(|i| cells.get(&(j, i)).copied()).collect();
            if row.len() != j {
                return Err(MetricError::IncompleteMatrix { row: j, expected: j, got: row.len() });
            }
            rows.push(row);
        }
        let mut validation = Vec::new();
        if let Some(text) = validation_csv {
            let mut series: BTreeMap<usize, f64> = BTreeMap::new();
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
            for rec in reader.deserialize::<ValidationRow>() {
                let r = rec.map_err(csv_err)?;
                if series.insert(r.task, r.val_r10).is_some() {
                    return Err(MetricError::Csv(format!("duplicate task {}", r.task)));
                }
            }
            if series.keys().copied().ne(1..=series.len()) {
                return Err(MetricError::Csv("validation tasks must be 1..T".into()));
            }
            validation = series.into_values().collect();
        }
        PerformanceMatrix::new(rows, validation)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task,eval_task,r10\n");
        for (j, row) in self.rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", j + 1, i + 1, v));
            }
        }
        out
    }

    pub fn validation_csv(&self) -> String {
        let mut out = String::from("task,val_r10\n");
        for (k, v) in self.validation.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, v));
        }
        out
    }
}

#[derive(Deserialize)]
struct MatrixRow {
    after_task: usize,
    eval_task: usize,
    r10: f64,
}

#[derive(Deserialize)]
struct ValidationRow {
    task: usize,
    val_r10: f64,
}

/// a_k: mean of row k.
pub fn average_test_curve(r: &PerformanceMatrix) -> Vec<f64> {
    r.rows.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
}

fn window(a: &[f64], k: usize, w: usize) -> &[f64] {
    &a[(k + 1).saturating_sub(w)..=k]
}

fn check_curve(a: &[f64], w: usize) -> Result<(), MetricError> {
    if w < 2 {
        return Err(MetricError::InvalidWindow(w));
    }
    if a.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

/// Mean over k of the largest drop from a window peak to a_k.
pub fn windowed_forgetting(a: &[f64], w: usize) -> Result<f64, MetricError> {
    check_curve(a, w)?;
    let total: f64 = (0..a.len())
        .map(|k| {
            let peak = window(a, k, w).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (peak - a[k]).max(0.0)
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Max over k of the largest rise from a window trough to a_k.
pub fn windowed_plasticity(a: &[f64], w: usize) -> Result<f64, MetricError> {
    check_curve(a, w)?;
    Ok((0..a.len())
        .map(|k| {
            let trough = window(a, k, w).iter().copied().fold(f64::INFINITY, f64::min);
            (a[k] - trough).max(0.0)
        })
        .fold(0.0, f64::max))
}

fn need_tasks(t: usize) -> Result<(), MetricError> {
    if t < 2 {
        return Err(MetricError::TooFewTasks { needed: 2, got: t });
    }
    Ok(())
}

/// Average over old tasks of best-before-final minus final. Unclamped.
pub fn forgetting_measure(r: &PerformanceMatrix) -> Result<f64, MetricError> {
    let t = r.tasks();
    need_tasks(t)?;
    let total: f64 = (1..t)
        .map(|i| {
            let best = (i..t).map(|j| r.get(j, i)).fold(f64::NEG_INFINITY, f64::max);
            best - r.get(t, i)
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

pub fn cfr(a: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = a.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Err(MetricError::DegenerateCurve);
    }
    Ok(min / max)
}

pub fn expanded_bwt(r: &PerformanceMatrix) -> Result<f64, MetricError> {
    let t = r.tasks();
    need_tasks(t)?;
    let total: f64 = (2..=t)
        .map(|k| (1..k).map(|i| r.get(k, i) - r.get(i, i)).sum::<f64>() / (k - 1) as f64)
        .sum();
    Ok(total / (t - 1) as f64)
}

pub fn incremental_plasticity(v: &[f64]) -> Result<f64, MetricError> {
    need_tasks(v.len())?;
    let total: f64 = (1..v.len()).map(|k| (v[k] - v[0]) / k as f64).sum();
    Ok(total / (v.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub wf5: f64,
    pub fm: f64,
    pub cfr: f64,
    pub ebwt: f64,
    pub wp5: f64,
    pub ip: f64,
}

impl MetricValues {
    pub fn to_array(self) -> [f64; 6] {
        [self.wf5, self.fm, self.cfr, self.ebwt, self.wp5, self.ip]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        MetricValues { wf5: v[0], fm: v[1], cfr: v[2], ebwt: v[3], wp5: v[4], ip: v[5] }
    }
}

/// All six metrics for one run. The windowed pair uses window `w`.
pub fn compute_metrics(r: &PerformanceMatrix, w: usize) -> Result<MetricValues, MetricError> {
    let a = average_test_curve(r);
    Ok(MetricValues {
        wf5: windowed_forgetting(&a, w)?,
        fm: forgetting_measure(r)?,
        cfr: cfr(&a)?,
        ebwt: expanded_bwt(r)?,
        wp5: windowed_plasticity(&a, w)?,
        ip: incremental_plasticity(r.validation())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupScore {
    pub raw: MetricValues,
    pub normalized: MetricValues,
    pub composite: f64,
}

/// Min-max normalizes each metric across setups and applies the weights.
/// A metric with no spread normalizes to 0.5.
pub fn composite_score(setups: &BTreeMap<String, MetricValues>) -> Result<BTreeMap<String, SetupScore>, MetricError> {
    if setups.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut lo = [f64::INFINITY; 6];
    let mut hi = [f64::NEG_INFINITY; 6];
    for m in setups.values() {
        for (i, v) in m.to_array().into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    Ok(setups
        .iter()
        .map(|(name, m)| {
            let mut n = [0.0; 6];
            for (i, v) in m.to_array().into_iter().enumerate() {
                n[i] = if hi[i] > lo[i] { (v - lo[i]) / (hi[i] - lo[i]) } else { 0.5 };
            }
            let composite = WEIGHTS[0] * (1.0 - n[0])
                + WEIGHTS[1] * (1.0 - n[1])
                + WEIGHTS[2] * n[2]
                + WEIGHTS[3] * n[3]
                + WEIGHTS[4] * n[4]
                + WEIGHTS[5] * n[5];
            (name.clone(), SetupScore { raw: *m, normalized: MetricValues::from_array(n), composite })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tpps {
    pub agent: f64,
    pub baseline: f64,
    pub factor: f64,
}

/// Theorem-proving performance score: newly proved theorems count `x` times.
pub fn tpps(baseline_proved: u64, new_proved: u64, x: f64) -> Result<Tpps, MetricError> {
    if !(x.is_finite() && x > 0.0) {
        return Err(MetricError::InvalidTpps(format!("x = {x}")));
    }
    let agent = baseline_proved as f64 + new_proved as f64 * x + 1.0;
    let baseline = baseline_proved as f64 + 1.0;
    Ok(Tpps { agent, baseline, factor: agent / baseline })
}

/// Metrics for one run, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub window: usize,
    pub tasks: usize,
    pub average_test_r10: Vec<f64>,
    pub validation_r10: Vec<f64>,
    pub metrics: MetricValues,
    /// Present when several setups are compared.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub setups: BTreeMap<String, SetupScore>,
}

impl MetricReport {
    pub fn from_matrix(r: &PerformanceMatrix, w: usize) -> Result<Self, MetricError> {
        Ok(MetricReport {
            window: w,
            tasks: r.tasks(),
            average_test_r10: average_test_curve(r),
            validation_r10: r.validation().to_vec(),
            metrics: compute_metrics(r, w)?,
            setups: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        crate::database::canonical_json(self)
    }
}

/// True when no value in any trailing window exceeds the window's last value.
pub fn nondecreasing_in_windows(a: &[f64], w: usize) -> bool {
    (0..a.len()).all(|k| window(a, k, w).iter().all(|&x| x <= a[k]))
}
