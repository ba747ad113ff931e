//! Theorem difficulty, percentile buckets, and repository ordering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Theorem, TheoremKey, TheoremStatus};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CurriculumError {
    #[error("no finite difficulties to take percentiles over")]
    EmptyInput,
    #[error("difficulty {0} is not a finite non-negative value")]
    NonFinite(f64),
    #[error("finite difficulty present but no thresholds were computed")]
    MissingThresholds,
}

/// Difficulty of a theorem: `e^S` for `S` traced proof steps, infinite for
/// unproven sorries, and unstepped for proofs without a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Difficulty {
    Finite { value: f64, steps: u32 },
    Infinite,
    Unstepped,
}

impl Difficulty {
    pub fn finite_value(&self) -> Option<f64> {
        match self {
            Difficulty::Finite { value, .. } => Some(*value),
            _ => None,
        }
    }
}

pub fn compute_difficulty(theorem: &Theorem) -> Difficulty {
    if theorem.status == TheoremStatus::SorryUnproven {
        return Difficulty::Infinite;
    }
    match theorem.traced_tactics.len() {
        0 => Difficulty::Unstepped,
        s => Difficulty::Finite { value: (s as f64).exp(), steps: s as u32 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub p33: f64,
    pub p67: f64,
}

/// Linear-interpolation quantile at rank `(n - 1) * q` over sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn compute_thresholds(finite_difficulties: &[f64]) -> Result<Thresholds, CurriculumError> {
    if finite_difficulties.is_empty() {
        return Err(CurriculumError::EmptyInput);
    }
    if let Some(&bad) = finite_difficulties.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(CurriculumError::NonFinite(bad));
    }
    let mut sorted = finite_difficulties.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Thresholds { p33: quantile(&sorted, 0.33), p67: quantile(&sorted, 0.67) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Easy,
    Medium,
    Hard,
    Unproven,
}

/// Buckets theorems by difficulty. Boundary values go to the easier bucket.
/// Unstepped theorems are dealt Easy, Medium, Hard in turn, in key order.
pub fn categorize_theorems(
    items: &[(TheoremKey, Difficulty)],
    thresholds: Option<&Thresholds>,
) -> Result<Vec<Category>, CurriculumError> {
    let mut out = vec![Category::Unproven; items.len()];
    let mut unstepped = Vec::new();
    for (i, (key, d)) in items.iter().enumerate() {
        out[i] = match *d {
            Difficulty::Finite { value, .. } => {
                let t = thresholds.ok_or(CurriculumError::MissingThresholds)?;
                if value <= t.p33 {
                    Category::Easy
                } else if value <= t.p67 {
                    Category::Medium
                } else {
                    Category::Hard
                }
            }
            Difficulty::Infinite => Category::Unproven,
            Difficulty::Unstepped => {
                unstepped.push((key, i));
                continue;
            }
        };
    }
    unstepped.sort();
    const CYCLE: [Category; 3] = [Category::Easy, Category::Medium, Category::Hard];
    for (n, (_, i)) in unstepped.into_iter().enumerate() {
        out[i] = CYCLE[n % 3];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub easy: usize,
    pub medium: usize,
    pub hard: usize,
    pub unproven: usize,
}

impl CategoryCounts {
    pub fn tally(categories: &[Category]) -> Self {
        let mut c = CategoryCounts::default();
        for cat in categories {
            match cat {
                Category::Easy => c.easy += 1,
                Category::Medium => c.medium += 1,
                Category::Hard => c.hard += 1,
                Category::Unproven => c.unproven += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.easy + self.medium + self.hard + self.unproven
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub repo_id: String,
    pub counts: CategoryCounts,
}

/// Descending by easy count, ties by ascending repo id.
pub fn order_repositories(repos: &[(String, CategoryCounts)]) -> Vec<RepoEntry> {
    let mut entries: Vec<RepoEntry> = repos
        .iter()
        .map(|(id, counts)| RepoEntry { repo_id: id.clone(), counts: *counts })
        .collect();
    entries.sort_by(|a, b| b.counts.easy.cmp(&a.counts.easy).then_with(|| a.repo_id.cmp(&b.repo_id)));
    entries
}

/// JSON-serializable curriculum: thresholds pooled over every repository,
/// per-repository category counts, and the learning order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub thresholds: Option<Thresholds>,
    pub order: Vec<RepoEntry>,
    pub categories: BTreeMap<String, BTreeMap<String, Category>>,
}

impl CurriculumReport {
    pub fn repo_ids(&self) -> Vec<String> {
        self.order.iter().map(|e| e.repo_id.clone()).collect()
    }
}

/// Pools difficulties across all repositories, buckets every theorem, and
/// orders the repositories. Per-theorem categories are keyed by
/// `file_path::full_name`.
pub fn build_curriculum(
    repos: &[(String, Vec<(TheoremKey, Difficulty)>)],
) -> Result<CurriculumReport, CurriculumError> {
    let pooled: Vec<f64> =
        repos.iter().flat_map(|(_, ds)| ds.iter().filter_map(|(_, d)| d.finite_value())).collect();
    let thresholds = if pooled.is_empty() { None } else { Some(compute_thresholds(&pooled)?) };
    let mut counts = Vec::with_capacity(repos.len());
    let mut categories = BTreeMap::new();
    for (id, items) in repos {
        let cats = categorize_theorems(items, thresholds.as_ref())?;
        counts.push((id.clone(), CategoryCounts::tally(&cats)));
        let per_theorem =
            items.iter().zip(&cats).map(|((k, _), c)| (k.to_string(), *c)).collect();
        categories.insert(id.clone(), per_theorem);
    }
    Ok(CurriculumReport { thresholds, order: order_repositories(&counts), categories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::theorem;
    use proptest::prelude::*;

    fn key(name: &str) -> TheoremKey {
        TheoremKey { file_path: "F".into(), full_name: name.into(), statement: "s".into() }
    }

    // Independent oracle: hand-rolled rank/interpolate over an explicit sort.
    fn oracle_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = (v.len() as f64 - 1.0) * q;
        let below = rank as usize;
        if below + 1 >= v.len() {
            return v[below];
        }
        let frac = rank - below as f64;
        v[below] * (1.0 - frac) + v[below + 1] * frac
    }

    #[test]
    fn difficulty_cases() {
        let d = compute_difficulty(&theorem("t", 2));
        assert_eq!(d, Difficulty::Finite { value: 2f64.exp(), steps: 2 });
        assert!((d.finite_value().unwrap() - 7.389056).abs() < 1e-6);
        let mut sorry = theorem("s", 0);
        sorry.status = TheoremStatus::SorryUnproven;
        assert_eq!(compute_difficulty(&sorry), Difficulty::Infinite);
        assert_eq!(compute_difficulty(&theorem("u", 0)), Difficulty::Unstepped);
    }

    #[test]
    fn thresholds_exp_one_to_ten() {
        let values: Vec<f64> = (1..=10).map(|s| (s as f64).exp()).collect();
        let t = compute_thresholds(&values).unwrap();
        let (o33, o67) = (oracle_quantile(&values, 0.33), oracle_quantile(&values, 0.67));
        // frozen from the oracle: h = 2.97 and 6.03
        assert!((o33 - 53.5628).abs() < 1e-4, "{o33}");
        assert!((o67 - 1153.16).abs() < 1e-2, "{o67}");
        assert!((t.p33 - o33).abs() < 1e-9);
        assert!((t.p67 - o67).abs() < 1e-9);
    }

    #[test]
    fn thresholds_degenerate_and_empty() {
        assert_eq!(compute_thresholds(&[4.0]).unwrap(), Thresholds { p33: 4.0, p67: 4.0 });
        assert_eq!(compute_thresholds(&[]).unwrap_err(), CurriculumError::EmptyInput);
        assert!(compute_thresholds(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn categorize_examples() {
        let t = Thresholds { p33: 5.0, p67: 10.0 };
        let items = vec![
            (key("a"), Difficulty::Finite { value: 2.0, steps: 1 }),
            (key("b"), Difficulty::Finite { value: 5.0, steps: 1 }),
            (key("c"), Difficulty::Finite { value: 10.0, steps: 1 }),
            (key("d"), Difficulty::Finite { value: 10.5, steps: 1 }),
            (key("e"), Difficulty::Infinite),
        ];
        let cats = categorize_theorems(&items, Some(&t)).unwrap();
        use Category::*;
        assert_eq!(cats, [Easy, Easy, Medium, Hard, Unproven]);
    }

    #[test]
    fn unstepped_round_robin_in_key_order() {
        let items: Vec<_> =
            ["d", "b", "a", "c"].iter().map(|n| (key(n), Difficulty::Unstepped)).collect();
        let cats = categorize_theorems(&items, None).unwrap();
        use Category::*;
        // key order a, b, c, d -> Easy, Medium, Hard, Easy
        assert_eq!(cats, [Easy, Medium, Easy, Hard]);
    }

    #[test]
    fn finite_without_thresholds_is_an_error() {
        let items = vec![(key("a"), Difficulty::Finite { value: 1.0, steps: 1 })];
        assert_eq!(categorize_theorems(&items, None).unwrap_err(), CurriculumError::MissingThresholds);
    }

    fn counts(easy: usize) -> CategoryCounts {
        CategoryCounts { easy, ..Default::default() }
    }

    #[test]
    fn ordering_examples() {
        let ids = |v: Vec<RepoEntry>| v.into_iter().map(|e| e.repo_id).collect::<Vec<_>>();
        assert_eq!(ids(order_repositories(&[("A".into(), counts(5)), ("B".into(), counts(9))])), ["B", "A"]);
        assert_eq!(
            ids(order_repositories(&[
                ("C".into(), counts(9)),
                ("A".into(), counts(5)),
                ("B".into(), counts(9))
            ])),
            ["B", "C", "A"]
        );
        assert!(order_repositories(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn difficulty_monotone(s1 in 1usize..40, s2 in 1usize..40) {
            prop_assume!(s1 < s2);
            let d1 = compute_difficulty(&theorem("a", s1)).finite_value().unwrap();
            let d2 = compute_difficulty(&theorem("b", s2)).finite_value().unwrap();
            prop_assert!(d1 < d2);
        }

        #[test]
        fn categories_partition_and_balance(m in 1usize..40, seed in any::<u64>()) {
            // 3m distinct values in a shuffled order
            let n = 3 * m;
            let mut values: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.5).collect();
            let mut s = seed | 1;
            for i in (1..n).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                values.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let items: Vec<_> = values.iter().enumerate()
                .map(|(i, v)| (key(&format!("t{i}")), Difficulty::Finite { value: *v, steps: 1 }))
                .collect();
            let t = compute_thresholds(&values).unwrap();
            let cats = categorize_theorems(&items, Some(&t)).unwrap();
            let c = CategoryCounts::tally(&cats);
            prop_assert_eq!(c.total(), n);
            let sizes = [c.easy, c.medium, c.hard];
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{:?}", sizes);
        }

        #[test]
        fn ordering_is_a_sorted_permutation(easies in proptest::collection::vec(0usize..5, 0..12)) {
            let input: Vec<(String, CategoryCounts)> =
                easies.iter().enumerate().map(|(i, e)| (format!("r{i:02}"), counts(*e))).collect();
            let out = order_repositories(&input);
            let mut a: Vec<_> = out.iter().map(|e| e.repo_id.clone()).collect();
            a.sort();
            let mut b: Vec<_> = input.iter().map(|(id, _)| id.clone()).collect();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(out.windows(2).all(|w| w[0].counts.easy >= w[1].counts.easy));
            prop_assert_eq!(out, order_repositories(&input));
        }
    }
}
