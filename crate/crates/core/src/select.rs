//! ReliefF feature weighting, top-n selection and the holiday indicator.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::CalendarFrame;
use crate::error::{ensure_finite, Error, Result};
use crate::exec::Execution;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Discrete,
}

/// Column-major feature table with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
    columns: Vec<Vec<f64>>,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureTable {
    pub fn new(names: Vec<String>, kinds: Vec<FeatureKind>, columns: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if columns.is_empty() || labels.is_empty() {
            return Err(Error::Empty("feature table".into()));
        }
        if names.len() != columns.len() || kinds.len() != columns.len() {
            return Err(Error::shape("names, kinds and columns must have equal counts"));
        }
        let m = labels.len();
        let mut mins = Vec::with_capacity(columns.len());
        let mut maxs = Vec::with_capacity(columns.len());
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != m {
                return Err(Error::shape(format!("feature '{name}' has {} rows, expected {m}", col.len())));
            }
            ensure_finite(col, name)?;
            mins.push(col.iter().copied().fold(f64::INFINITY, f64::min));
            maxs.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(Self { names, kinds, columns, mins, maxs, labels })
    }

    /// All-continuous table with generated names `f0, f1, ...`.
    pub fn continuous(columns: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let names = (0..columns.len()).map(|i| format!("f{i}")).collect();
        let kinds = vec![FeatureKind::Continuous; columns.len()];
        Self::new(names, kinds, columns, labels)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, feature: usize) -> FeatureKind {
        self.kinds[feature]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn range(&self, feature: usize) -> (f64, f64) {
        (self.mins[feature], self.maxs[feature])
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.maxs[feature] == self.mins[feature]
    }
}

/// Normalized difference of one feature between two rows, in `[0, 1]`.
pub fn diff(feature: usize, r1: usize, r2: usize, table: &FeatureTable) -> f64 {
    let (a, b) = (table.value(r1, feature), table.value(r2, feature));
    match table.kind(feature) {
        FeatureKind::Discrete => {
            if a == b {
                0.0
            } else {
                1.0
            }
        }
        FeatureKind::Continuous => {
            if table.is_constant(feature) {
                0.0
            } else {
                (a - b).abs() / (table.maxs[feature] - table.mins[feature])
            }
        }
    }
}

/// Neighbor counts actually used for one class after clamping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNeighbors {
    pub members: usize,
    /// Hits drawn when a sampled row belongs to this class.
    pub hit_k: usize,
    /// Misses drawn from this class for rows of other classes.
    pub miss_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub weights: Vec<f64>,
    pub k: usize,
    pub m_samples: usize,
    pub per_class: BTreeMap<usize, ClassNeighbors>,
}

impl FeatureWeights {
    /// True when some class had too few members for the requested `k`.
    pub fn clamped(&self) -> bool {
        self.per_class.values().any(|c| c.hit_k < self.k || c.miss_k < self.k)
    }
}

fn sq_distance(table: &FeatureTable, r1: usize, r2: usize) -> f64 {
    (0..table.n_features()).map(|f| diff(f, r1, r2, table).powi(2)).sum()
}

/// The `k` rows of `class` nearest to `row` (excluding `row`), ordered by
/// distance then row index.
fn nearest_in_class(table: &FeatureTable, row: usize, members: &[usize], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &j in members {
        if j == row {
            continue;
        }
        let d = sq_distance(table, row, j);
        let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
        if pos < k {
            best.insert(pos, (d, j));
            best.truncate(k);
        }
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Sample visit order: a seeded permutation of the rows, cycled when more
/// samples than rows are requested.
pub fn relieff_sample_order(n_rows: usize, m_samples: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut seed::rng(seed::sub_seed(seed, seed::RELIEFF_SAMPLE)));
    (0..m_samples).map(|i| perm[i % n_rows]).collect()
}

/// ReliefF weights. Hit sums are divided by `m_samples · hit_k` and miss sums
/// by `m_samples · miss_k` of the respective class, each miss class scaled by
/// its prior over the complement of the sampled row's class prior.
pub fn relieff(table: &FeatureTable, k: usize, m_samples: usize, seed: u64, exec: Execution) -> Result<FeatureWeights> {
    if k < 1 {
        return Err(Error::param("relieff needs k >= 1"));
    }
    if m_samples < 1 {
        return Err(Error::param("relieff needs m_samples >= 1"));
    }
    let m = table.n_rows();
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in table.labels().iter().enumerate() {
        classes.entry(c).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(Error::param("relieff needs at least two classes"));
    }
    let per_class: BTreeMap<usize, ClassNeighbors> = classes
        .iter()
        .map(|(&c, rows)| {
            let n = rows.len();
            (c, ClassNeighbors { members: n, hit_k: k.min(n - 1), miss_k: k.min(n) })
        })
        .collect();
    let prior = |c: usize| classes[&c].len() as f64 / m as f64;
    let order = relieff_sample_order(m, m_samples, seed);
    let nf = table.n_features();

    // Per sample: summed hit diffs, then per other class its coefficient and summed miss diffs.
    type Contribution = (Vec<f64>, usize, Vec<(f64, usize, Vec<f64>)>);
    let contributions: Vec<Contribution> = exec.map(order.len(), |s| {
        let r = order[s];
        let own = table.labels()[r];
        let info = per_class[&own];
        let hits = nearest_in_class(table, r, &classes[&own], info.hit_k);
        let hit_sum: Vec<f64> = (0..nf).map(|f| hits.iter().map(|&h| diff(f, r, h, table)).sum()).collect();
        let denom = 1.0 - prior(own);
        let misses = classes
            .iter()
            .filter(|(&c, _)| c != own)
            .map(|(&c, rows)| {
                let mk = per_class[&c].miss_k;
                let near = nearest_in_class(table, r, rows, mk);
                let sum: Vec<f64> = (0..nf).map(|f| near.iter().map(|&j| diff(f, r, j, table)).sum()).collect();
                (prior(c) / denom, mk, sum)
            })
            .collect();
        (hit_sum, info.hit_k, misses)
    });

    let ms = m_samples as f64;
    let mut weights = vec![0.0; nf];
    for (hit_sum, hit_k, misses) in &contributions {
        for f in 0..nf {
            if *hit_k > 0 {
                weights[f] -= hit_sum[f] / (ms * *hit_k as f64);
            }
            for (coef, mk, sum) in misses {
                weights[f] += coef * sum[f] / (ms * *mk as f64);
            }
        }
    }
    Ok(FeatureWeights { weights, k, m_samples, per_class })
}

/// Indices of the `top_n` largest weights, descending, ties to the lower index.
pub fn select_features(weights: &FeatureWeights, top_n: usize) -> Result<Vec<usize>> {
    let f = weights.weights.len();
    if top_n < 1 || top_n > f {
        return Err(Error::param(format!("top_n must be in 1..={f}, got {top_n}")));
    }
    let mut idx: Vec<usize> = (0..f).collect();
    idx.sort_by(|&i, &j| weights.weights[j].total_cmp(&weights.weights[i]).then(i.cmp(&j)));
    idx.truncate(top_n);
    Ok(idx)
}

/// 1 for every step whose calendar date is a holiday, else 0.
pub fn holiday_indicator(calendar: &CalendarFrame, holidays: &BTreeSet<NaiveDate>) -> Vec<u8> {
    calendar.dates().map(|d| u8::from(holidays.contains(&d))).collect()
}

/// Quartile class (0..=3) of each value, using linearly interpolated
/// quartiles; a value equal to a cut point falls in the lower class.
pub fn quartile_labels(values: &[f64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Empty("quartile input".into()));
    }
    ensure_finite(values, "quartile input")?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let cuts = [q(0.25), q(0.5), q(0.75)];
    Ok(values.iter().map(|&v| cuts.iter().filter(|&&c| v > c).count()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn table(cols: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureTable {
        FeatureTable::continuous(cols, labels).unwrap()
    }

    /// Exhaustive reimplementation: every candidate distance is computed and
    /// the full list sorted before taking the k nearest.
    fn oracle(t: &FeatureTable, k: usize, m_samples: usize, seed: u64) -> Vec<f64> {
        let m = t.n_rows();
        let nf = t.n_features();
        let labels = t.labels();
        let class_ids: BTreeSet<usize> = labels.iter().copied().collect();
        let count = |c: usize| labels.iter().filter(|&&l| l == c).count();
        let dist = |a: usize, b: usize| -> f64 {
            let mut s = 0.0;
            for f in 0..nf {
                let d = diff(f, a, b, t);
                s += d * d;
            }
            s
        };
        let knn = |r: usize, c: usize, kk: usize| -> Vec<usize> {
            let mut all: Vec<(f64, usize)> =
                (0..m).filter(|&j| j != r && labels[j] == c).map(|j| (dist(r, j), j)).collect();
            all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            all.into_iter().take(kk).map(|p| p.1).collect()
        };
        let mut w = vec![0.0; nf];
        for r in relieff_sample_order(m, m_samples, seed) {
            let own = labels[r];
            let hk = k.min(count(own) - 1);
            let hits = knn(r, own, hk);
            let p_own = count(own) as f64 / m as f64;
            for f in 0..nf {
                if hk > 0 {
                    let mut s = 0.0;
                    for &h in &hits {
                        s += diff(f, r, h, t);
                    }
                    w[f] -= s / (m_samples as f64 * hk as f64);
                }
                for &c in class_ids.iter().filter(|&&c| c != own) {
                    let mk = k.min(count(c));
                    let mut s = 0.0;
                    for j in knn(r, c, mk) {
                        s += diff(f, r, j, t);
                    }
                    let coef = (count(c) as f64 / m as f64) / (1.0 - p_own);
                    w[f] += coef * s / (m_samples as f64 * mk as f64);
                }
            }
        }
        w
    }

    fn random_table(seed: u64, rows: usize, nf: usize, n_classes: usize) -> FeatureTable {
        let mut rng = seed::rng(seed);
        let cols = (0..nf).map(|_| (0..rows).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let labels = (0..rows).map(|i| i % n_classes).collect();
        table(cols, labels)
    }

    fn discriminative_table(seed: u64, rows: usize) -> FeatureTable {
        let mut rng = seed::rng(seed);
        let labels: Vec<usize> = (0..rows).map(|i| i % 2).collect();
        let mut cols = vec![labels.iter().map(|&c| c as f64 + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect()];
        for _ in 0..4 {
            cols.push((0..rows).map(|_| rng.sample(StandardNormal)).collect());
        }
        table(cols, labels)
    }

    #[test]
    fn diff_examples() {
        let t = FeatureTable::new(
            vec!["c".into(), "d".into(), "k".into()],
            vec![FeatureKind::Continuous, FeatureKind::Discrete, FeatureKind::Continuous],
            vec![vec![0.0, 3.0, 7.0, 10.0], vec![1.0, 1.0, 2.0, 1.0], vec![5.0; 4]],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert!((diff(0, 1, 2, &t) - 0.4).abs() < 1e-15);
        assert_eq!(diff(1, 0, 1, &t), 0.0);
        assert_eq!(diff(1, 0, 2, &t), 1.0);
        assert_eq!(diff(2, 0, 3, &t), 0.0);
    }

    #[test]
    fn matches_exhaustive_oracle_exactly() {
        for s in 0..12u64 {
            let rows = 20 + (s as usize * 3) % 31;
            let t = random_table(s, rows, 4, 2 + (s as usize % 3));
            for (k, m_samples) in [(1, rows), (3, rows / 2), (5, rows + 7), (70, rows)] {
                let got = relieff(&t, k, m_samples, s, Execution::Parallel).unwrap();
                assert_eq!(got.weights, oracle(&t, k, m_samples, s), "seed {s} k {k}");
            }
        }
    }

    #[test]
    fn discriminative_feature_ranks_first() {
        let t = discriminative_table(7, 200);
        let w = relieff(&t, 5, 200, 7, Execution::Parallel).unwrap();
        assert_eq!(select_features(&w, 1).unwrap(), vec![0]);
        assert!(w.weights[1..].iter().all(|&x| x < w.weights[0]));
    }

    #[test]
    fn constant_feature_has_zero_weight() {
        let mut t = discriminative_table(3, 60);
        t.columns[2] = vec![1.5; 60];
        t.mins[2] = 1.5;
        t.maxs[2] = 1.5;
        let w = relieff(&t, 5, 60, 3, Execution::Sequential).unwrap();
        assert_eq!(w.weights[2], 0.0);
    }

    #[test]
    fn clamping_is_reported() {
        let t = random_table(1, 30, 3, 2);
        let w = relieff(&t, 70, 30, 1, Execution::Sequential).unwrap();
        assert!(w.clamped());
        assert_eq!(w.per_class[&0], ClassNeighbors { members: 15, hit_k: 14, miss_k: 15 });
        let w = relieff(&t, 3, 30, 1, Execution::Sequential).unwrap();
        assert!(!w.clamped());
    }

    #[test]
    fn execution_modes_agree() {
        let t = random_table(9, 80, 5, 3);
        let a = relieff(&t, 10, 80, 4, Execution::Sequential).unwrap();
        let b = relieff(&t, 10, 80, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        let t = random_table(1, 10, 2, 1);
        assert!(relieff(&t, 3, 10, 0, Execution::Sequential).is_err());
        let t = random_table(1, 10, 2, 2);
        assert!(relieff(&t, 0, 10, 0, Execution::Sequential).is_err());
        assert!(relieff(&t, 1, 0, 0, Execution::Sequential).is_err());
        assert!(FeatureTable::continuous(vec![], vec![]).is_err());
        assert!(FeatureTable::continuous(vec![vec![1.0, f64::NAN]], vec![0, 1]).is_err());
    }

    #[test]
    fn selection_examples() {
        let fw = |w: Vec<f64>| FeatureWeights { weights: w, k: 1, m_samples: 1, per_class: BTreeMap::new() };
        assert_eq!(select_features(&fw(vec![0.5, 0.1, 0.9]), 2).unwrap(), vec![2, 0]);
        assert_eq!(select_features(&fw(vec![0.5, 0.1, 0.9]), 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(select_features(&fw(vec![0.3, 0.3]), 1).unwrap(), vec![0]);
        assert!(select_features(&fw(vec![0.3, 0.3]), 0).is_err());
        assert!(select_features(&fw(vec![0.3, 0.3]), 3).is_err());
    }

    #[test]
    fn holiday_examples() {
        let start = NaiveDate::from_ymd_opt(2023, 1, 20).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let cal = CalendarFrame::hourly(start, 24 * 10).unwrap();
        let holidays: BTreeSet<NaiveDate> =
            (22..=26).map(|d| NaiveDate::from_ymd_opt(2023, 1, d).unwrap()).collect();
        let flags = holiday_indicator(&cal, &holidays);
        assert!(flags[48..72].iter().all(|&f| f == 1));
        assert!(flags[..48].iter().all(|&f| f == 0));
        assert!(flags[7 * 24..].iter().all(|&f| f == 0));
        assert_eq!(flags.iter().map(|&f| f as usize).sum::<usize>(), 5 * 24);
        assert!(holiday_indicator(&cal, &BTreeSet::new()).iter().all(|&f| f == 0));
    }

    #[test]
    fn quartile_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quartile_labels(&v).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(quartile_labels(&[2.0; 5]).unwrap(), vec![0; 5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn weights_bounded_and_scale_invariant(seed in 0u64..1000, rows in 8usize..40, classes in 2usize..4, scale in 0.01f64..100.0) {
            let t = random_table(seed, rows, 3, classes);
            let w = relieff(&t, 4, rows, seed, Execution::Sequential).unwrap();
            prop_assert!(w.weights.iter().all(|x| (-1.0..=1.0).contains(x)));
            let mut cols = t.columns.clone();
            cols[1].iter_mut().for_each(|v| *v *= scale);
            let scaled = relieff(&table(cols, t.labels.clone()), 4, rows, seed, Execution::Sequential).unwrap();
            for (a, b) in w.weights.iter().zip(&scaled.weights) {
                prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            }
        }
    }
}
