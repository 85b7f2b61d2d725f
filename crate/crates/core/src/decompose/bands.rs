//! High/mid/low band recombination by one-dimensional 3-means over component
//! complexity.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Mid => "mid",
            Band::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    pub high: Vec<f64>,
    pub mid: Vec<f64>,
    pub low: Vec<f64>,
    /// Band of each input component, by component index.
    pub membership: Vec<Band>,
}

impl BandSet {
    pub fn band(&self, band: Band) -> &[f64] {
        match band {
            Band::Low => &self.low,
            Band::Mid => &self.mid,
            Band::High => &self.high,
        }
    }

    /// `high + mid + low` element-wise.
    pub fn total(&self) -> Vec<f64> {
        self.high.iter().zip(&self.mid).zip(&self.low).map(|((h, m), l)| h + m + l).collect()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Lloyd iterations for k = 3 in one dimension, initialized at the minimum,
/// median and maximum. Distance ties go to the lower cluster; an emptied
/// cluster keeps its previous centroid. Returns the cluster of each value and
/// the centroids.
pub fn kmeans3(values: &[f64]) -> (Vec<usize>, [f64; 3]) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centroids = [sorted[0], median(&sorted), sorted[sorted.len() - 1]];
    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..100 {
        let next: Vec<usize> = values
            .iter()
            .map(|&v| {
                let mut best = 0;
                for c in 1..3 {
                    if (v - centroids[c]).abs() < (v - centroids[best]).abs() {
                        best = c;
                    }
                }
                best
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<f64> = values.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(&v, _)| v).collect();
            if !members.is_empty() {
                *centroid = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
    }
    (assign, centroids)
}

/// Groups components into three bands by complexity; the cluster with the
/// highest centroid becomes the high band, the lowest the low band. Band
/// series are element-wise sums in component order.
pub fn band_recombine(components: &[Vec<f64>], complexity: &[f64]) -> Result<BandSet> {
    if components.len() < 3 {
        return Err(Error::param(format!(
            "band recombination needs at least 3 components, got {}",
            components.len()
        )));
    }
    if complexity.len() != components.len() {
        return Err(Error::shape(format!(
            "{} complexity scores for {} components",
            complexity.len(),
            components.len()
        )));
    }
    ensure_finite(complexity, "component complexity")?;
    let len = components[0].len();
    if components.iter().any(|c| c.len() != len) {
        return Err(Error::shape("components have unequal lengths"));
    }

    let (assign, centroids) = kmeans3(complexity);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut band_of_cluster = [Band::Low; 3];
    band_of_cluster[order[0]] = Band::Low;
    band_of_cluster[order[1]] = Band::Mid;
    band_of_cluster[order[2]] = Band::High;

    let membership: Vec<Band> = assign.iter().map(|&c| band_of_cluster[c]).collect();
    let mut out = BandSet { high: vec![0.0; len], mid: vec![0.0; len], low: vec![0.0; len], membership };
    for (comp, band) in components.iter().zip(out.membership.clone()) {
        let target = match band {
            Band::Low => &mut out.low,
            Band::Mid => &mut out.mid,
            Band::High => &mut out.high,
        };
        for (t, v) in target.iter_mut().zip(comp) {
            *t += v;
        }
    }
    Ok(out)
}
