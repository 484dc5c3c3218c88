//! Novel-class count estimation by k-means sweeps scored on labeled samples.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::match_clusters;
use crate::numerics::{Matrix, RngStream};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Defaults to the number of labeled classes.
    pub k_min: Option<usize>,
    /// Defaults to four times the number of labeled classes.
    pub k_max: Option<usize>,
    pub runs_per_k: usize,
    pub top_values: usize,
    pub reassign: bool,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_min: None,
            k_max: None,
            runs_per_k: 3,
            top_values: 10,
            reassign: true,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    /// Resolved `(k_min, k_max)` for a given labeled class count.
    pub fn k_range(&self, labeled_classes: usize) -> Result<(usize, usize)> {
        let lo = self.k_min.unwrap_or(labeled_classes);
        let hi = self.k_max.unwrap_or(4 * labeled_classes);
        if hi < lo {
            return Err(Error::param(
                "k_max",
                format!("k_max {hi} is below k_min {lo}"),
            ));
        }
        if lo == 0 {
            return Err(Error::param("k_min", "must be positive"));
        }
        if self.runs_per_k == 0 || self.top_values == 0 {
            return Err(Error::param(
                "runs_per_k",
                "runs_per_k and top_values must be positive",
            ));
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            // Rounding can leave the scan on an exhausted tail.
            while d2[idx] == 0.0 && idx > 0 {
                idx -= 1;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or [`MAX_LLOYD_ITERATIONS`] is reached. An emptied cluster is
/// moved onto the point farthest from its current center.
pub fn kmeans<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Result<KmeansResult> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::param("k", format!("need 1 <= k <= {n}, got {k}")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("k-means input"));
    }
    let d = x.cols();
    let mut centers = plus_plus(x, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, r) in x.iter_rows().enumerate() {
            let (c, dist) = nearest(r, &centers);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = dist;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                centers.row_mut(c).copy_from_slice(x.row(far));
                changed = true;
            }
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        for (r, &a) in x.iter_rows().zip(&assignments) {
            sums.row_mut(a).iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            let cnt = counts[c] as f64;
            centers
                .row_mut(c)
                .iter_mut()
                .zip(sums.row(c))
                .for_each(|(o, s)| *o = s / cnt);
        }
    }
    let inertia = x
        .iter_rows()
        .zip(&assignments)
        .map(|(r, &a)| sq_dist(r, centers.row(a)))
        .sum();
    Ok(KmeansResult {
        centers,
        assignments,
        inertia,
        history,
    })
}

/// Accuracy of a clustering on the labeled subset.
///
/// Clusters are matched to labeled classes by Hungarian matching; matched
/// clusters are the dominant ones. With `reassign`, a labeled sample sitting
/// in a non-dominant cluster is moved to the nearest dominant center before
/// scoring.
pub fn labeled_cluster_score(
    result: &KmeansResult,
    x: &Matrix,
    labeled_idx: &[usize],
    labeled_gt: &[usize],
    reassign: bool,
) -> Result<f64> {
    if labeled_idx.len() != labeled_gt.len() {
        return Err(Error::Shape(
            "labeled indices and labels differ in length".into(),
        ));
    }
    if labeled_idx.is_empty() {
        return Err(Error::Empty("labeled subset"));
    }
    let k = result.centers.rows();
    let classes = labeled_gt.iter().max().map_or(0, |m| m + 1);
    if k < classes {
        return Err(Error::param(
            "k",
            format!("{k} clusters cannot cover {classes} labeled classes"),
        ));
    }
    let clusters: Vec<usize> = labeled_idx.iter().map(|&i| result.assignments[i]).collect();
    let matched = match_clusters(&clusters, labeled_gt, k, classes)?;
    let dominant: Vec<usize> = (0..k).filter(|&c| matched.mapping[c].is_some()).collect();
    let mut correct = 0usize;
    for ((&i, &c), &g) in labeled_idx.iter().zip(&clusters).zip(labeled_gt) {
        let cluster = if reassign && matched.mapping[c].is_none() {
            let xi = x.row(i);
            *dominant
                .iter()
                .min_by(|&&a, &&b| {
                    sq_dist(xi, result.centers.row(a))
                        .total_cmp(&sq_dist(xi, result.centers.row(b)))
                })
                .expect("at least one dominant cluster")
        } else {
            c
        };
        if matched.mapping[cluster] == Some(g) {
            correct += 1;
        }
    }
    Ok(correct as f64 / labeled_idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    /// Mean score with the configured reassignment setting.
    pub score: f64,
    /// Mean score without reassignment.
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: usize,
    pub table: Vec<KScore>,
    /// The k values that were averaged.
    pub top_k: Vec<usize>,
}

impl Estimate {
    pub fn write_table_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,score,raw_score")?;
        for row in &self.table {
            writeln!(w, "{},{},{}", row.k, row.score, row.raw_score)?;
        }
        Ok(())
    }
}

/// Sweeps `k` over the configured range and returns the rounded mean of the
/// `top_values` best-scoring `k`.
///
/// Scores are averaged over `runs_per_k` seeded runs. Ties in the score are
/// broken by the score without reassignment, then by smaller `k`.
pub fn estimate_class_count(
    x: &Matrix,
    labeled_idx: &[usize],
    labeled_gt: &[usize],
    cfg: &EstimatorConfig,
) -> Result<Estimate> {
    let labeled_classes = labeled_gt.iter().max().map_or(0, |m| m + 1);
    let (lo, hi) = cfg.k_range(labeled_classes)?;
    if hi > x.rows() {
        return Err(Error::param(
            "k_max",
            format!("{hi} exceeds the {} samples", x.rows()),
        ));
    }
    let root = RngStream::new(cfg.seed, 0);
    let table = (lo..=hi)
        .into_par_iter()
        .map(|k| -> Result<KScore> {
            let (mut score, mut raw) = (0.0, 0.0);
            for run in 0..cfg.runs_per_k {
                let mut rng = root.fork2(k as u64, run as u64).rng();
                let res = kmeans(x, k, &mut rng)?;
                score += labeled_cluster_score(&res, x, labeled_idx, labeled_gt, cfg.reassign)?;
                raw += labeled_cluster_score(&res, x, labeled_idx, labeled_gt, false)?;
            }
            let runs = cfg.runs_per_k as f64;
            Ok(KScore {
                k,
                score: score / runs,
                raw_score: raw / runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ranked: Vec<&KScore> = table.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.raw_score.total_cmp(&a.raw_score))
            .then(a.k.cmp(&b.k))
    });
    let top_k: Vec<usize> = ranked.iter().take(cfg.top_values).map(|s| s.k).collect();
    let mean = top_k.iter().sum::<usize>() as f64 / top_k.len() as f64;
    Ok(Estimate {
        estimate: mean.round() as usize,
        table,
        top_k,
    })
}
