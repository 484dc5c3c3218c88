//! Hungarian matching and open-world accuracy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row/column potentials, O(n³). Returns the
/// column assigned to each row and the total cost.
pub fn hungarian(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::Shape(format!(
            "cost matrix is {}x{}, expected square",
            n,
            cost.cols()
        )));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_row[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    Ok((assignment, total))
}

/// Cluster-to-class mapping from a maximum-count matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `mapping[cluster]` is the matched class, or `None` for clusters
    /// matched only to padding.
    pub mapping: Vec<Option<usize>>,
    pub total_matched_correct: usize,
}

/// `counts[cluster][class]`, padded to a square of side
/// `max(num_clusters, num_classes)`.
pub fn contingency(
    pred: &[usize],
    gt: &[usize],
    num_clusters: usize,
    num_classes: usize,
) -> Result<Matrix> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let n = num_clusters.max(num_classes);
    let mut m = Matrix::zeros(n, n);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_clusters || g >= num_classes {
            return Err(Error::Shape(format!(
                "id out of range: cluster {p}, class {g}"
            )));
        }
        m.set(p, g, m.get(p, g) + 1.0);
    }
    Ok(m)
}

/// Matches clusters to classes maximizing agreement.
pub fn match_clusters(
    pred: &[usize],
    gt: &[usize],
    num_clusters: usize,
    num_classes: usize,
) -> Result<MatchResult> {
    let counts = contingency(pred, gt, num_clusters, num_classes)?;
    let n = counts.rows();
    let neg = Matrix::from_vec(n, n, counts.as_slice().iter().map(|c| -c).collect())?;
    let (assignment, total) = hungarian(&neg)?;
    let mapping = assignment
        .iter()
        .take(num_clusters)
        .map(|&class| (class < num_classes).then_some(class))
        .collect();
    Ok(MatchResult {
        mapping,
        total_matched_correct: (-total).round() as usize,
    })
}

/// Accuracy under the best one-to-one relabeling of cluster ids.
///
/// Cluster ids may range over `max(num_classes, max(pred) + 1)` values.
pub fn clustering_accuracy(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
) -> Result<(f64, MatchResult)> {
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let num_clusters = pred.iter().max().map_or(0, |m| m + 1).max(num_classes);
    let m = match_clusters(pred, gt, num_clusters, num_classes)?;
    Ok((m.total_matched_correct as f64 / pred.len() as f64, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen_acc: f64,
    /// `None` when the test set has no novel samples.
    pub novel_acc: Option<f64>,
    pub all_acc: f64,
    /// Novel test samples predicted as a seen class.
    pub removed_count: usize,
    /// Rows are true classes; column `j < C` counts predictions in the
    /// cluster mapped to class `j`, further columns are unmatched clusters.
    pub confusion: Matrix,
    pub mapping: Vec<Option<usize>>,
}

/// Seen, novel and all-class accuracy on a labeled test set.
///
/// Seen accuracy is plain accuracy on seen-class samples. For novel-class
/// samples, predictions into a seen class are removed and counted as errors;
/// the rest are matched over novel ids only, and the denominator is every
/// novel sample. All-class accuracy uses a matching over every class, except
/// that with no novel classes it is plain accuracy.
pub fn open_world_report(
    pred: &[usize],
    gt: &[usize],
    seen_count: usize,
    novel_count: usize,
) -> Result<EvalReport> {
    let c = seen_count + novel_count;
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if let Some(&g) = gt.iter().find(|&&g| g >= c) {
        return Err(Error::Shape(format!("label {g} outside {c} classes")));
    }
    let num_clusters = pred.iter().max().map_or(0, |m| m + 1).max(c);

    let seen: Vec<(usize, usize)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g < seen_count)
        .map(|(&p, &g)| (p, g))
        .collect();
    let seen_acc = if seen.is_empty() {
        0.0
    } else {
        seen.iter().filter(|(p, g)| p == g).count() as f64 / seen.len() as f64
    };

    let novel: Vec<(usize, usize)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g >= seen_count)
        .map(|(&p, &g)| (p, g))
        .collect();
    let kept: Vec<(usize, usize)> = novel
        .iter()
        .copied()
        .filter(|(p, _)| *p >= seen_count)
        .collect();
    let removed_count = novel.len() - kept.len();
    let novel_acc = if novel.is_empty() {
        None
    } else if kept.is_empty() {
        Some(0.0)
    } else {
        let kp: Vec<usize> = kept.iter().map(|(p, _)| p - seen_count).collect();
        let kg: Vec<usize> = kept.iter().map(|(_, g)| g - seen_count).collect();
        let m = match_clusters(&kp, &kg, num_clusters - seen_count, novel_count)?;
        Some(m.total_matched_correct as f64 / novel.len() as f64)
    };

    let mapping: Vec<Option<usize>> = if novel_count == 0 {
        (0..num_clusters).map(|k| (k < c).then_some(k)).collect()
    } else {
        match_clusters(pred, gt, num_clusters, c)?.mapping
    };
    let correct = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| mapping[p] == Some(g))
        .count();
    let all_acc = correct as f64 / pred.len() as f64;

    // Unmatched clusters get columns after the C matched ones, in id order.
    let mut column = vec![0usize; num_clusters];
    let mut next = c;
    for (k, m) in mapping.iter().enumerate() {
        column[k] = match m {
            Some(class) => *class,
            None => {
                next += 1;
                next - 1
            }
        };
    }
    let mut confusion = Matrix::zeros(c, next.max(c));
    for (&p, &g) in pred.iter().zip(gt) {
        confusion.set(g, column[p], confusion.get(g, column[p]) + 1.0);
    }

    Ok(EvalReport {
        seen_acc,
        novel_acc,
        all_acc,
        removed_count,
        confusion,
        mapping,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Confusion counts as CSV with a `class` column and one column per
    /// predicted (mapped) class.
    pub fn write_confusion_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols = self.confusion.cols();
        let header: Vec<String> = std::iter::once("class".to_string())
            .chain((0..cols).map(|j| format!("pred_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, row) in self.confusion.iter_rows().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", *v as u64)).collect();
            writeln!(w, "{i},{}", cells.join(","))?;
        }
        Ok(())
    }
}
