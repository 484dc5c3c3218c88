//! Class-distribution-aware pseudo-labels via Sinkhorn-Knopp scaling.
//!
//! Given a batch of predicted class probabilities `Ŷ` (N×C) and a class
//! prior `ρ`, the transport plan
//!
//! ```text
//! A = diag(m) · (Ŷ / N)^λ · diag(n)
//! ```
//!
//! is scaled so that every row carries mass `1/N` and column `j` carries
//! `ρ_π(j)`, where `π` aligns the novel part of the prior with the order of
//! the predicted novel-class marginals. Rows of `A` are then turned into
//! soft pseudo-labels, with confident novel rows hardened to one-hot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, PROB_SUM_TOL};

/// Entries of `Ŷ` below this value are clamped before exponentiation.
pub const PROB_FLOOR: f64 = 1e-30;

/// Expected class fractions over seen classes followed by novel classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    fractions: Vec<f64>,
    seen_count: usize,
    novel_count: usize,
}

impl ClassPrior {
    pub fn new(fractions: Vec<f64>, seen_count: usize, novel_count: usize) -> Result<Self> {
        if fractions.len() != seen_count + novel_count {
            return Err(Error::Shape(format!(
                "prior has {} entries but seen + novel = {}",
                fractions.len(),
                seen_count + novel_count
            )));
        }
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidDistribution(
                "prior entries must be nonnegative".into(),
            ));
        }
        let s: f64 = fractions.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("prior sums to {s}")));
        }
        Ok(Self {
            fractions,
            seen_count,
            novel_count,
        })
    }

    pub fn balanced(seen_count: usize, novel_count: usize) -> Result<Self> {
        let c = seen_count + novel_count;
        if c == 0 {
            return Err(Error::Empty("class prior"));
        }
        Self::new(vec![1.0 / c as f64; c], seen_count, novel_count)
    }

    /// Normalizes nonnegative class counts into a prior.
    pub fn from_counts(counts: &[f64], seen_count: usize) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDistribution("counts sum to zero".into()));
        }
        let mut fractions: Vec<f64> = counts.iter().map(|c| c / total).collect();
        renormalize(&mut fractions);
        Self::new(
            fractions,
            seen_count,
            counts.len().saturating_sub(seen_count),
        )
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn novel_count(&self) -> usize {
        self.novel_count
    }

    pub fn num_classes(&self) -> usize {
        self.fractions.len()
    }

    /// The novel block of the prior, renormalized, with no seen classes.
    pub fn novel_only(&self) -> Result<Self> {
        let novel = &self.fractions[self.seen_count..];
        let total: f64 = novel.iter().sum();
        if self.novel_count == 0 || !(total > 0.0) {
            return Err(Error::InvalidDistribution("no novel mass in prior".into()));
        }
        let mut fractions: Vec<f64> = novel.iter().map(|f| f / total).collect();
        renormalize(&mut fractions);
        Self::new(fractions, 0, self.novel_count)
    }
}

/// Pushes the rounding residue of a normalized vector onto its largest entry
/// so the sum is 1 to the last bit where possible.
pub(crate) fn renormalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
        let residue = 1.0 - v.iter().sum::<f64>();
        let i = argmax(v);
        v[i] += residue;
    }
}

/// How `lambda` enters the transport kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelExponent {
    /// `(Ŷ/N)^λ`.
    Lambda,
    /// `(Ŷ/N)^(1/λ)`, the entropic form `exp(log(Ŷ/N)/λ)`.
    #[default]
    InverseLambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub exponent: KernelExponent,
    pub iterations: usize,
    /// Row-normalized mass a novel argmax needs to become a hard label.
    pub hard_threshold: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            exponent: KernelExponent::default(),
            iterations: 3,
            hard_threshold: 0.5,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(
                "lambda",
                format!("{} must be positive", self.lambda),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.hard_threshold) {
            return Err(Error::param(
                "hard_threshold",
                format!("{} not in [0, 1]", self.hard_threshold),
            ));
        }
        Ok(())
    }

    /// The power the normalized predictions are raised to.
    pub fn kernel_power(&self) -> f64 {
        match self.exponent {
            KernelExponent::Lambda => self.lambda,
            KernelExponent::InverseLambda => self.lambda.recip(),
        }
    }
}

/// A joint-probability transport plan in model column order.
///
/// `permutation[j]` is the prior index whose fraction column `j` was scaled
/// to; seen columns always map to themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub plan: Matrix,
    pub permutation: Vec<usize>,
}

impl AssignmentMatrix {
    /// Column targets `ρ_π(j)` used during scaling.
    pub fn column_targets(&self, prior: &ClassPrior) -> Vec<f64> {
        self.permutation
            .iter()
            .map(|&p| prior.fractions()[p])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Matrix,
    pub is_hard: Vec<bool>,
}

fn check_predictions(pred: &Matrix, prior: &ClassPrior) -> Result<()> {
    if pred.cols() != prior.num_classes() {
        return Err(Error::Shape(format!(
            "predictions have {} columns, prior has {} classes",
            pred.cols(),
            prior.num_classes()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::Empty("prediction batch"));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite("predictions"));
    }
    Ok(())
}

/// Aligns novel prior entries with predicted novel-class marginals by rank.
///
/// The novel column with the k-th largest marginal `Σ_i Ŷ_ij` receives the
/// k-th largest novel prior fraction. Ties in either ranking fall back to
/// column index, and among columns receiving equal fractions the lowest
/// prior index goes to the lowest column, so a balanced prior always yields
/// the identity.
pub fn estimate_permutation(pred: &Matrix, prior: &ClassPrior) -> Result<Vec<usize>> {
    check_predictions(pred, prior)?;
    let seen = prior.seen_count();
    let c = prior.num_classes();
    let marginals = pred.col_sums();

    let mut cols: Vec<usize> = (seen..c).collect();
    cols.sort_by(|&a, &b| marginals[b].total_cmp(&marginals[a]));
    let mut prior_idx: Vec<usize> = (seen..c).collect();
    let fr = prior.fractions();
    prior_idx.sort_by(|&a, &b| fr[b].total_cmp(&fr[a]));

    // Fraction value each novel column receives under rank matching.
    let mut value_for = vec![0.0; c];
    for (&col, &p) in cols.iter().zip(&prior_idx) {
        value_for[col] = fr[p];
    }

    let mut perm: Vec<usize> = (0..c).collect();
    let mut used = vec![false; c];
    for col in seen..c {
        let p = (seen..c)
            .find(|&p| !used[p] && fr[p] == value_for[col])
            .expect("rank matching assigns every value exactly once");
        used[p] = true;
        perm[col] = p;
    }
    Ok(perm)
}

/// Runs `cfg.iterations` alternating Sinkhorn-Knopp updates.
///
/// Each iteration first rescales rows to `1/N` and then columns to their
/// permuted prior targets, so column marginals are exact after every
/// iteration while row marginals converge.
pub fn sinkhorn_assign(
    pred: &Matrix,
    prior: &ClassPrior,
    cfg: &SinkhornConfig,
) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    let permutation = estimate_permutation(pred, prior)?;
    let (n, c) = pred.shape();
    let nf = n as f64;
    let col_target: Vec<f64> = permutation.iter().map(|&p| prior.fractions()[p]).collect();
    let row_target = 1.0 / nf;
    let power = cfg.kernel_power();

    // Kernel (Ŷ/N)^power. Each row is divided by its max before exponentiating;
    // the row factor is absorbed by `m`, and large exponents stay representable.
    let mut kernel = Matrix::zeros(n, c);
    for i in 0..n {
        let logs: Vec<f64> = pred
            .row(i)
            .iter()
            .map(|&p| (p.max(PROB_FLOOR) / nf).ln())
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (k, l) in kernel.row_mut(i).iter_mut().zip(&logs) {
            *k = (power * (l - max)).exp().max(f64::MIN_POSITIVE);
        }
    }

    let mut m = vec![1.0; n];
    let mut nvec = vec![1.0; c];
    for iteration in 0..cfg.iterations {
        for (i, mi) in m.iter_mut().enumerate() {
            let s: f64 = kernel.row(i).iter().zip(&nvec).map(|(k, v)| k * v).sum();
            *mi = row_target / s;
        }
        let mut col = vec![0.0; c];
        for (i, &mi) in m.iter().enumerate() {
            for (cs, k) in col.iter_mut().zip(kernel.row(i)) {
                *cs += mi * k;
            }
        }
        for (nj, (t, s)) in nvec.iter_mut().zip(col_target.iter().zip(&col)) {
            *nj = t / s;
        }
        if m.iter().chain(&nvec).any(|v| !v.is_finite()) {
            return Err(Error::SinkhornNan { iteration });
        }
    }

    let mut plan = kernel;
    for i in 0..n {
        let mi = m[i];
        for (a, nj) in plan.row_mut(i).iter_mut().zip(&nvec) {
            *a *= mi * nj;
        }
    }
    Ok(AssignmentMatrix { plan, permutation })
}

/// Turns a transport plan into training targets.
///
/// Every row is normalized to a distribution. Rows whose argmax is a novel
/// column with normalized mass at least `cfg.hard_threshold` become one-hot.
/// Columns of the plan are already in model output order.
pub fn mixed_pseudo_labels(
    assignment: &AssignmentMatrix,
    prior: &ClassPrior,
    cfg: &SinkhornConfig,
) -> Result<PseudoLabelBatch> {
    let plan = &assignment.plan;
    if plan.cols() != prior.num_classes() {
        return Err(Error::Shape(
            "assignment and prior disagree on class count".into(),
        ));
    }
    if plan.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(
            "assignment has negative or non-finite entries".into(),
        ));
    }
    let seen = prior.seen_count();
    let mut labels = plan.clone();
    let mut is_hard = Vec::with_capacity(plan.rows());
    for i in 0..plan.rows() {
        let row = labels.row_mut(i);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "assignment row {i} has no mass"
            )));
        }
        row.iter_mut().for_each(|v| *v /= s);
        let j = argmax(row);
        let hard = j >= seen && row[j] >= cfg.hard_threshold;
        if hard {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[j] = 1.0;
        }
        is_hard.push(hard);
    }
    Ok(PseudoLabelBatch { labels, is_hard })
}

/// Sinkhorn restricted to novel columns, for novel-class-discovery batches
/// where every unlabeled sample is known to be novel.
///
/// Seen columns of the returned plan are zero.
pub fn sinkhorn_assign_novel_only(
    pred: &Matrix,
    prior: &ClassPrior,
    cfg: &SinkhornConfig,
) -> Result<AssignmentMatrix> {
    check_predictions(pred, prior)?;
    let seen = prior.seen_count();
    let c = prior.num_classes();
    let novel_prior = prior.novel_only()?;
    let mut sub = Matrix::zeros(pred.rows(), c - seen);
    for i in 0..pred.rows() {
        let src = &pred.row(i)[seen..];
        let s: f64 = src.iter().sum::<f64>().max(PROB_FLOOR);
        for (d, v) in sub.row_mut(i).iter_mut().zip(src) {
            *d = v / s;
        }
    }
    let inner = sinkhorn_assign(&sub, &novel_prior, cfg)?;
    let mut plan = Matrix::zeros(pred.rows(), c);
    for i in 0..pred.rows() {
        plan.row_mut(i)[seen..].copy_from_slice(inner.plan.row(i));
    }
    let mut permutation: Vec<usize> = (0..c).collect();
    for (j, p) in inner.permutation.iter().enumerate() {
        permutation[seen + j] = seen + p;
    }
    Ok(AssignmentMatrix { plan, permutation })
}
