//! Synthetic Gaussian-mixture datasets with seen/novel splits.
//!
//! Class means sit on a hypersphere of radius `class_sep · σ · √d`, chosen
//! greedily for max-min separation from a fixed candidate set (a rotated
//! cross-polytope plus fixed random directions). Class sizes decay
//! exponentially with the class index when `imbalance_factor > 1`. The
//! first `num_seen` classes are seen; a fraction of each seen class is
//! labeled and everything else is unlabeled. A balanced test split is drawn
//! from the same Gaussians.

use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_beta, Matrix, RngStream};
use crate::uncertainty::Augment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub dim: usize,
    pub num_seen: usize,
    pub num_novel: usize,
    /// Size of the largest class.
    pub samples_per_class: usize,
    pub labeled_fraction: f64,
    pub imbalance_factor: f64,
    /// Mean radius in units of `σ·√d`.
    pub class_sep: f64,
    pub sigma: f64,
    /// Test size of the largest class; the others follow the same decay.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            num_seen: 3,
            num_novel: 3,
            samples_per_class: 500,
            labeled_fraction: 0.1,
            imbalance_factor: 1.0,
            class_sep: 6.0,
            sigma: 1.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_novel
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if self.num_seen == 0 {
            return Err(Error::param("num_seen", "need at least one seen class"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::param(
                "labeled_fraction",
                format!("{} not in (0, 1]", self.labeled_fraction),
            ));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(Error::param("imbalance_factor", "must be at least 1"));
        }
        if !(self.class_sep >= 0.0 && self.sigma > 0.0) {
            return Err(Error::param(
                "class_sep",
                "class_sep >= 0 and sigma > 0 required",
            ));
        }
        Ok(())
    }

    /// `round(n_max · IF^(−j/(C−1)))` for each class `j`.
    pub fn class_counts(&self) -> Vec<usize> {
        self.long_tail(self.samples_per_class)
    }

    /// Test samples per class under the training decay, at least one each.
    pub fn test_counts(&self) -> Vec<usize> {
        self.long_tail(self.test_per_class)
            .into_iter()
            .map(|n| n.max(usize::from(self.test_per_class > 0)))
            .collect()
    }

    fn long_tail(&self, n_max: usize) -> Vec<usize> {
        let c = self.num_classes();
        (0..c)
            .map(|j| {
                if c == 1 {
                    n_max
                } else {
                    let decay = self.imbalance_factor.powf(-(j as f64) / (c - 1) as f64);
                    (n_max as f64 * decay).round() as usize
                }
            })
            .collect()
    }
}

/// Labeled, unlabeled and test splits.
///
/// `unlabeled_gt` holds the hidden labels of the unlabeled pool. Training
/// code must not read it; it exists for evaluation and export.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub num_seen: usize,
    pub num_novel: usize,
    pub labeled_x: Matrix,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Matrix,
    pub unlabeled_gt: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    /// Generator means; absent for imported data.
    pub class_means: Option<Matrix>,
}

impl SplitDataset {
    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_novel
    }

    pub fn dim(&self) -> usize {
        self.test_x.cols()
    }

    /// One-hot rows for the labeled split.
    pub fn labeled_onehot(&self) -> Matrix {
        onehot(&self.labeled_y, self.num_classes())
    }

    /// Per-class counts in the unlabeled pool (the oracle prior numerator).
    pub fn unlabeled_class_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes()];
        for &y in &self.unlabeled_gt {
            counts[y] += 1.0;
        }
        counts
    }
}

pub fn onehot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, 1.0);
    }
    m
}

fn fixed_rotation(dim: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a fixed Gaussian matrix; the seed is part of the format.
    let mut rng = RngStream::new(0x0C1A_55E5, 0).rng();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Deterministic max-min separated unit directions.
pub fn class_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let rot = fixed_rotation(dim);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for axis in 0..dim {
        for sign in [1.0, -1.0] {
            // Column `axis` of the rotation, signed.
            candidates.push((0..dim).map(|r| sign * rot[r][axis]).collect());
        }
    }
    let mut rng = RngStream::new(0x0C1A_55E5, 1).rng();
    for _ in 0..1024 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        candidates.push(v);
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = candidates
        .iter()
        .map(|c| dist2(c, &candidates[0]))
        .collect();
    while chosen.len() < count.min(candidates.len()) {
        let mut best = 0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > min_d[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, c) in candidates.iter().enumerate() {
            min_d[i] = min_d[i].min(dist2(c, &candidates[best]));
        }
    }
    chosen.into_iter().map(|i| candidates[i].clone()).collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let c = spec.num_classes();
    let d = spec.dim;
    let counts = spec.class_counts();
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    let radius = spec.class_sep * spec.sigma * (d as f64).sqrt();
    let dirs = class_directions(d, c);
    let means: Vec<Vec<f64>> = dirs
        .iter()
        .map(|v| v.iter().map(|x| x * radius).collect())
        .collect();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
    let root = RngStream::new(spec.seed, 0);

    let draw = |class: usize, n: usize, tag: u64| -> Vec<Vec<f64>> {
        let mut rng = root.fork2(tag, class as u64).rng();
        (0..n)
            .map(|_| {
                means[class]
                    .iter()
                    .map(|m| m + noise.sample(&mut rng))
                    .collect()
            })
            .collect()
    };

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        let samples = draw(class, n, 1);
        let n_lab = if class < spec.num_seen {
            (spec.labeled_fraction * n as f64).round() as usize
        } else {
            0
        };
        for (i, s) in samples.into_iter().enumerate() {
            if i < n_lab {
                labeled.push((s, class));
            } else {
                unlabeled.push((s, class));
            }
        }
    }
    let mut rng = root.fork(3).rng();
    labeled.shuffle(&mut rng);
    unlabeled.shuffle(&mut rng);
    let mut test = Vec::new();
    for (class, &n) in spec.test_counts().iter().enumerate() {
        test.extend(draw(class, n, 2).into_iter().map(|s| (s, class)));
    }

    let split = |rows: Vec<(Vec<f64>, usize)>| -> Result<(Matrix, Vec<usize>)> {
        let y = rows.iter().map(|r| r.1).collect();
        let data = rows.into_iter().flat_map(|r| r.0).collect::<Vec<_>>();
        Ok((Matrix::from_vec(data.len() / d, d, data)?, y))
    };
    let (labeled_x, labeled_y) = split(labeled)?;
    let (unlabeled_x, unlabeled_gt) = split(unlabeled)?;
    let (test_x, test_y) = split(test)?;
    Ok(SplitDataset {
        num_seen: spec.num_seen,
        num_novel: spec.num_novel,
        labeled_x,
        labeled_y,
        unlabeled_x,
        unlabeled_gt,
        test_x,
        test_y,
        class_means: Some(Matrix::from_rows(&means)?),
    })
}

/// Accuracy of assigning each test point to its nearest generator mean.
pub fn nearest_mean_accuracy(data: &SplitDataset) -> Result<f64> {
    let means = data
        .class_means
        .as_ref()
        .ok_or(Error::Empty("class means"))?;
    let correct = data
        .test_x
        .iter_rows()
        .zip(&data.test_y)
        .filter(|(x, &y)| {
            let mut best = (f64::INFINITY, 0);
            for (k, m) in means.iter_rows().enumerate() {
                let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1 == y
        })
        .count();
    Ok(correct as f64 / data.test_y.len().max(1) as f64)
}

/// Additive noise, random scaling and coordinate masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            scale_lo: 0.8,
            scale_hi: 1.2,
            mask_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise_sigma", "must be nonnegative"));
        }
        if !(self.scale_lo <= self.scale_hi) {
            return Err(Error::param("scale", "scale_lo must not exceed scale_hi"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::param("mask_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `mask ∘ (s·x + ε)` with `s ~ U[scale_lo, scale_hi]`, `ε ~ N(0, σ²I)` and
/// each coordinate zeroed with probability `mask_prob`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let s = if cfg.scale_hi > cfg.scale_lo {
        rng.random_range(cfg.scale_lo..cfg.scale_hi)
    } else {
        cfg.scale_lo
    };
    x.iter()
        .map(|&v| {
            let eps = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let keep = cfg.mask_prob == 0.0 || rng.random::<f64>() >= cfg.mask_prob;
            if keep {
                s * v + eps
            } else {
                0.0
            }
        })
        .collect()
}

impl Augment for AugmentConfig {
    fn augment<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        augment(x, self, rng)
    }
}

/// Mixed batch produced by [`mixup`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub u: Vec<f64>,
    /// Per-row mixing weight and partner index.
    pub weights: Vec<f64>,
    pub partners: Vec<usize>,
}

/// Convex combination of each row with a uniformly drawn partner row,
/// applied identically to inputs, labels and temperatures. Each row draws
/// its own weight from Beta(γ, γ).
pub fn mixup<R: Rng + ?Sized>(
    x: &Matrix,
    y: &Matrix,
    u: &[f64],
    gamma: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let n = x.rows();
    if y.rows() != n || u.len() != n {
        return Err(Error::Shape("mixup inputs are not row-aligned".into()));
    }
    if n < 2 {
        return Ok(MixedBatch {
            x: x.clone(),
            y: y.clone(),
            u: u.to_vec(),
            weights: vec![1.0; n],
            partners: (0..n).collect(),
        });
    }
    let mut weights = Vec::with_capacity(n);
    let mut partners = Vec::with_capacity(n);
    for _ in 0..n {
        weights.push(sample_beta(rng, gamma, gamma)?);
        partners.push(rng.random_range(0..n));
    }
    Ok(mix_with(x, y, u, &weights, &partners))
}

/// Mixup with explicit weights and partners.
pub fn mix_with(
    x: &Matrix,
    y: &Matrix,
    u: &[f64],
    weights: &[f64],
    partners: &[usize],
) -> MixedBatch {
    let mut xm = x.clone();
    let mut ym = y.clone();
    let mut um = u.to_vec();
    for (i, (&lam, &p)) in weights.iter().zip(partners).enumerate() {
        let blend = |a: f64, b: f64| lam * a + (1.0 - lam) * b;
        for (o, (a, b)) in xm.row_mut(i).iter_mut().zip(x.row(i).iter().zip(x.row(p))) {
            *o = blend(*a, *b);
        }
        for (o, (a, b)) in ym.row_mut(i).iter_mut().zip(y.row(i).iter().zip(y.row(p))) {
            *o = blend(*a, *b);
        }
        um[i] = blend(u[i], u[p]);
    }
    MixedBatch {
        x: xm,
        y: ym,
        u: um,
        weights: weights.to_vec(),
        partners: partners.to_vec(),
    }
}

const SPLITS: [&str; 3] = ["labeled", "unlabeled", "test"];

/// Writes `f0..f{d-1},class,split` rows in labeled, unlabeled, test order.
pub fn write_csv<W: Write>(data: &SplitDataset, mut w: W) -> Result<()> {
    let d = data.dim();
    let header: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["class".into(), "split".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let parts = [
        (&data.labeled_x, &data.labeled_y),
        (&data.unlabeled_x, &data.unlabeled_gt),
        (&data.test_x, &data.test_y),
    ];
    for ((x, y), name) in parts.iter().zip(SPLITS) {
        for (row, class) in x.iter_rows().zip(y.iter()) {
            let mut line = String::new();
            for v in row {
                // Display for f64 is shortest round-trip.
                line.push_str(&format!("{v},"));
            }
            line.push_str(&format!("{class},{name}"));
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Reads the CSV form. The seen-class count is the number of distinct
/// labeled classes; the total is one more than the largest class id.
pub fn read_csv<R: BufRead>(r: R) -> Result<SplitDataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Empty("csv header"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "class" || cols[cols.len() - 1] != "split" {
        return Err(Error::Format(format!("unexpected csv header `{header}`")));
    }
    let d = cols.len() - 2;
    let mut rows: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Format(format!(
                "line {}: expected {} fields",
                ln + 2,
                d + 2
            )));
        }
        let which = SPLITS
            .iter()
            .position(|s| *s == fields[d + 1])
            .ok_or_else(|| {
                Error::Format(format!(
                    "line {}: unknown split `{}`",
                    ln + 2,
                    fields[d + 1]
                ))
            })?;
        for f in &fields[..d] {
            rows[which].0.push(
                f.parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?,
            );
        }
        rows[which].1.push(
            fields[d]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?,
        );
    }
    assemble(d, rows)
}

fn assemble(d: usize, rows: [(Vec<f64>, Vec<usize>); 3]) -> Result<SplitDataset> {
    let [(lx, ly), (ux, uy), (tx, ty)] = rows;
    let num_seen = {
        let mut seen: Vec<usize> = ly.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    let num_classes = ly.iter().chain(&uy).chain(&ty).max().map_or(0, |m| m + 1);
    if ly.iter().any(|&y| y >= num_seen) {
        return Err(Error::Format("labeled classes must be 0..num_seen".into()));
    }
    Ok(SplitDataset {
        num_seen,
        num_novel: num_classes - num_seen,
        labeled_x: Matrix::from_vec(ly.len(), d, lx)?,
        labeled_y: ly,
        unlabeled_x: Matrix::from_vec(uy.len(), d, ux)?,
        unlabeled_gt: uy,
        test_x: Matrix::from_vec(ty.len(), d, tx)?,
        test_y: ty,
        class_means: None,
    })
}

const BINARY_MAGIC: &[u8; 4] = b"OWSD";
const BINARY_VERSION: u32 = 1;

/// Little-endian binary form:
///
/// ```text
/// magic "OWSD" | version u32 | dim u32 | num_seen u32 | num_novel u32
/// then for labeled, unlabeled, test:  count u64 | count × (dim × f64, class u32)
/// ```
pub fn write_binary<W: Write>(data: &SplitDataset, mut w: W) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    for v in [
        BINARY_VERSION,
        data.dim() as u32,
        data.num_seen as u32,
        data.num_novel as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let parts = [
        (&data.labeled_x, &data.labeled_y),
        (&data.unlabeled_x, &data.unlabeled_gt),
        (&data.test_x, &data.test_y),
    ];
    for (x, y) in parts {
        w.write_all(&(y.len() as u64).to_le_bytes())?;
        for (row, &class) in x.iter_rows().zip(y.iter()) {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(class as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<SplitDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut u32_at = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at()?;
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d = u32_at()? as usize;
    let num_seen = u32_at()? as usize;
    let num_novel = u32_at()? as usize;
    let mut mats = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..d {
                r.read_exact(&mut b8)?;
                x.push(f64::from_le_bytes(b8));
            }
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            y.push(u32::from_le_bytes(b4) as usize);
        }
        mats.push((Matrix::from_vec(n, d, x)?, y));
    }
    let (test_x, test_y) = mats.pop().expect("three splits");
    let (unlabeled_x, unlabeled_gt) = mats.pop().expect("three splits");
    let (labeled_x, labeled_y) = mats.pop().expect("three splits");
    Ok(SplitDataset {
        num_seen,
        num_novel,
        labeled_x,
        labeled_y,
        unlabeled_x,
        unlabeled_gt,
        test_x,
        test_y,
        class_means: None,
    })
}
