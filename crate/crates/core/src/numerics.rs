//! Dense matrices, probability helpers, and deterministic random streams.
//!
//! Everything here works in `f64`. Matrices are row-major and small enough
//! that no blocking or SIMD is attempted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a vector sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape(format!(
                    "vstack column mismatch: {} vs {cols}",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A validated probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_distribution(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "entry {v} not in [0, inf)"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidDistribution(format!("sum is {s}")));
    }
    Ok(())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax, stabilized by subtracting the max logit.
pub fn softmax(z: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(
            "temperature",
            format!("{temperature} must be positive"),
        ));
    }
    if z.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, temperature, &mut out);
    Ok(ProbVector(out))
}

/// Unchecked softmax for hot loops; callers guarantee finite input and a
/// positive temperature.
pub(crate) fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    // Scale first so that softmax(z, t) and softmax(z / t, 1) agree bitwise.
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v / temperature;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for distinct stream ids under one key. Child streams are
/// derived by hashing, so work split across threads draws the same numbers
/// as a serial run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// A child stream keyed by `tag`.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))),
        }
    }

    /// Convenience for two-level derivation, e.g. `(epoch, sample)`.
    pub fn fork2(&self, a: u64, b: u64) -> RngStream {
        self.fork(a).fork(b)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Draws from Beta(alpha, beta) as `X / (X + Y)` with independent Gamma
/// draws (Marsaglia-Tsang, via `rand_distr`).
pub fn sample_beta<R: rand::Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param("alpha", format!("{alpha} must be positive")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param("beta", format!("{beta} must be positive")));
    }
    let ga = Gamma::new(alpha, 1.0).map_err(|e| Error::param("alpha", e.to_string()))?;
    let gb = Gamma::new(beta, 1.0).map_err(|e| Error::param("beta", e.to_string()))?;
    loop {
        let x: f64 = ga.sample(rng);
        let y: f64 = gb.sample(rng);
        let s = x + y;
        // Both gammas can underflow to zero for tiny shape parameters.
        if s > 0.0 {
            return Ok(x / s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax(&[7.5, 7.5, 7.5], 0.3).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // e^4/(e^4+1) evaluated at high precision: 0.98201379003790844...
        let p = softmax(&[2.0, 0.0], 0.5).unwrap();
        assert!((p[0] - 0.982_013_790_037_908_4).abs() < 1e-12);
        assert!((p[1] - 0.017_986_209_962_091_56).abs() < 1e-12);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[1.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax(&[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // -0.25 ln 0.25 - 0.75 ln 0.75 = 0.562335144618...
        assert!((entropy(&[0.25, 0.75]).unwrap() - 0.562_335_144_618_183_6).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn beta_symmetric_moments() {
        let mut rng = RngStream::new(7, 0).rng();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_beta(&mut rng, 0.75, 0.75).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        // 0.5625 / (2.25 * 2.5) = 0.1
        assert!((var - 0.1).abs() < 0.005, "var {var}");
        assert!(draws.iter().all(|d| (0.0..=1.0).contains(d)));
    }

    #[test]
    fn beta_one_one_is_uniform() {
        let mut rng = RngStream::new(11, 3).rng();
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap())
            .collect();
        draws.sort_by(f64::total_cmp);
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = (x - i as f64 / n as f64).abs();
                let hi = ((i + 1) as f64 / n as f64 - x).abs();
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn beta_rejects_bad_params() {
        let mut rng = RngStream::new(0, 0).rng();
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_beta(&mut rng, 1.0, -2.0).is_err());
    }

    #[test]
    fn rng_streams_reproduce_and_differ() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 5).rng();
            (0..16).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 5).rng();
            (0..16).map(|_| r.random()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 6).rng();
            (0..16).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        let s = RngStream::new(1, 0);
        assert_ne!(s.fork(0), s.fork(1));
        assert_eq!(s.fork2(3, 4), s.fork2(3, 4));
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.row_sums(), vec![3.0, 7.0]);
        assert_eq!(m.col_sums(), vec![4.0, 6.0]);
        assert_eq!(m.transpose().row(0), &[1.0, 3.0]);
        assert_eq!(m.iter_rows().count(), 2);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            t in 0.05f64..5.0,
        ) {
            let p = softmax(&z, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted, t).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_temperature_equals_prescaled(
            z in prop::collection::vec(-20.0f64..20.0, 1..10),
            t in 0.1f64..4.0,
        ) {
            let p = softmax(&z, t).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            let q = softmax(&scaled, 1.0).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
