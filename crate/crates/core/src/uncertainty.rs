//! Monte-Carlo input-space uncertainty and per-sample temperature scaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, validate_distribution, ProbVector};

/// A source of stochastic input transformations.
pub trait Augment {
    fn augment<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64>;
}

/// How the per-class variance vector collapses to one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Max,
    /// Variance of the class with the largest mean prediction.
    PredictedClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub mc_samples: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub reduction: Reduction,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            clip_lo: 0.1,
            clip_hi: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::param("mc_samples", "need at least 2 draws"));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo < self.clip_hi && self.clip_hi.is_finite()) {
            return Err(Error::param(
                "clip",
                format!(
                    "need 0 < clip_lo < clip_hi, got [{}, {}]",
                    self.clip_lo, self.clip_hi
                ),
            ));
        }
        Ok(())
    }
}

/// Per-sample temperatures for the labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStore {
    pub labeled: Vec<f64>,
    pub unlabeled: Vec<f64>,
    pub default_temperature: f64,
}

impl UncertaintyStore {
    pub fn new(num_labeled: usize, num_unlabeled: usize, default_temperature: f64) -> Result<Self> {
        if !(default_temperature > 0.0 && default_temperature.is_finite()) {
            return Err(Error::param(
                "temperature",
                format!("{default_temperature} must be positive"),
            ));
        }
        Ok(Self {
            labeled: vec![default_temperature; num_labeled],
            unlabeled: vec![default_temperature; num_unlabeled],
            default_temperature,
        })
    }
}

/// Mean and population variance of a set of prediction vectors.
///
/// Deviations are taken from the first prediction before averaging, so a
/// set of identical predictions has exactly zero variance.
pub fn prediction_moments(preds: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = preds.first().ok_or(Error::Empty("prediction set"))?;
    let c = first.len();
    let t = preds.len() as f64;
    let mut shift = vec![0.0; c];
    for p in preds {
        if p.len() != c {
            return Err(Error::Shape("predictions differ in length".into()));
        }
        for ((m, v), f) in shift.iter_mut().zip(p).zip(first) {
            *m += v - f;
        }
    }
    shift.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; c];
    for p in preds {
        for (((s, v), m), f) in var.iter_mut().zip(p).zip(&shift).zip(first) {
            let d = (v - f) - m;
            *s += d * d;
        }
    }
    let mean = first.iter().zip(&shift).map(|(f, m)| f + m).collect();
    var.iter_mut().for_each(|s| *s /= t);
    Ok((mean, var))
}

/// Per-class population variance of `predict(τ_i(x))` over
/// `cfg.mc_samples` stochastic transformations.
pub fn mc_variance<P, A, R>(
    predict: P,
    x: &[f64],
    augmenter: &A,
    cfg: &UncertaintyConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    P: Fn(&[f64]) -> Vec<f64>,
    A: Augment,
    R: Rng + ?Sized,
{
    mc_moments(predict, x, augmenter, cfg, rng).map(|(_, var)| var)
}

pub(crate) fn mc_moments<P, A, R>(
    predict: P,
    x: &[f64],
    augmenter: &A,
    cfg: &UncertaintyConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    P: Fn(&[f64]) -> Vec<f64>,
    A: Augment,
    R: Rng + ?Sized,
{
    if cfg.mc_samples < 2 {
        return Err(Error::param("mc_samples", "need at least 2 draws"));
    }
    let mut preds = Vec::with_capacity(cfg.mc_samples);
    for _ in 0..cfg.mc_samples {
        let view = augmenter.augment(x, rng);
        let p = predict(&view);
        validate_distribution(&p)?;
        preds.push(p);
    }
    prediction_moments(&preds)
}

/// Mean of the per-class variances.
pub fn reduce_uncertainty(var: &[f64]) -> Result<f64> {
    if var.is_empty() {
        return Err(Error::Empty("variance vector"));
    }
    if var.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::param(
            "variance",
            "entries must be finite and nonnegative",
        ));
    }
    Ok(var.iter().sum::<f64>() / var.len() as f64)
}

impl Reduction {
    pub fn apply(self, mean_pred: &[f64], var: &[f64]) -> Result<f64> {
        match self {
            Reduction::Mean => reduce_uncertainty(var),
            Reduction::Max => {
                reduce_uncertainty(var)?;
                Ok(var.iter().copied().fold(0.0, f64::max))
            }
            Reduction::PredictedClass => {
                reduce_uncertainty(var)?;
                Ok(var[argmax(mean_pred)])
            }
        }
    }
}

/// Scales raw uncertainties by their maximum, then clamps to
/// `[clip_lo, clip_hi]`. An all-zero input maps every entry to `clip_lo`.
pub fn normalize_and_clip(raw: &[f64], cfg: &UncertaintyConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::param(
            "uncertainty",
            "raw values must be finite and nonnegative",
        ));
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![cfg.clip_lo; raw.len()]);
    }
    Ok(raw
        .iter()
        .map(|v| (v / max).clamp(cfg.clip_lo, cfg.clip_hi))
        .collect())
}

/// Softmax at the sample's uncertainty temperature.
pub fn uncertainty_softmax(z: &[f64], u: f64) -> Result<ProbVector> {
    softmax(z, u)
}
