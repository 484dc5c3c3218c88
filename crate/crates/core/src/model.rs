//! Small softmax classifier with an l2-normalized output head.
//!
//! The network is either a pure linear head or one ReLU hidden layer
//! followed by the head. Head rows are normalized at forward time, so the
//! logit for class `j` is `h · w_j / ‖w_j‖` and carries no bias. Gradients
//! are derived by hand, including the per-sample temperature division and
//! the row normalization.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_into, Matrix, RngStream};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Network parameters. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Option<DenseLayer>,
    /// `C × feature_dim`, normalized per row at forward time.
    pub head: Matrix,
    /// Also scale hidden features to unit length, making logits cosines.
    pub normalize_features: bool,
}

impl ModelParams {
    /// He-normal hidden weights, zero hidden bias, and head rows drawn from
    /// `N(0, head_sigma²)`.
    pub fn init(
        arch: Architecture,
        input_dim: usize,
        num_classes: usize,
        head_sigma: f64,
        stream: RngStream,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::param(
                "shape",
                "input_dim and num_classes must be positive",
            ));
        }
        let mut rng = stream.rng();
        let (hidden, feat) = match arch {
            Architecture::Linear => (None, input_dim),
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::param("hidden", "width must be positive"));
                }
                let he = Normal::new(0.0, (2.0 / input_dim as f64).sqrt())
                    .map_err(|e| Error::param("init", e.to_string()))?;
                let w: Vec<f64> = (0..hidden * input_dim)
                    .map(|_| he.sample(&mut rng))
                    .collect();
                (
                    Some(DenseLayer {
                        weights: Matrix::from_vec(hidden, input_dim, w)?,
                        bias: vec![0.0; hidden],
                    }),
                    hidden,
                )
            }
        };
        let normal =
            Normal::new(0.0, head_sigma).map_err(|e| Error::param("head_sigma", e.to_string()))?;
        let head: Vec<f64> = (0..num_classes * feat)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            hidden,
            head: Matrix::from_vec(num_classes, feat, head)?,
            normalize_features: false,
        })
    }

    pub fn with_feature_norm(mut self, on: bool) -> Self {
        self.normalize_features = on;
        self
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weights.cols(),
            None => self.head.cols(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| DenseLayer {
                weights: Matrix::zeros(h.weights.rows(), h.weights.cols()),
                bias: vec![0.0; h.bias.len()],
            }),
            head: Matrix::zeros(self.head.rows(), self.head.cols()),
            normalize_features: self.normalize_features,
        }
    }

    /// All parameters as one flat slice sequence: hidden weights, hidden
    /// bias, head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3);
        if let Some(h) = &self.hidden {
            out.push(h.weights.as_slice());
            out.push(h.bias.as_slice());
        }
        out.push(self.head.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3);
        if let Some(h) = &mut self.hidden {
            out.push(h.weights.as_mut_slice());
            out.push(h.bias.as_mut_slice());
        }
        out.push(self.head.as_mut_slice());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn normalized_head(&self) -> (Matrix, Vec<f64>) {
        let mut unit = self.head.clone();
        let mut norms = Vec::with_capacity(unit.rows());
        for j in 0..unit.rows() {
            let row = unit.row_mut(j);
            let n = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        (unit, norms)
    }
}

/// Hidden activations for one sample (the input itself for a linear model),
/// unit-scaled when feature normalization is on. Also returns the norm
/// that was divided out.
fn features(params: &ModelParams, x: &[f64], pre: &mut Vec<f64>) -> (Vec<f64>, f64) {
    let mut h = match &params.hidden {
        None => x.to_vec(),
        Some(h) => {
            pre.clear();
            for (row, b) in h.weights.iter_rows().zip(&h.bias) {
                pre.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b);
            }
            pre.iter().map(|v| v.max(0.0)).collect()
        }
    };
    if !params.normalize_features {
        return (h, 1.0);
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    h.iter_mut().for_each(|v| *v /= n);
    (h, n)
}

fn check_input(params: &ModelParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Logits for a batch, `B × C`.
pub fn forward(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let (unit, _) = params.normalized_head();
    let c = params.num_classes();
    let mut out = Matrix::zeros(x.rows(), c);
    let mut pre = Vec::new();
    for (i, xi) in x.iter_rows().enumerate() {
        let (h, _) = features(params, xi, &mut pre);
        for (o, w) in out.row_mut(i).iter_mut().zip(unit.iter_rows()) {
            *o = w.iter().zip(&h).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Single-sample forward pass returning class probabilities at `temperature`.
pub fn predict_one(params: &ModelParams, x: &[f64], temperature: f64) -> Vec<f64> {
    let (unit, _) = params.normalized_head();
    predict_one_with(params, &unit, x, temperature)
}

pub(crate) fn predict_one_with(
    params: &ModelParams,
    unit_head: &Matrix,
    x: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let mut pre = Vec::new();
    let (h, _) = features(params, x, &mut pre);
    let z: Vec<f64> = unit_head
        .iter_rows()
        .map(|w| w.iter().zip(&h).map(|(a, b)| a * b).sum())
        .collect();
    let mut p = vec![0.0; z.len()];
    softmax_into(&z, temperature, &mut p);
    p
}

/// Row-wise probabilities at a fixed temperature.
pub fn predict_proba(params: &ModelParams, x: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::param("temperature", "must be positive"));
    }
    let mut logits = forward(params, x)?;
    let mut buf = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), temperature, &mut buf);
        logits.row_mut(i).copy_from_slice(&buf);
    }
    Ok(logits)
}

/// Logits and per-row temperature-scaled probabilities for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Forward pass with a separate softmax temperature for every row.
pub fn predict_batch(
    params: &ModelParams,
    x: &Matrix,
    temperatures: &[f64],
) -> Result<PredictionBatch> {
    if temperatures.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} rows",
            temperatures.len(),
            x.rows()
        )));
    }
    if temperatures.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::param("temperature", "must be positive"));
    }
    let logits = forward(params, x)?;
    let mut probs = logits.clone();
    for (i, &t) in temperatures.iter().enumerate() {
        softmax_into(logits.row(i), t, probs.row_mut(i));
    }
    Ok(PredictionBatch { logits, probs })
}

/// Argmax class per row.
pub fn predict_classes(params: &ModelParams, x: &Matrix) -> Result<Vec<usize>> {
    Ok(forward(params, x)?
        .iter_rows()
        .map(crate::numerics::argmax)
        .collect())
}

/// Mean cross-entropy of `softmax(z_i / u_i)` against soft targets, and its
/// gradient with respect to every parameter.
pub fn ce_loss_and_grad(
    params: &ModelParams,
    x: &Matrix,
    y: &Matrix,
    u: &[f64],
) -> Result<(f64, ModelParams)> {
    check_input(params, x)?;
    let b = x.rows();
    let c = params.num_classes();
    if y.shape() != (b, c) || u.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b}: labels {:?}, temperatures {}, classes {c}",
            y.shape(),
            u.len()
        )));
    }
    if b == 0 {
        return Err(Error::Empty("training batch"));
    }
    if u.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::param(
            "temperature",
            "per-sample temperatures must be positive",
        ));
    }

    let (unit, norms) = params.normalized_head();
    let mut grads = params.zeros_like();
    // Gradient with respect to the unit head rows; projected at the end.
    let mut g_unit = Matrix::zeros(c, unit.cols());
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut pre = Vec::new();
    let mut s = vec![0.0; c];
    let mut p = vec![0.0; c];

    for i in 0..b {
        let xi = x.row(i);
        let yi = y.row(i);
        let ui = u[i];
        let (h, h_norm) = features(params, xi, &mut pre);
        for (sj, w) in s.iter_mut().zip(unit.iter_rows()) {
            *sj = w.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>() / ui;
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        softmax_into(&s, 1.0, &mut p);
        let y_total: f64 = yi.iter().sum();
        for j in 0..c {
            loss -= yi[j] * (s[j] - lse);
        }

        // dL/dz_j = (p_j Σy - y_j) / (B u)
        let dz: Vec<f64> = (0..c)
            .map(|j| (p[j] * y_total - yi[j]) * inv_b / ui)
            .collect();
        let mut dh = vec![0.0; h.len()];
        for j in 0..c {
            let w = unit.row(j);
            let gw = g_unit.row_mut(j);
            for k in 0..h.len() {
                gw[k] += dz[j] * h[k];
                dh[k] += dz[j] * w[k];
            }
        }
        if params.normalize_features {
            // Through h/‖h‖, as for the head rows.
            let dot: f64 = dh.iter().zip(&h).map(|(a, b)| a * b).sum();
            let projected = h_norm > NORM_FLOOR;
            for (d, hk) in dh.iter_mut().zip(&h) {
                *d = if projected {
                    (*d - dot * hk) / h_norm
                } else {
                    *d / NORM_FLOOR
                };
            }
        }
        if let Some(g) = &mut grads.hidden {
            for (k, &a) in pre.iter().enumerate() {
                if a > 0.0 {
                    let d = dh[k];
                    g.bias[k] += d;
                    for (gw, xv) in g.weights.row_mut(k).iter_mut().zip(xi) {
                        *gw += d * xv;
                    }
                }
            }
        }
    }

    // Through w/‖w‖: g_w = (g_ŵ − (g_ŵ·ŵ) ŵ) / ‖w‖
    for j in 0..c {
        let w = unit.row(j);
        let gu = g_unit.row(j);
        let dot: f64 = gu.iter().zip(w).map(|(a, b)| a * b).sum();
        for ((g, a), b) in grads.head.row_mut(j).iter_mut().zip(gu).zip(w) {
            *g = (a - dot * b) / norms[j];
        }
    }
    Ok((loss * inv_b, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.zeros_like(),
        }
    }
}

/// `v ← μ v + g + wd·w;  w ← w − lr·v`, applied to every tensor.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let shapes_match = {
        let a = params.tensors();
        let g = grads.tensors();
        let v = opt.buffers.tensors();
        a.len() == g.len()
            && a.len() == v.len()
            && a.iter()
                .zip(&g)
                .zip(&v)
                .all(|((x, y), z)| x.len() == y.len() && x.len() == z.len())
    };
    if !shapes_match {
        return Err(Error::Shape(
            "parameter, gradient and momentum shapes differ".into(),
        ));
    }
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    let g_all = grads.tensors();
    for ((w, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g_all)
        .zip(opt.buffers.tensors_mut())
    {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine annealing, evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if warmup_epochs >= total_epochs {
            return Err(Error::param(
                "warmup_epochs",
                format!("{warmup_epochs} must be below total_epochs {total_epochs}"),
            ));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::param(
                "epoch",
                format!("{epoch} outside schedule of {} epochs", self.total_epochs),
            ));
        }
        let w = self.warmup_epochs;
        if epoch < w {
            return Ok(self.base_lr * (epoch + 1) as f64 / w as f64);
        }
        let progress = (epoch - w) as f64 / (self.total_epochs - w) as f64;
        Ok(0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Versioned checkpoint: named tensors with shapes, serialized as JSON.
///
/// ```text
/// { "format": "owssl-checkpoint", "version": 1, "normalize_features": true,
///   "tensors": [ { "name": "hidden.weight", "shape": [64, 8], "data": [...] },
///                { "name": "hidden.bias",   "shape": [64],    "data": [...] },
///                { "name": "head.weight",   "shape": [6, 64], "data": [...] } ] }
/// ```
///
/// Floats are written in shortest round-trip form, so load(save(p)) == p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub normalize_features: bool,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "owssl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        let mut tensors = Vec::new();
        if let Some(h) = &params.hidden {
            tensors.push(NamedTensor {
                name: "hidden.weight".into(),
                shape: vec![h.weights.rows(), h.weights.cols()],
                data: h.weights.as_slice().to_vec(),
            });
            tensors.push(NamedTensor {
                name: "hidden.bias".into(),
                shape: vec![h.bias.len()],
                data: h.bias.clone(),
            });
        }
        tensors.push(NamedTensor {
            name: "head.weight".into(),
            shape: vec![params.head.rows(), params.head.cols()],
            data: params.head.as_slice().to_vec(),
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            normalize_features: params.normalize_features,
            tensors,
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let find = |name: &str| self.tensors.iter().find(|t| t.name == name);
        let matrix = |t: &NamedTensor| -> Result<Matrix> {
            match t.shape.as_slice() {
                [r, c] => Matrix::from_vec(*r, *c, t.data.clone()),
                _ => Err(Error::Format(format!("tensor {} is not 2-D", t.name))),
            }
        };
        let head = matrix(
            find("head.weight").ok_or_else(|| Error::Format("missing head.weight".into()))?,
        )?;
        let hidden = match (find("hidden.weight"), find("hidden.bias")) {
            (Some(w), Some(b)) => {
                let weights = matrix(w)?;
                if b.data.len() != weights.rows() || b.shape != [weights.rows()] {
                    return Err(Error::Format("hidden.bias shape mismatch".into()));
                }
                Some(DenseLayer {
                    weights,
                    bias: b.data.clone(),
                })
            }
            (None, None) => None,
            _ => return Err(Error::Format("hidden layer tensors incomplete".into())),
        };
        let params = ModelParams {
            hidden,
            head,
            normalize_features: self.normalize_features,
        };
        if params
            .hidden
            .as_ref()
            .is_some_and(|h| h.weights.rows() != params.head.cols())
        {
            return Err(Error::Format(
                "head width does not match hidden layer".into(),
            ));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Random standard-normal matrix, used by tests and benches.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let normal = Normal::new(0.0, scale).expect("scale is positive");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}
