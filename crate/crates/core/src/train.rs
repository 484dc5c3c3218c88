//! The training loop: cross pseudo-labeling with Sinkhorn targets, mixup,
//! uncertainty-temperature cross-entropy and epoch-boundary refreshes.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, mixup, AugmentConfig, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{open_world_report, EvalReport};
use crate::model::{
    ce_loss_and_grad, predict_batch, predict_classes, predict_one_with, sgd_step, Architecture,
    LrSchedule, ModelParams, OptimizerState,
};
use crate::numerics::{argmax, Matrix, RngStream};
use crate::sinkhorn::{
    mixed_pseudo_labels, renormalize, sinkhorn_assign, sinkhorn_assign_novel_only, ClassPrior,
    PseudoLabelBatch, SinkhornConfig,
};
use crate::uncertainty::{mc_moments, normalize_and_clip, UncertaintyConfig, UncertaintyStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// True class fractions of the unlabeled pool.
    #[default]
    Oracle,
    Balanced,
    /// Start balanced, then refit to the model's own predictions.
    Estimated,
}

/// How many labeled samples accompany each unlabeled batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledBatch {
    /// As many as the unlabeled batch size, cycling through the labeled set.
    #[default]
    Equal,
    /// `ceil(batch_size · N_L / N)`.
    Proportional,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Unlabeled samples per step.
    pub batch_size: usize,
    pub labeled_batch: LabeledBatch,
    pub architecture: Architecture,
    pub head_init_sigma: f64,
    /// Cosine logits: hidden features are scaled to unit length.
    pub normalize_features: bool,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mixup_gamma: f64,
    /// Initial temperature for every sample; labeled samples keep it.
    pub temperature: f64,
    /// Refresh unlabeled temperatures from MC variance each epoch. When
    /// off, every sample keeps `temperature`.
    pub uncertainty_scaling: bool,
    /// Softmax temperature of the predictions handed to Sinkhorn.
    pub pseudo_label_temperature: f64,
    pub sinkhorn: SinkhornConfig,
    pub uncertainty: UncertaintyConfig,
    pub augment: AugmentConfig,
    pub prior_mode: PriorMode,
    pub prior_update_interval: usize,
    /// Pseudo-label only over novel columns.
    pub ncd_mode: bool,
    /// Novel head size when the true count is unknown or misestimated.
    pub num_novel_override: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            labeled_batch: LabeledBatch::Equal,
            architecture: Architecture::default(),
            head_init_sigma: 0.01,
            normalize_features: true,
            base_lr: 0.1,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            mixup_gamma: 0.75,
            temperature: 0.1,
            uncertainty_scaling: true,
            pseudo_label_temperature: 1.0,
            sinkhorn: SinkhornConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            augment: AugmentConfig::default(),
            prior_mode: PriorMode::Oracle,
            prior_update_interval: 10,
            ncd_mode: false,
            num_novel_override: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2"));
        }
        if self.labeled_batch == LabeledBatch::Fixed(0) {
            return Err(Error::param("labeled_batch", "fixed size must be positive"));
        }
        if self.prior_update_interval == 0 {
            return Err(Error::param("prior_update_interval", "must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::param("base_lr", "must be finite and nonnegative"));
        }
        if !(self.mixup_gamma > 0.0) {
            return Err(Error::param("mixup_gamma", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        self.sinkhorn.validate()?;
        self.uncertainty.validate()?;
        self.augment.validate()
    }

    /// Schedule for this run. Runs no longer than the warmup shorten it so
    /// the last epoch still anneals.
    pub fn schedule(&self) -> Result<Option<LrSchedule>> {
        if self.epochs == 0 {
            return Ok(None);
        }
        let warmup = self.warmup_epochs.min(self.epochs - 1);
        LrSchedule::new(self.base_lr, warmup, self.epochs).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seen_acc: f64,
    pub novel_acc: Option<f64>,
    pub all_acc: f64,
    /// Fraction of unlabeled pseudo-labels that were hardened.
    pub hard_fraction: f64,
    pub prior: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub uncertainties: UncertaintyStore,
    pub current_prior: ClassPrior,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
    pub prior: ClassPrior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub hard_rows: usize,
    pub unlabeled_rows: usize,
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_STEP: u64 = 3;
const TAG_UNCERTAINTY: u64 = 4;

fn head_novel(data: &SplitDataset, cfg: &TrainConfig) -> usize {
    cfg.num_novel_override.unwrap_or(data.num_novel)
}

/// Starting prior over the model head.
///
/// The oracle prior uses the unlabeled class counts. If the head has a
/// different number of novel columns than the data, the true novel mass is
/// spread evenly over the novel columns.
pub fn initial_prior(data: &SplitDataset, cfg: &TrainConfig) -> Result<ClassPrior> {
    let seen = data.num_seen;
    let novel = head_novel(data, cfg);
    match cfg.prior_mode {
        PriorMode::Balanced | PriorMode::Estimated => ClassPrior::balanced(seen, novel),
        PriorMode::Oracle => {
            let counts = data.unlabeled_class_counts();
            if novel == data.num_novel {
                return ClassPrior::from_counts(&counts, seen);
            }
            let novel_mass: f64 = counts[seen..].iter().sum();
            let mut head = counts[..seen].to_vec();
            head.extend(std::iter::repeat_n(novel_mass / novel.max(1) as f64, novel));
            ClassPrior::from_counts(&head, seen)
        }
    }
}

/// Floors every entry at `floor` and rescales the rest to keep unit mass.
pub fn floor_prior(fractions: &[f64], floor: f64) -> Vec<f64> {
    let c = fractions.len();
    let mut out = fractions.to_vec();
    let mut fixed = vec![false; c];
    loop {
        let fixed_mass = fixed.iter().filter(|f| **f).count() as f64 * floor;
        let free_mass: f64 = out
            .iter()
            .zip(&fixed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| *v)
            .sum();
        let scale = if free_mass > 0.0 {
            (1.0 - fixed_mass) / free_mass
        } else {
            0.0
        };
        let mut newly_fixed = false;
        for j in 0..c {
            if !fixed[j] && out[j] * scale < floor {
                fixed[j] = true;
                out[j] = floor;
                newly_fixed = true;
            }
        }
        if !newly_fixed {
            for j in 0..c {
                if !fixed[j] {
                    out[j] *= scale;
                }
            }
            break;
        }
    }
    renormalize(&mut out);
    out
}

/// Argmax histogram of unlabeled predictions, floored at `1/(10C)`.
pub fn update_prior(
    params: &ModelParams,
    unlabeled_x: &Matrix,
    seen_count: usize,
) -> Result<ClassPrior> {
    let c = params.num_classes();
    let mut counts = vec![0.0; c];
    for k in predict_classes(params, unlabeled_x)? {
        counts[k] += 1.0;
    }
    let n = unlabeled_x.rows().max(1) as f64;
    let fractions: Vec<f64> = counts.iter().map(|v| v / n).collect();
    ClassPrior::new(
        floor_prior(&fractions, 1.0 / (10.0 * c as f64)),
        seen_count,
        c - seen_count,
    )
}

/// Recomputes unlabeled temperatures from MC variance under augmentation.
///
/// Each sample draws from its own stream, so the result does not depend on
/// thread scheduling.
pub fn refresh_uncertainties(
    params: &ModelParams,
    unlabeled_x: &Matrix,
    augment_cfg: &AugmentConfig,
    cfg: &UncertaintyConfig,
    stream: RngStream,
) -> Result<Vec<f64>> {
    let (unit, _) = params.normalized_head();
    let raw = (0..unlabeled_x.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.fork(i as u64).rng();
            let predict = |v: &[f64]| predict_one_with(params, &unit, v, 1.0);
            let (mean, var) = mc_moments(predict, unlabeled_x.row(i), augment_cfg, cfg, &mut rng)?;
            cfg.reduction.apply(&mean, &var)
        })
        .collect::<Result<Vec<f64>>>()?;
    normalize_and_clip(&raw, cfg)
}

fn pseudo_labels(pred: &Matrix, prior: &ClassPrior, cfg: &TrainConfig) -> Result<PseudoLabelBatch> {
    let plan = if cfg.ncd_mode {
        sinkhorn_assign_novel_only(pred, prior, &cfg.sinkhorn)?
    } else {
        sinkhorn_assign(pred, prior, &cfg.sinkhorn)?
    };
    mixed_pseudo_labels(&plan, prior, &cfg.sinkhorn)
}

/// Targets for two views of the same batch: each view is supervised by the
/// pseudo-labels computed from the other.
pub fn cross_pseudo_label(
    pred_view1: &Matrix,
    pred_view2: &Matrix,
    prior: &ClassPrior,
    cfg: &TrainConfig,
) -> Result<(PseudoLabelBatch, PseudoLabelBatch)> {
    let from1 = pseudo_labels(pred_view1, prior, cfg)?;
    let from2 = pseudo_labels(pred_view2, prior, cfg)?;
    Ok((from2, from1))
}

fn augment_rows(x: &Matrix, cfg: &AugmentConfig, rng: &mut impl rand::Rng) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let v = augment(x.row(i), cfg, rng);
        out.row_mut(i).copy_from_slice(&v);
    }
    out
}

/// One update on a labeled batch and an unlabeled batch.
///
/// Indices select rows of the dataset and of the uncertainty store. An empty
/// unlabeled batch gives a supervised step.
pub fn train_step(
    state: &mut TrainState,
    data: &SplitDataset,
    labeled_idx: &[usize],
    unlabeled_idx: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    stream: RngStream,
) -> Result<StepStats> {
    let mut rng = stream.rng();
    let c = state.params.num_classes();
    let xl = augment_rows(
        &data.labeled_x.select_rows(labeled_idx),
        &cfg.augment,
        &mut rng,
    );
    let mut yl = Matrix::zeros(labeled_idx.len(), c);
    for (r, &i) in labeled_idx.iter().enumerate() {
        yl.set(r, data.labeled_y[i], 1.0);
    }
    let ul: Vec<f64> = labeled_idx
        .iter()
        .map(|&i| state.uncertainties.labeled[i])
        .collect();

    let (x, y, u, hard_rows) = if unlabeled_idx.is_empty() {
        (xl, yl, ul, 0)
    } else {
        let xu = data.unlabeled_x.select_rows(unlabeled_idx);
        let uu: Vec<f64> = unlabeled_idx
            .iter()
            .map(|&i| state.uncertainties.unlabeled[i])
            .collect();
        let v1 = augment_rows(&xu, &cfg.augment, &mut rng);
        let v2 = augment_rows(&xu, &cfg.augment, &mut rng);
        let pl_t = vec![cfg.pseudo_label_temperature; uu.len()];
        let p1 = predict_batch(&state.params, &v1, &pl_t)?;
        let p2 = predict_batch(&state.params, &v2, &pl_t)?;
        let (t1, t2) = cross_pseudo_label(&p1.probs, &p2.probs, &state.current_prior, cfg)?;
        let hard = t1.is_hard.iter().chain(&t2.is_hard).filter(|h| **h).count();
        let x = Matrix::vstack(&[&xl, &v1, &v2])?;
        let y = Matrix::vstack(&[&yl, &t1.labels, &t2.labels])?;
        let mut u = ul;
        u.extend_from_slice(&uu);
        u.extend_from_slice(&uu);
        (x, y, u, hard)
    };
    if x.rows() == 0 {
        return Err(Error::Empty("training batch"));
    }
    let mixed = mixup(&x, &y, &u, cfg.mixup_gamma, &mut rng)?;
    let (loss, grads) = ce_loss_and_grad(&state.params, &mixed.x, &mixed.y, &mixed.u)?;
    sgd_step(&mut state.params, &grads, &mut state.opt, lr)?;
    if !state.params.is_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(StepStats {
        loss,
        hard_rows,
        unlabeled_rows: 2 * unlabeled_idx.len(),
    })
}

/// Labeled batch size `ceil(batch_size · N_L / N)`, at least 1.
pub fn labeled_batch_size(batch_size: usize, num_labeled: usize, num_unlabeled: usize) -> usize {
    let n = num_labeled + num_unlabeled;
    if num_labeled == 0 || n == 0 {
        return 0;
    }
    (batch_size * num_labeled).div_ceil(n).max(1)
}

/// Splits `0..n` into `ceil(n / batch_size)` shuffled chunks of near-equal size.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let steps = n.div_ceil(batch_size).max(1);
    (0..steps)
        .map(|s| order[s * n / steps..(s + 1) * n / steps].to_vec())
        .collect()
}

pub fn evaluate(params: &ModelParams, data: &SplitDataset) -> Result<EvalReport> {
    let pred = predict_classes(params, &data.test_x)?;
    open_world_report(&pred, &data.test_y, data.num_seen, data.num_novel)
}

impl TrainState {
    pub fn new(data: &SplitDataset, cfg: &TrainConfig) -> Result<Self> {
        let c = data.num_seen + head_novel(data, cfg);
        let root = RngStream::new(cfg.seed, 0);
        let params = ModelParams::init(
            cfg.architecture,
            data.dim(),
            c,
            cfg.head_init_sigma,
            root.fork(TAG_INIT),
        )?
        .with_feature_norm(cfg.normalize_features);
        let opt = OptimizerState::new(&params, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            opt,
            params,
            uncertainties: UncertaintyStore::new(
                data.labeled_y.len(),
                data.unlabeled_x.rows(),
                cfg.temperature,
            )?,
            current_prior: initial_prior(data, cfg)?,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Runs one epoch and appends its record.
    pub fn run_epoch(&mut self, data: &SplitDataset, cfg: &TrainConfig, lr: f64) -> Result<()> {
        let epoch = self.epoch;
        let root = RngStream::new(cfg.seed, 0);
        let nu = data.unlabeled_x.rows();
        let nl = data.labeled_y.len();
        let mut shuffle = root.fork2(TAG_SHUFFLE, epoch as u64).rng();
        let unlabeled_batches = if nu == 0 {
            vec![Vec::new(); nl.div_ceil(cfg.batch_size).max(1)]
        } else {
            epoch_batches(nu, cfg.batch_size, &mut shuffle)
        };
        let lb = match cfg.labeled_batch {
            _ if nl == 0 => 0,
            _ if nu == 0 => cfg.batch_size.min(nl),
            LabeledBatch::Equal => cfg.batch_size,
            LabeledBatch::Proportional => labeled_batch_size(cfg.batch_size, nl, nu),
            LabeledBatch::Fixed(n) => n,
        };
        let mut labeled_order: Vec<usize> = (0..nl).collect();
        labeled_order.shuffle(&mut shuffle);
        let mut cursor = 0;

        let (mut loss, mut hard, mut rows) = (0.0, 0usize, 0usize);
        for (step, ub) in unlabeled_batches.iter().enumerate() {
            let mut lbatch = Vec::with_capacity(lb);
            while lbatch.len() < lb {
                if cursor == nl {
                    labeled_order.shuffle(&mut shuffle);
                    cursor = 0;
                }
                lbatch.push(labeled_order[cursor]);
                cursor += 1;
            }
            let stats = train_step(
                self,
                data,
                &lbatch,
                ub,
                cfg,
                lr,
                root.fork(TAG_STEP).fork2(epoch as u64, step as u64),
            )
            .map_err(|e| e.context(format!("epoch {epoch}, step {step}")))?;
            loss += stats.loss;
            hard += stats.hard_rows;
            rows += stats.unlabeled_rows;
        }

        if cfg.uncertainty_scaling && nu > 0 {
            self.uncertainties.unlabeled = refresh_uncertainties(
                &self.params,
                &data.unlabeled_x,
                &cfg.augment,
                &cfg.uncertainty,
                root.fork(TAG_UNCERTAINTY).fork(epoch as u64),
            )
            .map_err(|e| e.context(format!("uncertainty refresh after epoch {epoch}")))?;
        }
        if cfg.prior_mode == PriorMode::Estimated
            && nu > 0
            && (epoch + 1) % cfg.prior_update_interval == 0
        {
            self.current_prior = update_prior(&self.params, &data.unlabeled_x, data.num_seen)?;
        }

        let report = evaluate(&self.params, data)?;
        self.history.push(EpochRecord {
            epoch,
            lr,
            loss: loss / unlabeled_batches.len() as f64,
            seen_acc: report.seen_acc,
            novel_acc: report.novel_acc,
            all_acc: report.all_acc,
            hard_fraction: if rows == 0 {
                0.0
            } else {
                hard as f64 / rows as f64
            },
            prior: self.current_prior.fractions().to_vec(),
        });
        self.epoch += 1;
        Ok(())
    }
}

/// Trains for `cfg.epochs` epochs and evaluates on the test split.
pub fn train(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.ncd_mode && head_novel(data, cfg) == 0 {
        return Err(Error::param("ncd_mode", "needs at least one novel class"));
    }
    let mut state = TrainState::new(data, cfg)?;
    if let Some(schedule) = cfg.schedule()? {
        for epoch in 0..cfg.epochs {
            let lr = schedule.lr_at(epoch)?;
            state.run_epoch(data, cfg, lr)?;
        }
    }
    let report = evaluate(&state.params, data)?;
    Ok(TrainOutcome {
        params: state.params,
        history: state.history,
        report,
        prior: state.current_prior,
    })
}

/// Fraction of each class among the hard-label argmaxes of a batch; used
/// in diagnostics.
pub fn label_histogram(labels: &Matrix) -> Vec<f64> {
    let mut hist = vec![0.0; labels.cols()];
    for row in labels.iter_rows() {
        hist[argmax(row)] += 1.0;
    }
    let n = labels.rows().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}
