use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamState, StepOutcome};
use super::data::{PairDataset, PairSample};
use crate::error::{Error, Result};
use crate::losses::{epe_loss, total_loss, LossConfig, LossReport, ScaleTerms};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::pyramid::tensor_pyramid;
use crate::regnet::RegModel;
use crate::warp::bilinear_warp;

/// Epoch-mean total loss may grow to this multiple of the first epoch's
/// before training is aborted.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Photometric + smoothness (+ overlap) loss through the warp.
    #[default]
    Unsupervised,
    /// Endpoint error against ground-truth fields, summed over scales.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f32,
    /// The learning rate is halved once, after this many epochs.
    pub halve_after_epochs: usize,
    /// Epochs trained after the halving.
    pub extra_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    pub loss: LossConfig,
}

fn default_weight_decay() -> f32 {
    5e-4
}

impl TrainConfig {
    /// 10 epochs, halve, 7 more; lr 1e-5 (unsupervised) or 1e-4
    /// (supervised); weight decay 5e-4; batch 8.
    pub fn defaults(mode: TrainMode, scale_count: usize) -> Self {
        TrainConfig {
            batch_size: 8,
            initial_lr: match mode {
                TrainMode::Unsupervised => 1e-5,
                TrainMode::Supervised => 1e-4,
            },
            halve_after_epochs: 10,
            extra_epochs: 7,
            weight_decay: default_weight_decay(),
            seed: 0,
            mode,
            loss: LossConfig::defaults(scale_count),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.halve_after_epochs + self.extra_epochs
    }

    /// Learning rate during the 1-based `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f32 {
        if epoch > self.halve_after_epochs {
            self.initial_lr * 0.5
        } else {
            self.initial_lr
        }
    }

    pub fn validate(&self, scale_count: usize) -> Result<()> {
        let err = |path: &str, reason: &str| Error::Config {
            path: format!("train.{path}"),
            reason: reason.into(),
        };
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(err("initial_lr", "must be a positive number"));
        }
        if self.total_epochs() == 0 {
            return Err(err("halve_after_epochs", "total epoch count must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(err("weight_decay", "must be non-negative"));
        }
        self.loss.validate(scale_count)
    }
}

/// Epoch-mean losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    /// Unweighted photometric loss summed over scales.
    pub photometric: f64,
    pub smooth: f64,
    pub overlap: f64,
    /// The optimized objective: weighted total, or summed EPE when supervised.
    pub total: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,photometric,smooth,overlap,total";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{:e},{:.8},{:.8},{:.8},{:.8}",
            r.epoch, r.lr, r.photometric, r.smooth, r.overlap, r.total
        );
    }
    out
}

/// Per-scale tensors of one pair, precomputed once per training run.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub fixed: Vec<Tensor>,
    pub moving: Vec<Tensor>,
    pub masks: Option<(Vec<Tensor>, Vec<Tensor>)>,
    pub ground_truth: Option<Vec<Tensor>>,
}

impl PreparedPair {
    pub fn new(pair: &PairSample, scale_count: usize) -> Result<Self> {
        let masks = match &pair.masks {
            Some((f, m)) => Some((
                tensor_pyramid(&f.image().to_tensor(), scale_count)?,
                tensor_pyramid(&m.image().to_tensor(), scale_count)?,
            )),
            None => None,
        };
        let ground_truth = match &pair.ground_truth {
            Some(gt) => Some(
                crate::pyramid::field_pyramid(gt, scale_count)?
                    .iter()
                    .map(|f| f.to_tensor())
                    .collect(),
            ),
            None => None,
        };
        Ok(PreparedPair {
            fixed: tensor_pyramid(&pair.fixed.to_tensor(), scale_count)?,
            moving: tensor_pyramid(&pair.moving.to_tensor(), scale_count)?,
            masks,
            ground_truth,
        })
    }
}

/// Objective of one pair on `tape`.
pub struct PairObjective {
    pub loss: Var,
    pub report: LossReport,
    /// Supervised objective (summed EPE) when requested.
    pub epe: Option<f64>,
}

/// Forward pass, warping at every scale and the loss for `mode`.
pub fn pair_objective(
    tape: &mut Tape,
    model: &RegModel,
    vars: &[Var],
    pair: &PreparedPair,
    loss: &LossConfig,
    mode: TrainMode,
) -> Result<PairObjective> {
    let scales = model.arch().levels;
    let fixed: Vec<Var> = pair.fixed.iter().map(|t| tape.constant(t.clone())).collect();
    let moving: Vec<Var> = pair.moving.iter().map(|t| tape.constant(t.clone())).collect();
    let flows = model.forward(tape, vars, fixed[0], moving[0])?;
    let use_masks = !loss.gamma.is_empty();
    let mut terms = Vec::with_capacity(scales);
    for s in 0..scales {
        let warped = bilinear_warp(tape, moving[s], flows[s])?;
        let masks = match (&pair.masks, use_masks) {
            (Some((fm, mm)), true) => {
                let fm = tape.constant(fm[s].clone());
                let mm = tape.constant(mm[s].clone());
                Some((bilinear_warp(tape, mm, flows[s])?, fm))
            }
            _ => None,
        };
        terms.push(ScaleTerms {
            warped,
            fixed: fixed[s],
            field: flows[s],
            masks,
        });
    }
    let (unsup, report) = total_loss(tape, &terms, loss)?;
    match mode {
        TrainMode::Unsupervised => Ok(PairObjective {
            loss: unsup,
            report,
            epe: None,
        }),
        TrainMode::Supervised => {
            let gt = pair
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("supervised training needs ground-truth fields".into()))?;
            let mut sum: Option<Var> = None;
            for s in 0..scales {
                let target = tape.constant(gt[s].clone());
                let e = epe_loss(tape, flows[s], target)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
            let loss = sum.expect("at least one scale");
            let epe = tape.value(loss).item()? as f64;
            Ok(PairObjective {
                loss,
                report,
                epe: Some(epe),
            })
        }
    }
}

struct SampleResult {
    grads: Vec<Tensor>,
    report: LossReport,
    objective: f64,
}

fn sample_gradients(model: &RegModel, pair: &PreparedPair, config: &TrainConfig) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let obj = pair_objective(&mut tape, model, &vars, pair, &config.loss, config.mode)?;
    let objective = obj.epe.unwrap_or(obj.report.total);
    let grads = tape.backward(obj.loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
        .collect();
    Ok(SampleResult {
        grads,
        report: obj.report,
        objective,
    })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub adam: AdamState,
}

/// Mini-batch training with seeded shuffling and the halving schedule.
pub fn train(model: &mut RegModel, dataset: &PairDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, dataset, config, None)
}

/// [`train`] resuming from an existing optimizer state.
pub fn train_from(
    model: &mut RegModel,
    dataset: &PairDataset,
    config: &TrainConfig,
    adam: Option<AdamState>,
) -> Result<TrainOutcome> {
    let arch = model.arch().clone();
    config.validate(arch.levels)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let dims = dataset.dims().expect("non-empty");
    if dims != (arch.input_height, arch.input_width) {
        return Err(Error::shape(
            "train",
            format!("pairs of {}x{}", arch.input_height, arch.input_width),
            format!("{}x{}", dims.0, dims.1),
        ));
    }
    if config.mode == TrainMode::Supervised && !dataset.has_ground_truth() {
        return Err(Error::InvalidArgument("supervised training needs ground-truth fields for every pair".into()));
    }
    let prepared: Vec<PreparedPair> = dataset
        .pairs()
        .iter()
        .map(|p| PreparedPair::new(p, arch.levels))
        .collect::<Result<_>>()?;

    let mut adam = adam.unwrap_or_else(|| AdamState::new(config.initial_lr, config.weight_decay, model.params()));
    adam.weight_decay = config.weight_decay;
    let mut history = Vec::with_capacity(config.total_epochs());
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 1..=config.total_epochs() {
        adam.lr = config.lr_for_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut photo, mut smooth, mut overlap, mut total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &prepared[i], config))
                .collect();
            let mut grads: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
            let inv = 1.0 / batch.len() as f32;
            for r in results {
                let r = r?;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv);
                }
                photo += r.report.photometric_total();
                smooth += r.report.smooth_total();
                overlap += r.report.overlap_total();
                total += r.objective;
            }
            if let StepOutcome::Skipped { param } = adam.step(model.params_mut(), &grads)? {
                log::warn!("epoch {epoch}: non-finite gradient in {param}, batch skipped");
            }
        }
        let n = prepared.len() as f64;
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            photometric: photo / n,
            smooth: smooth / n,
            overlap: overlap / n,
            total: total / n,
        };
        log::info!(
            "epoch {epoch}/{}: lr {:.2e} total {:.6} photometric {:.6} smooth {:.6}",
            config.total_epochs(),
            record.lr,
            record.total,
            record.photometric,
            record.smooth
        );
        if !record.total.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: loss became non-finite")));
        }
        if let Some(first) = history.first().map(|r: &EpochRecord| r.total) {
            if record.total > DIVERGENCE_FACTOR * first {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}: mean loss {:.6} exceeds {DIVERGENCE_FACTOR}x the first epoch's {first:.6}",
                    record.total
                )));
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome { history, adam })
}
