use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::train::DIVERGENCE_FACTOR;
use crate::error::{Error, Result};
use crate::eval::SegMask;
use crate::image::{DeformationField, Image2D};
use crate::losses::{total_loss, LossConfig, LossReport, ScaleTerms};
use crate::ndgrad::{Tape, Tensor};
use crate::pyramid::{pad_to_pyramid, tensor_pyramid};
use crate::regnet::RegModel;
use crate::warp::{bilinear_warp, upsample_field_values, warp_image};

/// Settings of the coarse-to-fine per-pair optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectConfig {
    pub loss: LossConfig,
    /// Adam iterations per scale, finest first. A single entry applies to all.
    #[serde(default = "default_iterations")]
    pub iterations: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f32,
}

fn default_iterations() -> Vec<usize> {
    vec![200]
}

fn default_lr() -> f32 {
    0.1
}

impl DirectConfig {
    /// 200 iterations per scale at learning rate 0.1.
    pub fn new(loss: LossConfig) -> Self {
        DirectConfig {
            loss,
            iterations: default_iterations(),
            lr: default_lr(),
        }
    }

    pub fn iterations_at(&self, scale: usize) -> usize {
        match self.iterations.as_slice() {
            [n] => *n,
            list => list[scale],
        }
    }

    /// Step size at `scale`: `lr` is in finest-scale pixels, so it halves
    /// with every coarser scale.
    pub fn lr_at(&self, scale: usize) -> f32 {
        self.lr * 0.5f32.powi(scale as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.loss.scale_count();
        self.loss.validate(n)?;
        if self.iterations.len() != 1 && self.iterations.len() != n {
            return Err(Error::Config {
                path: "iterations".into(),
                reason: format!("expected 1 or {n} entries, got {}", self.iterations.len()),
            });
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config {
                path: "lr".into(),
                reason: "must be a positive number".into(),
            });
        }
        Ok(())
    }
}

/// Loss values observed while optimizing one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub scale: usize,
    pub start_loss: f64,
    /// Loss of the field handed to the next scale (the best one seen).
    pub end_loss: f64,
    /// Loss before every iteration, then after the last.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DirectOutcome {
    pub field: DeformationField,
    /// Per-scale terms of each scale's final field.
    pub report: LossReport,
    /// Coarsest scale first.
    pub levels: Vec<LevelTrace>,
}

/// Iterations averaged by the divergence guard; Adam's first steps move
/// every pixel by a full step, so single iterations may spike.
const DIVERGENCE_WINDOW: usize = 20;

/// Mirrors the training guard, whose reference is the first epoch's mean:
/// the reference is the mean of the first window, or the level's zero-field
/// loss if larger. A level handed a near-perfect field starts close to zero
/// and Adam's unit-size first steps would otherwise read as divergence.
fn diverged(history: &[f64], unregistered: f64) -> bool {
    if history.len() < 2 * DIVERGENCE_WINDOW {
        return false;
    }
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let reference = mean(&history[..DIVERGENCE_WINDOW]).max(unregistered);
    reference > 0.0 && mean(&history[history.len() - DIVERGENCE_WINDOW..]) > DIVERGENCE_FACTOR * reference
}

struct Evaluation {
    loss: f64,
    report: LossReport,
    grad: Tensor,
}

fn level_config(loss: &LossConfig, s: usize, masks: bool) -> LossConfig {
    LossConfig {
        alpha: vec![loss.alpha[s]],
        beta: vec![loss.beta[s]],
        gamma: if masks && !loss.gamma.is_empty() { vec![loss.gamma(s)] } else { Vec::new() },
        smooth: loss.smooth,
        reduction: loss.reduction,
    }
}

fn evaluate(
    field: &Tensor,
    fixed: &Tensor,
    moving: &Tensor,
    masks: Option<(&Tensor, &Tensor)>,
    config: &LossConfig,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let u = tape.param(field.clone());
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let warped = bilinear_warp(&mut tape, m, u)?;
    let masks = match masks {
        Some((fm, mm)) if !config.gamma.is_empty() => {
            let fm = tape.constant(fm.clone());
            let mm = tape.constant(mm.clone());
            Some((bilinear_warp(&mut tape, mm, u)?, fm))
        }
        _ => None,
    };
    let terms = [ScaleTerms {
        warped,
        fixed: f,
        field: u,
        masks,
    }];
    let (total, report) = total_loss(&mut tape, &terms, config)?;
    let loss = report.total;
    let grads = tape.backward(total)?;
    Ok(Evaluation {
        loss,
        report,
        grad: grads.get_or_zeros(u, field),
    })
}

/// Coarse-to-fine optimization of the field itself: zero start at the
/// coarsest scale, Adam on that scale's loss terms, best field upsampled to
/// initialize the next finer scale.
pub fn optimize_field(
    fixed: &Image2D,
    moving: &Image2D,
    masks: Option<(&SegMask, &SegMask)>,
    config: &DirectConfig,
) -> Result<DirectOutcome> {
    config.validate()?;
    if fixed.dims() != moving.dims() {
        return Err(Error::shape(
            "optimize_field",
            format!("moving {:?}", fixed.dims()),
            format!("{:?}", moving.dims()),
        ));
    }
    let n = config.loss.scale_count();
    let fixed_pyr = tensor_pyramid(&fixed.to_tensor(), n)?;
    let moving_pyr = tensor_pyramid(&moving.to_tensor(), n)?;
    let mask_pyr = match masks {
        Some((fm, mm)) => {
            if fm.dims() != fixed.dims() || mm.dims() != fixed.dims() {
                return Err(Error::shape(
                    "optimize_field",
                    format!("masks {:?}", fixed.dims()),
                    format!("{:?} and {:?}", fm.dims(), mm.dims()),
                ));
            }
            Some((
                tensor_pyramid(&fm.image().to_tensor(), n)?,
                tensor_pyramid(&mm.image().to_tensor(), n)?,
            ))
        }
        None => None,
    };

    let mut report = LossReport {
        photometric: vec![0.0; n],
        smooth: vec![0.0; n],
        overlap: vec![0.0; n],
        total: 0.0,
    };
    let mut levels = Vec::with_capacity(n);
    let mut best_field: Option<DeformationField> = None;
    for s in (0..n).rev() {
        let [_, _, h, w] = fixed_pyr[s].dims4("optimize_field")?;
        let init = match &best_field {
            Some(coarser) => upsample_field_values(coarser),
            None => DeformationField::zeros(h, w),
        };
        let level_masks = mask_pyr.as_ref().map(|(f, m)| (&f[s], &m[s]));
        let cfg = level_config(&config.loss, s, level_masks.is_some());

        let mut params = vec![("field".to_string(), init.to_tensor())];
        let mut adam = AdamState::new(config.lr_at(s), 0.0, &params);
        let mut history = Vec::new();
        let mut best: Option<(f64, Tensor, LossReport)> = None;
        let iterations = config.iterations_at(s);
        let unregistered = match best_field {
            Some(_) => evaluate(&Tensor::zeros(vec![1, 2, h, w]), &fixed_pyr[s], &moving_pyr[s], level_masks, &cfg)?.loss,
            None => 0.0,
        };
        for it in 0..=iterations {
            let e = evaluate(&params[0].1, &fixed_pyr[s], &moving_pyr[s], level_masks, &cfg)?;
            if !e.loss.is_finite() {
                return Err(Error::Numerical(format!("scale {s}: loss became non-finite at iteration {it}")));
            }
            history.push(e.loss);
            if diverged(&history, unregistered) {
                return Err(Error::Numerical(format!(
                    "scale {s}: optimization diverged by iteration {it} (mean loss of the last {DIVERGENCE_WINDOW} \
                     iterations exceeds {DIVERGENCE_FACTOR}x that of the first {DIVERGENCE_WINDOW})"
                )));
            }
            if best.as_ref().is_none_or(|(b, _, _)| e.loss < *b) {
                best = Some((e.loss, params[0].1.clone(), e.report));
            }
            if it < iterations {
                adam.step(&mut params, &[e.grad])?;
            }
        }
        let (end_loss, field, level_report) = best.expect("at least one evaluation");
        log::debug!("scale {s}: loss {:.6} -> {end_loss:.6}", history[0]);
        report.photometric[s] = level_report.photometric[0];
        report.smooth[s] = level_report.smooth[0];
        report.overlap[s] = level_report.overlap[0];
        report.total += end_loss;
        levels.push(LevelTrace {
            scale: s,
            start_loss: history[0],
            end_loss,
            history,
        });
        best_field = Some(DeformationField::from_tensor(&field)?);
    }
    Ok(DirectOutcome {
        field: best_field.expect("at least one scale"),
        report,
        levels,
    })
}

/// Finest predicted field and the moving image warped by it.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub field: DeformationField,
    pub warped: Image2D,
}

/// One forward pass of `model`, padding to a pyramid-divisible size when
/// needed and cropping the field back.
pub fn register(model: &RegModel, fixed: &Image2D, moving: &Image2D) -> Result<Registration> {
    if fixed.dims() != moving.dims() {
        return Err(Error::shape("register", format!("moving {:?}", fixed.dims()), format!("{:?}", moving.dims())));
    }
    let levels = model.arch().levels;
    let (pf, crop) = pad_to_pyramid(fixed, levels)?;
    let (pm, _) = pad_to_pyramid(moving, levels)?;
    let flows = model.predict(&pf, &pm)?;
    let field = crop.crop_field(&flows[0])?;
    let warped = warp_image(moving, &field)?;
    Ok(Registration { field, warped })
}
