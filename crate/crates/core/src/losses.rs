//! Registration losses: L1 photometric reconstruction, plain and edge-aware
//! L1 field smoothness, ROI mask overlap, their multi-scale weighted sum, and
//! the supervised endpoint error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{forward_diff_values, Axis, Backward, Tape, Tensor, Var};

/// Added in quadrature to every endpoint residual so the EPE gradient stays
/// finite at zero error.
pub const EPE_STABILITY: f32 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothVariant {
    /// Plain L1 penalty on forward differences of the field.
    Normal,
    /// The same penalty down-weighted by `exp(-|grad I_F|)`.
    #[default]
    EdgeAware,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum over pixels.
    Sum,
    /// Sum divided by the number of pixels at that scale.
    #[default]
    MeanPerPixel,
}

impl Reduction {
    fn apply(self, tape: &mut Tape, summed: Var, pixels: usize) -> Var {
        match self {
            Reduction::Sum => summed,
            Reduction::MeanPerPixel => tape.scalar_mul(summed, 1.0 / pixels.max(1) as f32),
        }
    }
}

/// Per-scale weights of the total loss. Index 0 is the finest scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    /// Overlap weights; empty disables the mask term entirely.
    #[serde(default)]
    pub gamma: Vec<f32>,
    #[serde(default)]
    pub smooth: SmoothVariant,
    #[serde(default)]
    pub reduction: Reduction,
}

impl LossConfig {
    /// `alpha = 1`, `beta = 0.05` at every scale, no overlap term.
    pub fn defaults(scale_count: usize) -> Self {
        LossConfig {
            alpha: vec![1.0; scale_count],
            beta: vec![0.05; scale_count],
            gamma: Vec::new(),
            smooth: SmoothVariant::default(),
            reduction: Reduction::default(),
        }
    }

    pub fn scale_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn gamma(&self, s: usize) -> f32 {
        self.gamma.get(s).copied().unwrap_or(0.0)
    }

    /// Validates lengths and signs; errors carry the offending path.
    pub fn validate(&self, scale_count: usize) -> Result<()> {
        let lists: [(&str, &[f32], bool); 3] = [
            ("alpha", &self.alpha, false),
            ("beta", &self.beta, false),
            ("gamma", &self.gamma, true),
        ];
        for (name, list, may_be_empty) in lists {
            if list.len() != scale_count && !(may_be_empty && list.is_empty()) {
                return Err(Error::Config {
                    path: format!("loss.{name}"),
                    reason: format!("expected {scale_count} per-scale weights, found {}", list.len()),
                });
            }
            if let Some(i) = list.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::Config {
                    path: format!("loss.{name}[{i}]"),
                    reason: format!("weight {} must be finite and non-negative", list[i]),
                });
            }
        }
        Ok(())
    }
}

/// Unweighted loss values per scale plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photometric: Vec<f64>,
    pub smooth: Vec<f64>,
    pub overlap: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum recomputed from the per-scale entries.
    pub fn recomputed_total(&self, config: &LossConfig) -> f64 {
        (0..self.photometric.len())
            .map(|s| {
                config.alpha[s] as f64 * self.photometric[s]
                    + config.beta[s] as f64 * self.smooth[s]
                    + config.gamma(s) as f64 * self.overlap[s]
            })
            .sum()
    }

    pub fn photometric_total(&self) -> f64 {
        self.photometric.iter().sum()
    }

    pub fn smooth_total(&self) -> f64 {
        self.smooth.iter().sum()
    }

    pub fn overlap_total(&self) -> f64 {
        self.overlap.iter().sum()
    }
}

fn same_shape(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", tape.value(a).shape()),
            format!("{:?}", tape.value(b).shape()),
        ));
    }
    Ok(())
}

fn l1_distance(op: &'static str, tape: &mut Tape, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
    same_shape(op, tape, a, b)?;
    let pixels = tape.value(a).numel();
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff);
    let sum = tape.reduce_sum(abs);
    Ok(reduction.apply(tape, sum, pixels))
}

/// L1 distance between the warped moving image and the fixed image.
pub fn photometric_loss(tape: &mut Tape, warped: Var, fixed: Var, reduction: Reduction) -> Result<Var> {
    l1_distance("photometric_loss", tape, warped, fixed, reduction)
}

/// L1 distance between the (soft) warped moving mask and the fixed mask.
pub fn overlap_loss(tape: &mut Tape, warped_mask: Var, fixed_mask: Var, reduction: Reduction) -> Result<Var> {
    l1_distance("overlap_loss", tape, warped_mask, fixed_mask, reduction)
}

fn field_dims(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = t.dims4(op)?;
    if c != 2 {
        return Err(Error::shape(op, "field [N, 2, H, W]", format!("{:?}", t.shape())));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape(op, "field of at least 2x2", format!("{:?}", t.shape())));
    }
    Ok([n, c, h, w])
}

/// Edge weights `exp(-|d I|)` along `axis`, repeated for both field channels.
fn edge_weights(fixed: &Tensor, axis: Axis) -> Result<Tensor> {
    let d = forward_diff_values(fixed, axis)?;
    let [n, _, h, w] = d.dims4("smooth_e")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * d.numel());
    for b in 0..n {
        let src = &d.data()[b * plane..(b + 1) * plane];
        for _ in 0..2 {
            data.extend(src.iter().map(|v| (-v.abs()).exp()));
        }
    }
    Tensor::new(vec![n, 2, h, w], data)
}

fn smoothness(tape: &mut Tape, field: Var, weights: Option<[Tensor; 2]>, reduction: Reduction) -> Result<Var> {
    let [n, _, h, w] = field_dims("smoothness", tape.value(field))?;
    let mut terms = Vec::with_capacity(2);
    let mut weights = weights.map(|[wx, wy]| [Some(wx), Some(wy)]).unwrap_or([None, None]);
    for (axis, weight) in [Axis::X, Axis::Y].into_iter().zip(weights.iter_mut()) {
        let d = tape.forward_diff(field, axis)?;
        let mut a = tape.abs(d);
        if let Some(wt) = weight.take() {
            let wt = tape.constant(wt);
            a = tape.mul(a, wt)?;
        }
        terms.push(tape.reduce_sum(a));
    }
    let sum = tape.add(terms[0], terms[1])?;
    Ok(reduction.apply(tape, sum, n * h * w))
}

/// `sum |dx u| + |dy u|` over both field components, forward differences on
/// the valid region only.
pub fn smooth_n(tape: &mut Tape, field: Var, reduction: Reduction) -> Result<Var> {
    smoothness(tape, field, None, reduction)
}

/// Edge-aware variant of [`smooth_n`]: each difference is weighted by
/// `exp(-|d I_F|)` along the same axis. No gradient flows into `fixed`.
pub fn smooth_e(tape: &mut Tape, field: Var, fixed: &Tensor, reduction: Reduction) -> Result<Var> {
    let [n, _, h, w] = field_dims("smooth_e", tape.value(field))?;
    if fixed.shape() != [n, 1, h, w] {
        return Err(Error::shape("smooth_e", format!("fixed [{n}, 1, {h}, {w}]"), format!("{:?}", fixed.shape())));
    }
    let weights = [edge_weights(fixed, Axis::X)?, edge_weights(fixed, Axis::Y)?];
    smoothness(tape, field, Some(weights), reduction)
}

struct EndpointError {
    pixels: usize,
}

impl Backward for EndpointError {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let [n, _, h, w] = p.dims4("epe_loss").expect("rank 4");
        let plane = h * w;
        let scale = grad[0] / self.pixels as f32;
        let mut gp = vec![0.0f32; p.numel()];
        for b in 0..n {
            let base = b * 2 * plane;
            for i in 0..plane {
                let dx = p.data()[base + i] - t.data()[base + i];
                let dy = p.data()[base + plane + i] - t.data()[base + plane + i];
                let r = (dx * dx + dy * dy + EPE_STABILITY * EPE_STABILITY).sqrt();
                gp[base + i] = scale * dx / r;
                gp[base + plane + i] = scale * dy / r;
            }
        }
        let gt = needs[1].then(|| gp.iter().map(|v| -v).collect());
        vec![needs[0].then_some(gp), gt]
    }
}

/// Mean over pixels of the Euclidean distance between predicted and target
/// displacement vectors.
pub fn epe_loss(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var> {
    same_shape("epe_loss", tape, predicted, target)?;
    let (p, t) = (tape.value(predicted), tape.value(target));
    let [n, _, h, w] = field_dims("epe_loss", p)?;
    let plane = h * w;
    let mut sum = 0.0f64;
    for b in 0..n {
        let base = b * 2 * plane;
        for i in 0..plane {
            let dx = (p.data()[base + i] - t.data()[base + i]) as f64;
            let dy = (p.data()[base + plane + i] - t.data()[base + plane + i]) as f64;
            let eps = EPE_STABILITY as f64;
            sum += (dx * dx + dy * dy + eps * eps).sqrt();
        }
    }
    let pixels = n * plane;
    let value = Tensor::scalar((sum / pixels as f64) as f32);
    Ok(tape.record(value, &[predicted, target], EndpointError { pixels }))
}

/// Everything the total loss needs at one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleTerms {
    pub warped: Var,
    pub fixed: Var,
    pub field: Var,
    /// `(warped moving mask, fixed mask)`, both soft `[N, 1, H, W]`.
    pub masks: Option<(Var, Var)>,
}

/// Weighted multi-scale sum of photometric, smoothness and (when masks are
/// given and weighted) overlap losses.
pub fn total_loss(tape: &mut Tape, scales: &[ScaleTerms], config: &LossConfig) -> Result<(Var, LossReport)> {
    if scales.len() != config.scale_count() {
        return Err(Error::shape("total_loss", format!("{} scales", config.scale_count()), scales.len()));
    }
    config.validate(scales.len())?;
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for (s, terms) in scales.iter().enumerate() {
        let photo = photometric_loss(tape, terms.warped, terms.fixed, config.reduction)?;
        let smooth = match config.smooth {
            SmoothVariant::Normal => smooth_n(tape, terms.field, config.reduction)?,
            SmoothVariant::EdgeAware => {
                let fixed = tape.value(terms.fixed).clone();
                smooth_e(tape, terms.field, &fixed, config.reduction)?
            }
        };
        report.photometric.push(tape.value(photo).item()? as f64);
        report.smooth.push(tape.value(smooth).item()? as f64);

        let wp = tape.scalar_mul(photo, config.alpha[s]);
        let ws = tape.scalar_mul(smooth, config.beta[s]);
        let mut scale_total = tape.add(wp, ws)?;

        let gamma = config.gamma(s);
        match terms.masks {
            Some((warped_mask, fixed_mask)) => {
                let overlap = overlap_loss(tape, warped_mask, fixed_mask, config.reduction)?;
                report.overlap.push(tape.value(overlap).item()? as f64);
                if gamma > 0.0 {
                    let wo = tape.scalar_mul(overlap, gamma);
                    scale_total = tape.add(scale_total, wo)?;
                }
            }
            None => report.overlap.push(0.0),
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, scale_total)?,
            None => scale_total,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("total_loss needs at least one scale".into()))?;
    report.total = tape.value(total).item()? as f64;
    Ok((total, report))
}
