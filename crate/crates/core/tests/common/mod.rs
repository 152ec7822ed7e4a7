//! Shared helpers for the integration suites: straightforward f64 reference
//! implementations of every differentiable operation, and a central
//! difference gradient checker built on them.

#![allow(clippy::needless_range_loop, dead_code)]

use deformreg::ndgrad::{Tape, Tensor, Var};
use deformreg::{LossConfig, RegModel, SmoothVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Dense `[N, C, H, W]` array in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Arr {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Arr {
            shape: [s[0], s[1], s[2], s[3]],
            data: to_f64(t),
        }
    }

    pub fn with_data(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Arr { shape, data }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, cc, h, w] = self.shape;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(self.shape, other.shape);
        Arr {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Reference operations, written as directly from their definitions as
/// possible.
pub mod reference {
    use super::Arr;

    /// Cross-correlation with zero padding; `weight` is `[K, C, kh, kw]`.
    pub fn conv2d(x: &Arr, weight: &Arr, bias: &[f64], stride: usize, pad: usize) -> Arr {
        let [n, c, h, w] = x.shape;
        let [k, wc, kh, kw] = weight.shape;
        assert_eq!(c, wc);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Arr::zeros([n, k, oh, ow]);
        for b in 0..n {
            for o in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at(b, ci, iy as usize, ix as usize) * weight.at(o, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        *out.at_mut(b, o, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution; `weight` is
    /// `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(x: &Arr, weight: &Arr, bias: &[f64], stride: usize, pad: usize) -> Arr {
        let [n, cin, h, w] = x.shape;
        let [wc, cout, kh, kw] = weight.shape;
        assert_eq!(cin, wc);
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        let mut out = Arr::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        *out.at_mut(b, o, y, xx) = bias[o];
                    }
                }
            }
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x.at(b, ci, iy, ix);
                        for o in 0..cout {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        *out.at_mut(b, o, oy as usize, ox as usize) += v * weight.at(ci, o, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn leaky_relu(x: &Arr, slope: f64) -> Arr {
        x.map(|v| if v > 0.0 { v } else { slope * v })
    }

    pub fn concat(parts: &[&Arr]) -> Arr {
        let [n, _, h, w] = parts[0].shape;
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Arr::zeros([n, c, h, w]);
        for b in 0..n {
            let mut base = 0;
            for p in parts {
                for ci in 0..p.shape[1] {
                    for y in 0..h {
                        for x in 0..w {
                            *out.at_mut(b, base + ci, y, x) = p.at(b, ci, y, x);
                        }
                    }
                }
                base += p.shape[1];
            }
        }
        out
    }

    /// `f(x + 1) - f(x)` along x (`dx = true`) or y.
    pub fn forward_diff(x: &Arr, dx: bool) -> Arr {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = if dx { (h, w - 1) } else { (h - 1, w) };
        let mut out = Arr::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let next = if dx { x.at(b, ci, y, xx + 1) } else { x.at(b, ci, y + 1, xx) };
                        *out.at_mut(b, ci, y, xx) = next - x.at(b, ci, y, xx);
                    }
                }
            }
        }
        out
    }

    fn sample(plane: impl Fn(usize, usize) -> f64, px: f64, py: f64, h: usize, w: usize) -> f64 {
        let px = px.clamp(0.0, (w - 1) as f64);
        let py = py.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        (1.0 - fx) * (1.0 - fy) * plane(y0, x0)
            + fx * (1.0 - fy) * plane(y0, x1)
            + (1.0 - fx) * fy * plane(y1, x0)
            + fx * fy * plane(y1, x1)
    }

    /// `moving(x + u(x))`, bilinear, positions clamped to the image.
    pub fn warp(moving: &Arr, field: &Arr) -> Arr {
        let [n, c, h, w] = moving.shape;
        let mut out = Arr::zeros(moving.shape);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let px = x as f64 + field.at(b, 0, y, x);
                    let py = y as f64 + field.at(b, 1, y, x);
                    for ci in 0..c {
                        *out.at_mut(b, ci, y, x) = sample(|yy, xx| moving.at(b, ci, yy, xx), px, py, h, w);
                    }
                }
            }
        }
        out
    }

    /// 2x bilinear upsampling with half-pixel centres, magnitudes doubled.
    pub fn upsample_field(field: &Arr) -> Arr {
        let [n, c, h, w] = field.shape;
        let mut out = Arr::zeros([n, c, 2 * h, 2 * w]);
        for b in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let py = (y as f64 + 0.5) / 2.0 - 0.5;
                        let px = (x as f64 + 0.5) / 2.0 - 0.5;
                        *out.at_mut(b, ci, y, x) = 2.0 * sample(|yy, xx| field.at(b, ci, yy, xx), px, py, h, w);
                    }
                }
            }
        }
        out
    }

    pub fn avg_pool2(x: &Arr) -> Arr {
        let [n, c, h, w] = x.shape;
        let mut out = Arr::zeros([n, c, h / 2, w / 2]);
        for b in 0..n {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        *out.at_mut(b, ci, y, xx) = 0.25
                            * (x.at(b, ci, 2 * y, 2 * xx)
                                + x.at(b, ci, 2 * y, 2 * xx + 1)
                                + x.at(b, ci, 2 * y + 1, 2 * xx)
                                + x.at(b, ci, 2 * y + 1, 2 * xx + 1));
                    }
                }
            }
        }
        out
    }

    /// Mean absolute difference per pixel.
    pub fn photometric(warped: &Arr, fixed: &Arr) -> f64 {
        warped.zip(fixed, |a, b| (a - b).abs()).sum() / warped.data.len() as f64
    }

    /// Field smoothness, per-pixel mean over `N * H * W`; edge-aware when
    /// `fixed` is given.
    pub fn smoothness(field: &Arr, fixed: Option<&Arr>) -> f64 {
        let [n, _, h, w] = field.shape;
        let mut total = 0.0;
        for dx in [true, false] {
            let d = forward_diff(field, dx);
            let weights = fixed.map(|f| forward_diff(f, dx).map(|v| (-v.abs()).exp()));
            let [_, c, oh, ow] = d.shape;
            for b in 0..n {
                for ci in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let wgt = weights.as_ref().map_or(1.0, |wt| wt.at(b, 0, y, x));
                            total += wgt * d.at(b, ci, y, x).abs();
                        }
                    }
                }
            }
        }
        total / (n * h * w) as f64
    }

    /// Mean endpoint error with the same stabilizer as the library.
    pub fn epe(pred: &Arr, target: &Arr, eps: f64) -> f64 {
        let [n, _, h, w] = pred.shape;
        let mut total = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let dx = pred.at(b, 0, y, x) - target.at(b, 0, y, x);
                    let dy = pred.at(b, 1, y, x) - target.at(b, 1, y, x);
                    total += (dx * dx + dy * dy + eps * eps).sqrt();
                }
            }
        }
        total / (n * h * w) as f64
    }
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Mismatching entries with a kink inside the difference stencil.
    pub near_kink: usize,
    /// Largest `|analytic - numeric| / max(ABS_TOL, REL_TOL * |numeric|)`.
    pub worst_ratio: f64,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.near_kink += other.near_kink;
        if other.worst_ratio > self.worst_ratio {
            self.worst_ratio = other.worst_ratio;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_ratio <= 1.0
    }
}

/// Compares `analytic[i]` with the central difference of `f` at `x[i]` for
/// every `i` in `indices`.
///
/// A mismatching entry is excluded, and counted in `near_kink`, only when
/// [`kink_within_step`] finds a non-differentiable point inside the
/// difference stencil.
pub fn check_entries(
    label: &str,
    x: &[f64],
    analytic: &[f32],
    indices: impl IntoIterator<Item = usize>,
    f: impl Fn(&[f64]) -> f64,
) -> GradReport {
    check_entries_with(ABS_TOL, REL_TOL, label, x, analytic, indices, f)
}

/// [`check_entries`] with explicit absolute and relative tolerances.
pub fn check_entries_with(
    abs_tol: f64,
    rel_tol: f64,
    label: &str,
    x: &[f64],
    analytic: &[f32],
    indices: impl IntoIterator<Item = usize>,
    f: impl Fn(&[f64]) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let mut buf = x.to_vec();
    for i in indices {
        let orig = buf[i];
        buf[i] = orig + FD_STEP;
        let fp = f(&buf);
        buf[i] = orig - FD_STEP;
        let fm = f(&buf);
        buf[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let tol = abs_tol.max(rel_tol * numeric.abs());
        let ratio = (analytic[i] as f64 - numeric).abs() / tol;
        if ratio > 1.0 && kink_within_step(&mut buf, i, &f, (analytic[i] as f64 - numeric).abs()) {
            report.near_kink += 1;
            continue;
        }
        report.checked += 1;
        if ratio > report.worst_ratio {
            report.worst_ratio = ratio;
            report.worst = format!("{label}[{i}]: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }
    report
}

/// Samples `f` at nine evenly spaced points across `x[i] +- FD_STEP`. On a
/// smooth function the second differences are all about equal; kinks make
/// them uneven. Returns true when the unevenness is large enough to account
/// for a central-difference error of `mismatch`.
pub fn kink_within_step(buf: &mut [f64], i: usize, f: &impl Fn(&[f64]) -> f64, mismatch: f64) -> bool {
    let delta = FD_STEP / 4.0;
    let orig = buf[i];
    let g: Vec<f64> = (-4..=4)
        .map(|k| {
            buf[i] = orig + k as f64 * delta;
            f(buf)
        })
        .collect();
    buf[i] = orig;
    let second: Vec<f64> = g.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    let mut sorted = second.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let peak = second.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // each kink adds its derivative jump times `delta` to one or two entries
    let roughness: f64 = second.iter().map(|v| (v - median).abs()).sum();
    roughness > 0.5 * peak && roughness > 1e-12 * (1.0 + g[4].abs()) && roughness / delta >= mismatch
}

/// Builds `sum(r * op(inputs))` on a tape for a fixed random projection
/// `r` and returns the analytic gradient of every input.
pub fn projected_gradients(
    inputs: &[Tensor],
    projection: &Tensor,
    op: impl Fn(&mut Tape, &[Var]) -> Var,
) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let value = tape.value(out).clone();
    let r = tape.constant(projection.clone());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.reduce_sum(prod);
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    (value, g)
}

/// Full gradient check of `op` against `reference`, both mapping the inputs
/// to an output tensor. Also verifies the forward values.
pub fn check_op(
    label: &str,
    inputs: &[Tensor],
    seed: u64,
    op: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> GradReport {
    let ref_inputs: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let expected = reference(&ref_inputs);
    let mut r = rng(seed ^ 0x5eed);
    let projection = random_tensor(&mut r, &[expected.len()], -1.0, 1.0);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let projection = projection.reshape(out_shape).unwrap();

    let (value, grads) = projected_gradients(inputs, &projection, &op);
    for (i, (&a, &b)) in value.data().iter().zip(&expected).enumerate() {
        assert!(
            (a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
            "{label}: forward mismatch at {i}: {a} vs reference {b}"
        );
    }
    let proj = to_f64(&projection);
    let mut report = GradReport::default();
    for (k, grad) in grads.iter().enumerate() {
        let f = |xk: &[f64]| {
            let mut all = ref_inputs.clone();
            all[k] = xk.to_vec();
            reference(&all).iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        report.merge(check_entries(&format!("{label}.input{k}"), &ref_inputs[k], grad.data(), 0..grad.numel(), f));
    }
    report
}

/// Network forward in f64, following the documented layout of
/// [`RegModel`], with parameters taken from the flat vector `flat` (model
/// storage order). Flows finest first.
pub fn reference_network(model: &RegModel, flat: &[f64], fixed: &Arr, moving: &Arr) -> Vec<Arr> {
    use reference::*;
    let arch = model.arch();
    let mut offset = 0;
    let mut named = std::collections::HashMap::new();
    for (name, t) in model.params() {
        let s = t.shape().to_vec();
        let data = flat[offset..offset + t.numel()].to_vec();
        offset += t.numel();
        named.insert(name.clone(), (s, data));
    }
    let weight = |name: &str| {
        let (s, d) = &named[&format!("{name}.weight")];
        Arr::with_data([s[0], s[1], s[2], s[3]], d.clone())
    };
    let bias = |name: &str| named[&format!("{name}.bias")].1.clone();
    let slope = arch.leaky_slope as f64;
    let conv = |name: &str, x: &Arr, stride: usize| conv2d(x, &weight(name), &bias(name), stride, 1);

    let levels = arch.levels;
    let mut skips = vec![leaky_relu(&conv("enc0.conv", &concat(&[fixed, moving]), 1), slope)];
    for l in 1..levels {
        let down = leaky_relu(&conv(&format!("enc{l}.down"), skips.last().unwrap(), 2), slope);
        skips.push(leaky_relu(&conv(&format!("enc{l}.conv"), &down, 1), slope));
    }
    let top = levels - 1;
    let mut features = skips[top].clone();
    let mut flow = conv(&format!("flow{top}"), &features, 1);
    let mut flows = vec![flow.clone()];
    for l in (0..top).rev() {
        let name = format!("dec{l}.up");
        let up = leaky_relu(&conv_transpose2d(&features, &weight(&name), &bias(&name), 2, 1), slope);
        let up_flow = upsample_field(&flow);
        features = concat(&[&skips[l], &up, &up_flow]);
        let residual = conv(&format!("flow{l}"), &features, 1);
        flow = up_flow.zip(&residual, |a, b| a + b);
        flows.push(flow.clone());
    }
    flows.reverse();
    flows
}

/// Multi-scale unsupervised objective in f64 over prebuilt pyramids.
pub fn reference_total(flows: &[Arr], fixed: &[Arr], moving: &[Arr], cfg: &LossConfig) -> f64 {
    let edge = cfg.smooth == SmoothVariant::EdgeAware;
    (0..flows.len())
        .map(|s| {
            let warped = reference::warp(&moving[s], &flows[s]);
            cfg.alpha[s] as f64 * reference::photometric(&warped, &fixed[s])
                + cfg.beta[s] as f64 * reference::smoothness(&flows[s], edge.then_some(&fixed[s]))
        })
        .sum()
}

pub fn flat_params(model: &RegModel) -> Vec<f64> {
    model.params().iter().flat_map(|(_, t)| to_f64(t)).collect()
}

fn arr(data: &[f64], shape: [usize; 4]) -> Arr {
    Arr::with_data(shape, data.to_vec())
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Gradient checks of every differentiable primitive and loss on random
/// inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    use deformreg::losses::{epe_loss, overlap_loss, photometric_loss, smooth_e, smooth_n, Reduction};
    use deformreg::ndgrad::Axis;
    use deformreg::warp::{bilinear_warp, upsample_field};

    let mut r = rng(seed);
    let mut out = Vec::new();

    let x = random_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    let (xs, ws) = (shape4(&x), shape4(&w));
    out.push((
        "conv2d 3x3",
        check_op("conv2d", &[x.clone(), w, b], seed, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap(), |i| {
            reference::conv2d(&arr(&i[0], xs), &arr(&i[1], ws), &i[2], 1, 1).data
        }),
    ));

    let w = random_tensor(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    let ws = shape4(&w);
    out.push((
        "conv2d 4x4 stride 2",
        check_op("conv2d_s2", &[x.clone(), w, b], seed, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1).unwrap(), |i| {
            reference::conv2d(&arr(&i[0], xs), &arr(&i[1], ws), &i[2], 2, 1).data
        }),
    ));

    let xt = random_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
    let w = random_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    let (xts, ws) = (shape4(&xt), shape4(&w));
    out.push((
        "conv_transpose2d",
        check_op("conv_t", &[xt, w, b], seed, |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap(), |i| {
            reference::conv_transpose2d(&arr(&i[0], xts), &arr(&i[1], ws), &i[2], 2, 1).data
        }),
    ));

    out.push((
        "leaky_relu",
        check_op("leaky", std::slice::from_ref(&x), seed, |t, v| t.leaky_relu(v[0], 0.1).unwrap(), |i| {
            reference::leaky_relu(&arr(&i[0], xs), 0.1).data
        }),
    ));
    out.push(("abs", check_op("abs", std::slice::from_ref(&x), seed, |t, v| t.abs(v[0]), |i| i[0].iter().map(|v| v.abs()).collect())));
    out.push((
        "exp_neg",
        check_op("exp_neg", std::slice::from_ref(&x), seed, |t, v| t.exp_neg(v[0]), |i| i[0].iter().map(|v| (-v).exp()).collect()),
    ));
    let y = random_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    out.push((
        "add/sub/mul",
        check_op(
            "binary",
            &[x.clone(), y.clone()],
            seed,
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(v[0], v[1]).unwrap();
                let p = t.mul(s, d).unwrap();
                t.scalar_mul(p, 0.5)
            },
            |i| i[0].iter().zip(&i[1]).map(|(a, b)| 0.5 * (a + b) * (a - b)).collect(),
        ),
    ));
    out.push((
        "reduce_sum/reduce_mean",
        check_op(
            "reduce",
            std::slice::from_ref(&x),
            seed,
            |t, v| {
                let m = t.reduce_mean(v[0]);
                let sq = t.mul(v[0], v[0]).unwrap();
                let s = t.reduce_sum(sq);
                t.add(m, s).unwrap()
            },
            |i| vec![i[0].iter().sum::<f64>() / i[0].len() as f64 + i[0].iter().map(|v| v * v).sum::<f64>()],
        ),
    ));
    let z = random_tensor(&mut r, &[1, 3, 6, 6], -1.0, 1.0);
    let zs = shape4(&z);
    out.push((
        "concat_channels",
        check_op("concat", &[x.clone(), z], seed, |t, v| t.concat_channels(&[v[0], v[1]]).unwrap(), |i| {
            reference::concat(&[&arr(&i[0], xs), &arr(&i[1], zs)]).data
        }),
    ));
    for (label, axis, along_x) in [("forward_diff x", Axis::X, true), ("forward_diff y", Axis::Y, false)] {
        out.push((
            label,
            check_op(label, std::slice::from_ref(&x), seed, move |t, v| t.forward_diff(v[0], axis).unwrap(), move |i| {
                reference::forward_diff(&arr(&i[0], xs), along_x).data
            }),
        ));
    }

    // Displacements up to 3 px on 8x8, so some samples clamp at the border.
    let moving = random_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0);
    let field = random_tensor(&mut r, &[2, 2, 8, 8], -3.0, 3.0);
    let (ms, fs) = (shape4(&moving), shape4(&field));
    out.push((
        "bilinear_warp",
        check_op("warp", &[moving.clone(), field.clone()], seed, |t, v| bilinear_warp(t, v[0], v[1]).unwrap(), |i| {
            reference::warp(&arr(&i[0], ms), &arr(&i[1], fs)).data
        }),
    ));
    let coarse = random_tensor(&mut r, &[1, 2, 4, 4], -2.0, 2.0);
    let cs = shape4(&coarse);
    out.push((
        "upsample_field",
        check_op("upsample", &[coarse], seed, |t, v| upsample_field(t, v[0]).unwrap(), |i| {
            reference::upsample_field(&arr(&i[0], cs)).data
        }),
    ));

    let fixed = random_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0);
    let fxs = shape4(&fixed);
    let n_pix = fixed.numel() as f64;
    out.push((
        "photometric_loss",
        check_op(
            "photometric",
            &[moving.clone(), fixed.clone()],
            seed,
            |t, v| photometric_loss(t, v[0], v[1], Reduction::MeanPerPixel).unwrap(),
            |i| vec![reference::photometric(&arr(&i[0], ms), &arr(&i[1], fxs))],
        ),
    ));
    out.push((
        "overlap_loss",
        check_op(
            "overlap",
            &[moving.clone(), fixed.clone()],
            seed,
            |t, v| overlap_loss(t, v[0], v[1], Reduction::Sum).unwrap(),
            move |i| vec![reference::photometric(&arr(&i[0], ms), &arr(&i[1], fxs)) * n_pix],
        ),
    ));
    out.push((
        "smooth_n",
        check_op(
            "smooth_n",
            std::slice::from_ref(&field),
            seed,
            |t, v| smooth_n(t, v[0], Reduction::MeanPerPixel).unwrap(),
            |i| vec![reference::smoothness(&arr(&i[0], fs), None)],
        ),
    ));
    let fixed_ref = Arr::from_tensor(&fixed);
    out.push((
        "smooth_e",
        check_op(
            "smooth_e",
            std::slice::from_ref(&field),
            seed,
            |t, v| smooth_e(t, v[0], &fixed, Reduction::MeanPerPixel).unwrap(),
            |i| vec![reference::smoothness(&arr(&i[0], fs), Some(&fixed_ref))],
        ),
    ));
    let target = random_tensor(&mut r, &[2, 2, 8, 8], -3.0, 3.0);
    out.push((
        "epe_loss",
        check_op("epe", &[field, target], seed, |t, v| epe_loss(t, v[0], v[1]).unwrap(), |i| {
            vec![reference::epe(&arr(&i[0], fs), &arr(&i[1], fs), deformreg::losses::EPE_STABILITY as f64)]
        }),
    ));
    out
}

/// Model on 16x16 inputs with two levels whose flow heads and biases are
/// randomized, so flows are nonzero and the warp sees fractional positions.
pub fn perturbed_model(seed: u64) -> RegModel {
    use deformreg::ArchConfig;
    let arch = ArchConfig {
        levels: 2,
        base_channels: 4,
        input_height: 16,
        input_width: 16,
        ..ArchConfig::default()
    };
    let mut model = RegModel::init(arch, seed).unwrap();
    let mut r = rng(seed ^ 0xf10);
    for (name, t) in model.params_mut() {
        let bound = if name.starts_with("flow") { 0.3 } else if name.ends_with(".bias") { 0.1 } else { continue };
        for v in t.data_mut() {
            *v = r.gen_range(-bound..bound);
        }
    }
    model
}

/// Smooth random 16x16 test image in `[0, 1]`.
pub fn smooth_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> deformreg::Image2D {
    let phases: Vec<f32> = (0..4).map(|_| r.gen_range(0.0..std::f32::consts::TAU)).collect();
    let freqs: Vec<f32> = (0..4).map(|_| r.gen_range(0.2..0.7)).collect();
    deformreg::Image2D::from_fn(h, w, |x, y| {
        let (x, y) = (x as f32, y as f32);
        let v = (freqs[0] * x + phases[0]).sin() * (freqs[1] * y + phases[1]).cos()
            + 0.5 * (freqs[2] * (x + y) + phases[2]).sin()
            + 0.3 * (freqs[3] * (x - y) + phases[3]).cos();
        0.5 + 0.27 * v
    })
    .unwrap()
}

/// Gradient of the full unsupervised objective (network, warp at every
/// scale, weighted photometric and edge-aware smoothness terms) with respect
/// to `per_tensor` random entries of every parameter tensor.
pub fn pipeline_check(seed: u64, per_tensor: usize) -> GradReport {
    use deformreg::losses::{total_loss, ScaleTerms};
    use deformreg::pyramid::tensor_pyramid;
    use deformreg::warp::bilinear_warp;

    let model = perturbed_model(seed);
    let mut r = rng(seed ^ 0x1a6e);
    let fixed = smooth_image(&mut r, 16, 16).to_tensor();
    let moving = smooth_image(&mut r, 16, 16).to_tensor();
    let cfg = LossConfig::defaults(2);

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let f = tape.constant(fixed.clone());
    let m = tape.constant(moving.clone());
    let flows = model.forward(&mut tape, &vars, f, m).unwrap();
    let fixed_pyr = tensor_pyramid(&fixed, 2).unwrap();
    let moving_pyr = tensor_pyramid(&moving, 2).unwrap();
    let flow_values: Vec<Tensor> = flows.iter().map(|&v| tape.value(v).clone()).collect();
    let mut terms = Vec::new();
    for s in 0..2 {
        let ms = tape.constant(moving_pyr[s].clone());
        let fs = tape.constant(fixed_pyr[s].clone());
        let warped = bilinear_warp(&mut tape, ms, flows[s]).unwrap();
        terms.push(ScaleTerms {
            warped,
            fixed: fs,
            field: flows[s],
            masks: None,
        });
    }
    let (loss, report) = total_loss(&mut tape, &terms, &cfg).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f32> = vars
        .iter()
        .zip(model.params())
        .flat_map(|(&v, (_, t))| grads.get_or_zeros(v, t).into_data())
        .collect();

    let flat = flat_params(&model);
    let fixed_arr = Arr::from_tensor(&fixed);
    let moving_arr = Arr::from_tensor(&moving);
    let fixed_ref = vec![fixed_arr.clone(), reference::avg_pool2(&fixed_arr)];
    let moving_ref = vec![moving_arr.clone(), reference::avg_pool2(&moving_arr)];

    let ref_flows = reference_network(&model, &flat, &fixed_arr, &moving_arr);
    for (s, (a, b)) in flow_values.iter().zip(&ref_flows).enumerate() {
        for (x, y) in a.data().iter().zip(&b.data) {
            assert!((*x as f64 - y).abs() < 1e-4 * (1.0 + y.abs()), "scale {s} flow {x} vs reference {y}");
        }
    }
    let ref_total = reference_total(&ref_flows, &fixed_ref, &moving_ref, &cfg);
    assert!((report.total - ref_total).abs() < 1e-4 * (1.0 + ref_total), "{} vs {ref_total}", report.total);

    let mut indices = Vec::new();
    let mut offset = 0;
    for (_, t) in model.params() {
        for _ in 0..per_tensor.min(t.numel()) {
            indices.push(offset + r.gen_range(0..t.numel()));
        }
        offset += t.numel();
    }
    indices.sort_unstable();
    indices.dedup();
    check_entries("pipeline", &flat, &analytic, indices, |p| {
        let flows = reference_network(&model, p, &fixed_arr, &moving_arr);
        reference_total(&flows, &fixed_ref, &moving_ref, &cfg)
    })
}
