//! Differentiable bilinear warping and deformation-field algebra.
//!
//! The warped image is `moving(x + u(x))`: the field is indexed on the fixed
//! grid and points into the moving image. Samples that fall outside the
//! image are clamped to the border.

use crate::error::{Error, Result};
use crate::eval::{Landmark, LandmarkSet};
use crate::image::{DeformationField, Image2D};
use crate::ndgrad::{Backward, Tape, Tensor, Var};
use crate::pyramid::avg_pool2_planes;

/// Threshold applied after warping a binary mask.
pub const MASK_THRESHOLD: f32 = 0.5;

const INVERT_MAX_ITERS: usize = 20;
const INVERT_TOL: f32 = 1e-3;

/// Interpolation taps for a continuous coordinate on a grid of `size`
/// samples: `(i0, i1, frac)` after clamping to `[0, size - 1]`.
#[inline]
pub(crate) fn taps(pos: f32, size: usize) -> (usize, usize, f32) {
    let max = (size - 1) as f32;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - i0 as f32)
}

#[inline]
fn inside(pos: f32, size: usize) -> bool {
    pos >= 0.0 && pos <= (size - 1) as f32
}

/// Bilinear sample of one plane. Clamped to the range of the four taps so
/// rounding never leaves the input range.
#[inline]
fn sample_plane(plane: &[f32], width: usize, t: &SampleTaps) -> f32 {
    let i00 = plane[t.y0 * width + t.x0];
    let i01 = plane[t.y0 * width + t.x1];
    let i10 = plane[t.y1 * width + t.x0];
    let i11 = plane[t.y1 * width + t.x1];
    let top = i00 + t.fx * (i01 - i00);
    let bottom = i10 + t.fx * (i11 - i10);
    let v = top + t.fy * (bottom - top);
    let lo = i00.min(i01).min(i10).min(i11);
    let hi = i00.max(i01).max(i10).max(i11);
    v.clamp(lo, hi)
}

struct SampleTaps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f32,
    fy: f32,
    in_x: bool,
    in_y: bool,
}

impl SampleTaps {
    #[inline]
    fn new(sx: f32, sy: f32, height: usize, width: usize) -> Self {
        let (x0, x1, fx) = taps(sx, width);
        let (y0, y1, fy) = taps(sy, height);
        SampleTaps {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            in_x: inside(sx, width),
            in_y: inside(sy, height),
        }
    }
}

fn check_warp_shapes(moving: &Tensor, field: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = moving.dims4("bilinear_warp")?;
    if field.shape() != [n, 2, h, w] {
        return Err(Error::shape(
            "bilinear_warp",
            format!("field [{n}, 2, {h}, {w}]"),
            format!("{:?}", field.shape()),
        ));
    }
    Ok([n, c, h, w])
}

/// Forward bilinear warp on raw tensors `moving [N, C, H, W]`,
/// `field [N, 2, H, W]`.
pub fn warp_values(moving: &Tensor, field: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = check_warp_shapes(moving, field)?;
    let plane = h * w;
    let (md, fd) = (moving.data(), field.data());
    let mut out = vec![0.0f32; moving.numel()];
    for b in 0..n {
        let fb = &fd[b * 2 * plane..(b + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let t = SampleTaps::new(x as f32 + fb[i], y as f32 + fb[plane + i], h, w);
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    out[off + i] = sample_plane(&md[off..off + plane], w, &t);
                }
            }
        }
    }
    Tensor::new(moving.shape().to_vec(), out)
}

struct BilinearWarp;

impl Backward for BilinearWarp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (moving, field) = (inputs[0], inputs[1]);
        let [n, c, h, w] = moving.dims4("bilinear_warp").expect("rank 4");
        let plane = h * w;
        let (md, fd) = (moving.data(), field.data());
        let mut gm = needs[0].then(|| vec![0.0f32; moving.numel()]);
        let mut gf = needs[1].then(|| vec![0.0f32; field.numel()]);
        for b in 0..n {
            let fb = &fd[b * 2 * plane..(b + 1) * 2 * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let t = SampleTaps::new(x as f32 + fb[i], y as f32 + fb[plane + i], h, w);
                    let (mut gdx, mut gdy) = (0.0f32, 0.0f32);
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let g = grad[off + i];
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(gm) = gm.as_mut() {
                            let gp = &mut gm[off..off + plane];
                            gp[t.y0 * w + t.x0] += g * (1.0 - t.fx) * (1.0 - t.fy);
                            gp[t.y0 * w + t.x1] += g * t.fx * (1.0 - t.fy);
                            gp[t.y1 * w + t.x0] += g * (1.0 - t.fx) * t.fy;
                            gp[t.y1 * w + t.x1] += g * t.fx * t.fy;
                        }
                        if gf.is_some() {
                            let p = &md[off..off + plane];
                            let i00 = p[t.y0 * w + t.x0];
                            let i01 = p[t.y0 * w + t.x1];
                            let i10 = p[t.y1 * w + t.x0];
                            let i11 = p[t.y1 * w + t.x1];
                            if t.in_x {
                                gdx += g * ((1.0 - t.fy) * (i01 - i00) + t.fy * (i11 - i10));
                            }
                            if t.in_y {
                                gdy += g * ((1.0 - t.fx) * (i10 - i00) + t.fx * (i11 - i01));
                            }
                        }
                    }
                    if let Some(gf) = gf.as_mut() {
                        gf[b * 2 * plane + i] += gdx;
                        gf[b * 2 * plane + plane + i] += gdy;
                    }
                }
            }
        }
        vec![gm, gf]
    }
}

/// Differentiable `moving(x + u(x))` on the tape, w.r.t. both the moving
/// intensities and the field.
pub fn bilinear_warp(tape: &mut Tape, moving: Var, field: Var) -> Result<Var> {
    let value = warp_values(tape.value(moving), tape.value(field))?;
    Ok(tape.record(value, &[moving, field], BilinearWarp))
}

/// Non-differentiable warp of an image.
pub fn warp_image(moving: &Image2D, field: &DeformationField) -> Result<Image2D> {
    if moving.dims() != field.dims() {
        return Err(Error::shape(
            "warp_image",
            format!("field {:?}", moving.dims()),
            format!("{:?}", field.dims()),
        ));
    }
    let out = warp_values(&moving.to_tensor(), &field.to_tensor())?;
    Image2D::from_tensor(&out)
}

/// Warps a binary mask and re-binarizes it at [`MASK_THRESHOLD`].
pub fn warp_mask(mask: &Image2D, field: &DeformationField) -> Result<Image2D> {
    if let Some(v) = mask.pixels().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
    }
    let warped = warp_image(mask, field)?;
    Image2D::from_fn(mask.height(), mask.width(), |x, y| {
        if warped.get(x, y) >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-axis interpolation table for 2x upsampling with half-pixel centres:
/// fine sample `i` sits at coarse coordinate `(i + 0.5) / 2 - 0.5`.
fn upsample_taps(coarse: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * coarse).map(|i| taps((i as f32 + 0.5) * 0.5 - 0.5, coarse)).collect()
}

fn upsample_values(field: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = field.dims4("upsample_field")?;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let d = field.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let src = &d[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
                let bottom = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
                out.push(2.0 * (top + fy * (bottom - top)));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

struct UpsampleField;

impl Backward for UpsampleField {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let [n, c, h, w] = inputs[0].dims4("upsample_field").expect("rank 4");
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let ow = 2 * w;
        let mut g = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            let dst = &mut g[p * h * w..(p + 1) * h * w];
            let src = &grad[p * 4 * h * w..(p + 1) * 4 * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = 2.0 * src[oy * ow + ox];
                    dst[y0 * w + x0] += v * (1.0 - fx) * (1.0 - fy);
                    dst[y0 * w + x1] += v * fx * (1.0 - fy);
                    dst[y1 * w + x0] += v * (1.0 - fx) * fy;
                    dst[y1 * w + x1] += v * fx * fy;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Bilinear 2x upsampling of `[N, 2, h, w]` to `[N, 2, 2h, 2w]` with
/// displacements doubled so they stay in pixels of the finer grid.
pub fn upsample_field(tape: &mut Tape, field: Var) -> Result<Var> {
    let value = upsample_values(tape.value(field))?;
    Ok(tape.record(value, &[field], UpsampleField))
}

/// Non-differentiable counterpart of [`upsample_field`].
pub fn upsample_field_values(field: &DeformationField) -> DeformationField {
    let t = upsample_values(&field.to_tensor()).expect("rank 4");
    DeformationField::from_tensor(&t).expect("field shape")
}

/// 2x2 average pooling with displacements halved; the inverse grid change
/// of [`upsample_field`].
pub fn downsample_field(field: &DeformationField) -> Result<DeformationField> {
    let (h, w) = field.dims();
    let t = field.to_tensor();
    let pooled = avg_pool2_planes(t.data(), 2, h, w)?;
    let halved: Vec<f32> = pooled.iter().map(|v| v * 0.5).collect();
    DeformationField::from_planar(h / 2, w / 2, &halved)
}

/// Outcome of [`invert_field`].
#[derive(Clone, Debug, PartialEq)]
pub struct InversionReport {
    pub iterations: usize,
    /// Largest per-pixel change in the final iteration.
    pub last_update: f32,
    /// `max |u(x + v(x)) + v(x)|` over the grid.
    pub residual: f32,
    pub converged: bool,
}

/// Fixed-point inversion `v <- -u(x + v)` starting from zero, so that
/// `y = x + v(x)` satisfies `y + u(y) = x`.
///
/// Stops after 20 iterations or once the largest update drops below 1e-3
/// px. Non-convergence is reported, not treated as an error.
pub fn invert_field(field: &DeformationField) -> (DeformationField, InversionReport) {
    invert_field_with(field, INVERT_MAX_ITERS, INVERT_TOL)
}

/// [`invert_field`] with explicit iteration cap and tolerance.
pub fn invert_field_with(field: &DeformationField, max_iters: usize, tol: f32) -> (DeformationField, InversionReport) {
    let (h, w) = field.dims();
    let mut v = vec![[0.0f32; 2]; h * w];
    let mut report = InversionReport {
        iterations: 0,
        last_update: f32::INFINITY,
        residual: 0.0,
        converged: false,
    };
    for it in 1..=max_iters {
        let mut max_update = 0.0f32;
        let next: Vec<[f32; 2]> = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                let u = field.sample(x + v[i][0], y + v[i][1]);
                let nv = [-u[0], -u[1]];
                max_update = max_update.max((nv[0] - v[i][0]).abs()).max((nv[1] - v[i][1]).abs());
                nv
            })
            .collect();
        v = next;
        report.iterations = it;
        report.last_update = max_update;
        if max_update < tol {
            report.converged = true;
            break;
        }
    }
    report.residual = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            let u = field.sample(x + v[i][0], y + v[i][1]);
            (u[0] + v[i][0]).hypot(u[1] + v[i][1])
        })
        .fold(0.0, f32::max);
    if !report.converged {
        // Tight tolerances stall on f32 round-off; only a real residual is worth a warning.
        let level = if report.residual > INVERT_TOL { log::Level::Warn } else { log::Level::Debug };
        log::log!(
            level,
            "field inversion did not converge after {} iterations (last update {:.2e} px, residual {:.2e} px)",
            report.iterations,
            report.last_update,
            report.residual
        );
    }
    (DeformationField::new(h, w, v).expect("finite inverse"), report)
}

/// Maps landmarks given in moving-image coordinates to the coordinates of
/// the warped image.
pub fn apply_to_landmarks(landmarks: &LandmarkSet, field: &DeformationField) -> Result<LandmarkSet> {
    let (h, w) = field.dims();
    landmarks.check_bounds(w, h)?;
    let (inverse, _) = invert_field(field);
    let points = landmarks
        .points()
        .iter()
        .map(|p| {
            let v = inverse.sample(p.x, p.y);
            Landmark {
                index: p.index,
                x: p.x + v[0],
                y: p.y + v[1],
            }
        })
        .collect();
    LandmarkSet::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moving_2x2() -> Tensor {
        Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn half_pixel_shift_averages_corners() {
        let f = DeformationField::constant(2, 2, [0.5, 0.5]).to_tensor();
        let out = warp_values(&moving_2x2(), &f).unwrap();
        assert_eq!(out.data()[0], 1.5);
    }

    #[test]
    fn far_out_of_bounds_clamps_to_corner() {
        let f = DeformationField::constant(2, 2, [-10.0, -10.0]).to_tensor();
        let out = warp_values(&moving_2x2(), &f).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn zero_field_is_identity() {
        let m = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| (v as f32 * 0.13).sin()).collect()).unwrap();
        let out = warp_values(&m, &Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(warp_values(&moving_2x2(), &Tensor::zeros(vec![1, 2, 3, 3])).is_err());
        assert!(warp_values(&moving_2x2(), &Tensor::zeros(vec![1, 1, 2, 2])).is_err());
    }

    #[test]
    fn mask_integer_shift_moves_one_column() {
        let mask = Image2D::from_fn(6, 6, |x, y| if (2..4).contains(&x) && (1..5).contains(&y) { 1.0 } else { 0.0 })
            .unwrap();
        let out = warp_mask(&mask, &DeformationField::constant(6, 6, [1.0, 0.0])).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(out.get(x, y), mask.get(x + 1, y), "({x}, {y})");
            }
        }
    }

    #[test]
    fn mask_rejects_non_binary() {
        let mask = Image2D::filled(2, 2, 0.3);
        assert!(warp_mask(&mask, &DeformationField::zeros(2, 2)).is_err());
    }

    #[test]
    fn upsample_constant_doubles() {
        let f = DeformationField::constant(3, 4, [1.0, 0.0]);
        let up = upsample_field_values(&f);
        assert_eq!(up.dims(), (6, 8));
        assert!(up.disp().iter().all(|d| *d == [2.0, 0.0]));
        let z = upsample_field_values(&DeformationField::zeros(2, 2));
        assert!(z.disp().iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn inverse_of_constant_is_negated() {
        let (v, report) = invert_field(&DeformationField::constant(8, 8, [1.5, -0.5]));
        assert!(report.converged);
        assert!(v.disp().iter().all(|d| *d == [-1.5, 0.5]));
    }

    #[test]
    fn landmarks_follow_constant_translation() {
        let lm = LandmarkSet::new(vec![Landmark { index: 0, x: 5.0, y: 5.0 }]).unwrap();
        let out = apply_to_landmarks(&lm, &DeformationField::constant(10, 10, [2.0, 0.0])).unwrap();
        assert_eq!(out.points()[0].x, 3.0);
        assert_eq!(out.points()[0].y, 5.0);
    }

    #[test]
    fn landmark_out_of_bounds_reports_index() {
        let lm = LandmarkSet::new(vec![
            Landmark { index: 0, x: 1.0, y: 1.0 },
            Landmark { index: 7, x: 12.0, y: 1.0 },
        ])
        .unwrap();
        match apply_to_landmarks(&lm, &DeformationField::zeros(10, 10)) {
            Err(Error::LandmarkOutOfBounds { index, .. }) => assert_eq!(index, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}
