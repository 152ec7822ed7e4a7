//! Seeded synthetic registration pairs with known ground truth.
//!
//! For every pair a registration field `u` is drawn first. The moving image
//! is then rendered at `y + v(y)`, where `v` is the numerical inverse of `u`,
//! so that `moving(x + u(x)) ≈ fixed(x)` holds up to resampling error and
//! `u` is exactly the field a registration method should recover.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{read_image, write_field, write_image, write_landmarks, write_mask};
use crate::engine::{PairDataset, PairSample};
use crate::error::{Error, Result};
use crate::eval::{Landmark, LandmarkSet, SegMask};
use crate::image::{DeformationField, Image2D};
use crate::warp::{invert_field_with, warp_image, warp_mask};

const DEFAULT_SIZE: usize = 64;
/// Smallest allowed `det(I + grad u)`; draws that fold tighter are redrawn.
const MIN_JACOBIAN: f32 = 0.2;
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseImage {
    /// Procedural organ-like ellipse with interior texture, varied per pair.
    #[default]
    Blobs,
    /// The same grayscale PGM for every pair.
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformationFamily {
    Translation,
    RotationSmall,
    GaussianBumps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub base: BaseImage,
    /// Procedural image size; defaults to 64. Must match a file base if given.
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
    pub family: DeformationFamily,
    /// Largest displacement of every drawn field, in pixels.
    pub max_displacement: f32,
    pub pair_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f32,
}

impl SynthSpec {
    pub fn new(family: DeformationFamily, max_displacement: f32, pair_count: usize, seed: u64) -> Self {
        SynthSpec {
            base: BaseImage::Blobs,
            height: None,
            width: None,
            family,
            max_displacement,
            pair_count,
            seed,
            noise_sigma: 0.0,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = Some(height);
        self.width = Some(width);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        super::config::from_json(text)
    }

    fn dims_with(&self, file: Option<&Image2D>) -> Result<(usize, usize)> {
        let default = file.map_or((DEFAULT_SIZE, DEFAULT_SIZE), Image2D::dims);
        let dims = (self.height.unwrap_or(default.0), self.width.unwrap_or(default.1));
        if file.is_some() && dims != default {
            return Err(Error::Config {
                path: "height".into(),
                reason: format!("{dims:?} disagrees with the base image size {default:?}"),
            });
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, reason: String| Error::Config {
            path: path.into(),
            reason,
        };
        let (h, w) = (self.height.unwrap_or(DEFAULT_SIZE), self.width.unwrap_or(DEFAULT_SIZE));
        if h < 8 || w < 8 {
            return Err(err("height", format!("{h}x{w} is smaller than 8x8")));
        }
        let limit = h.min(w) as f32 / 8.0;
        if !(self.max_displacement > 0.0 && self.max_displacement < limit) {
            return Err(err(
                "max_displacement",
                format!("{} is outside (0, {limit}) for a {h}x{w} image", self.max_displacement),
            ));
        }
        if self.pair_count == 0 {
            return Err(err("pair_count", "must be positive".into()));
        }
        if !(0.0..=0.1).contains(&self.noise_sigma) {
            return Err(err("noise_sigma", format!("{} is outside [0, 0.1]", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Procedural base image: smooth-edged ellipse with Gaussian blobs and
/// sinusoidal texture inside it on a flat background.
#[derive(Clone, Debug)]
struct BlobPattern {
    center: [f32; 2],
    radii: [f32; 2],
    cos_t: f32,
    sin_t: f32,
    edge: f32,
    background: f32,
    organ: f32,
    blobs: Vec<([f32; 2], f32, f32)>,
    waves: Vec<([f32; 2], f32, f32)>,
}

impl BlobPattern {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f32, w as f32);
        let scale = hf.min(wf) / DEFAULT_SIZE as f32;
        let center = [
            (wf - 1.0) / 2.0 + rng.gen_range(-0.02..0.02) * wf,
            (hf - 1.0) / 2.0 + rng.gen_range(-0.02..0.02) * hf,
        ];
        let radii = [rng.gen_range(0.32..0.38) * wf, rng.gen_range(0.32..0.38) * hf];
        let theta: f32 = rng.gen_range(-0.5..0.5);
        let mut pattern = BlobPattern {
            center,
            radii,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            edge: 1.5 * scale,
            background: rng.gen_range(0.1..0.2),
            organ: rng.gen_range(0.55..0.7),
            blobs: Vec::new(),
            waves: Vec::new(),
        };
        while pattern.blobs.len() < 7 {
            let p = [rng.gen_range(0.0..wf), rng.gen_range(0.0..hf)];
            if pattern.radius(p[0], p[1]) < 0.8 {
                let sigma = rng.gen_range(2.0..5.0) * scale;
                let amp = rng.gen_range(0.1..0.25) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                pattern.blobs.push((p, sigma, amp));
            }
        }
        for _ in 0..2 {
            let angle = rng.gen_range(0.0..PI);
            let k = 2.0 * PI / (rng.gen_range(12.0..24.0) * scale);
            pattern
                .waves
                .push(([k * angle.cos(), k * angle.sin()], rng.gen_range(0.0..2.0 * PI), 0.04));
        }
        pattern
    }

    /// Normalized elliptical radius: 1 on the boundary.
    fn radius(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let a = self.cos_t * dx + self.sin_t * dy;
        let b = -self.sin_t * dx + self.cos_t * dy;
        (a / self.radii[0]).hypot(b / self.radii[1])
    }

    fn inside(&self, x: f32, y: f32) -> bool {
        self.radius(x, y) < 1.0
    }

    fn value(&self, x: f32, y: f32) -> f32 {
        let r = self.radius(x, y);
        let rmin = self.radii[0].min(self.radii[1]);
        let weight = 1.0 / (1.0 + (-(1.0 - r) * rmin / self.edge).exp());
        let mut texture = self.organ;
        for &(p, sigma, amp) in &self.blobs {
            let d2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
            texture += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        for &(k, phase, amp) in &self.waves {
            texture += amp * (k[0] * x + k[1] * y + phase).sin();
        }
        (self.background + weight * (texture - self.background)).clamp(0.0, 1.0)
    }
}

fn unit(rng: &mut ChaCha8Rng) -> [f32; 2] {
    let a = rng.gen_range(0.0..2.0 * PI);
    [a.cos(), a.sin()]
}

fn min_jacobian(field: &DeformationField) -> f32 {
    let (h, w) = field.dims();
    let mut min = f32::INFINITY;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let u = field.get(x, y);
            let ux = field.get(x + 1, y);
            let uy = field.get(x, y + 1);
            let det = (1.0 + ux[0] - u[0]) * (1.0 + uy[1] - u[1]) - (ux[1] - u[1]) * (uy[0] - u[0]);
            min = min.min(det);
        }
    }
    min
}

/// Draws one registration field with largest magnitude `max`.
fn draw_field(rng: &mut ChaCha8Rng, family: DeformationFamily, h: usize, w: usize, max: f32) -> DeformationField {
    match family {
        DeformationFamily::Translation => {
            let d = unit(rng);
            DeformationField::constant(h, w, [max * d[0], max * d[1]])
        }
        DeformationFamily::RotationSmall => {
            let c = [(w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0];
            let reach = c[0].hypot(c[1]);
            let limit = 2.0 * (max / (2.0 * reach)).min(1.0).asin();
            let theta = if rng.gen_bool(0.5) { limit } else { -limit };
            let (s, co) = theta.sin_cos();
            DeformationField::from_fn(h, w, |x, y| {
                let (dx, dy) = (x as f32 - c[0], y as f32 - c[1]);
                [co * dx - s * dy - dx, s * dx + co * dy - dy]
            })
            .expect("finite rotation")
        }
        DeformationFamily::GaussianBumps => {
            for _ in 0..MAX_REDRAWS {
                let count = rng.gen_range(1..=3);
                let bumps: Vec<([f32; 2], f32, [f32; 2])> = (0..count)
                    .map(|_| {
                        let c = [
                            rng.gen_range(0.25..0.75) * w as f32,
                            rng.gen_range(0.25..0.75) * h as f32,
                        ];
                        let sigma = rng.gen_range(4.0..12.0);
                        let d = unit(rng);
                        let a = rng.gen_range(0.5..1.0);
                        (c, sigma, [a * d[0], a * d[1]])
                    })
                    .collect();
                let raw = DeformationField::from_fn(h, w, |x, y| {
                    let mut u = [0.0f32; 2];
                    for &(c, sigma, a) in &bumps {
                        let g = (-((x as f32 - c[0]).powi(2) + (y as f32 - c[1]).powi(2)) / (2.0 * sigma * sigma)).exp();
                        u[0] += a[0] * g;
                        u[1] += a[1] * g;
                    }
                    u
                })
                .expect("finite bumps");
                let peak = raw.max_magnitude();
                if peak < 1e-3 {
                    continue;
                }
                let field = raw.scaled(max / peak);
                if min_jacobian(&field) >= MIN_JACOBIAN {
                    return field;
                }
            }
            panic!("could not draw a non-folding bump field with max displacement {max}");
        }
    }
}

fn grid_landmarks(h: usize, w: usize) -> LandmarkSet {
    let fractions = [0.3f32, 0.5, 0.7];
    let mut points = Vec::with_capacity(9);
    for fy in fractions {
        for fx in fractions {
            points.push(Landmark {
                index: points.len(),
                x: fx * (w - 1) as f32,
                y: fy * (h - 1) as f32,
            });
        }
    }
    LandmarkSet::new(points).expect("unique grid")
}

fn add_noise(image: Image2D, sigma: f32, rng: &mut ChaCha8Rng) -> Image2D {
    if sigma == 0.0 {
        return image;
    }
    let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
    let pixels = image
        .pixels()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Image2D::new(image.height(), image.width(), pixels).expect("same size")
}

/// All pairs of `spec`, in order; bitwise reproducible for a given spec.
pub fn synthesize(spec: &SynthSpec) -> Result<PairDataset> {
    spec.validate()?;
    let file = match &spec.base {
        BaseImage::File(path) => Some(read_image(path)?),
        BaseImage::Blobs => None,
    };
    let (h, w) = spec.dims_with(file.as_ref())?;
    let mut pairs = Vec::with_capacity(spec.pair_count);
    for k in 0..spec.pair_count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64);
        let truth = draw_field(&mut rng, spec.family, h, w, spec.max_displacement);
        let peak = truth.max_magnitude();
        assert!(
            peak <= spec.max_displacement * (1.0 + 1e-5),
            "drawn field peaks at {peak} px, above the limit {}",
            spec.max_displacement
        );
        let (inverse, report) = invert_field_with(&truth, 500, 1e-6);
        if report.residual > 1e-3 {
            log::warn!("pair {k}: inverse field residual {:.2e} px", report.residual);
        }

        let (fixed, moving, fixed_mask, moving_mask) = match &file {
            None => {
                let pattern = BlobPattern::draw(&mut rng, h, w);
                let at = |x: usize, y: usize| {
                    let v = inverse.get(x, y);
                    (x as f32 + v[0], y as f32 + v[1])
                };
                let fixed = Image2D::from_fn(h, w, |x, y| pattern.value(x as f32, y as f32))?;
                let moving = Image2D::from_fn(h, w, |x, y| {
                    let (px, py) = at(x, y);
                    pattern.value(px, py)
                })?;
                let fixed_mask = SegMask::from_fn(h, w, |x, y| pattern.inside(x as f32, y as f32));
                let moving_mask = SegMask::from_fn(h, w, |x, y| {
                    let (px, py) = at(x, y);
                    pattern.inside(px, py)
                });
                (fixed, moving, fixed_mask, moving_mask)
            }
            Some(base) => {
                let fixed_mask = SegMask::from_fn(h, w, |x, y| base.get(x, y) >= 0.5);
                let moving_mask = SegMask::new(warp_mask(fixed_mask.image(), &inverse)?)?;
                (base.clone(), warp_image(base, &inverse)?, fixed_mask, moving_mask)
            }
        };
        let fixed = add_noise(fixed, spec.noise_sigma, &mut rng);
        let moving = add_noise(moving, spec.noise_sigma, &mut rng);

        let fixed_lm = grid_landmarks(h, w);
        let moving_lm = LandmarkSet::new(
            fixed_lm
                .points()
                .iter()
                .map(|p| {
                    let u = truth.sample(p.x, p.y);
                    Landmark {
                        index: p.index,
                        x: p.x + u[0],
                        y: p.y + u[1],
                    }
                })
                .collect(),
        )?;

        let mut pair = PairSample::new(format!("pair_{k:04}"), fixed, moving);
        pair.masks = Some((fixed_mask, moving_mask));
        pair.ground_truth = Some(truth);
        pair.landmarks = Some((fixed_lm, moving_lm));
        pairs.push(pair);
    }
    PairDataset::new(pairs)
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Manifest written next to the pair directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub pairs: Vec<String>,
}

/// Writes a pair to `dir` using the dataset file names.
pub fn write_pair(dir: &Path, pair: &PairSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_image(dir.join("fixed.pgm"), &pair.fixed, u16::MAX)?;
    write_image(dir.join("moving.pgm"), &pair.moving, u16::MAX)?;
    if let Some(gt) = &pair.ground_truth {
        write_field(dir.join("gt.dff"), gt)?;
    }
    if let Some((f, m)) = &pair.masks {
        write_mask(dir.join("fixed_mask.pgm"), f)?;
        write_mask(dir.join("moving_mask.pgm"), m)?;
    }
    if let Some((f, m)) = &pair.landmarks {
        write_landmarks(dir.join("fixed_lm.csv"), f)?;
        write_landmarks(dir.join("moving_lm.csv"), m)?;
    }
    Ok(())
}

/// [`synthesize`] and write every pair to `out_dir/pair_NNNN/`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<PairDataset> {
    let out_dir = out_dir.as_ref();
    let dataset = synthesize(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for pair in dataset.pairs() {
        write_pair(&out_dir.join(&pair.id), pair)?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        pairs: dataset.pairs().iter().map(|p| p.id.clone()).collect(),
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_fields_are_constant() {
        let spec = SynthSpec::new(DeformationFamily::Translation, 2.0, 5, 1);
        for pair in synthesize(&spec).unwrap().pairs() {
            let gt = pair.ground_truth.as_ref().unwrap();
            let first = gt.disp()[0];
            assert!(gt.disp().iter().all(|&d| d == first));
            assert!(first[0].hypot(first[1]) <= 2.0 + 1e-5);
        }
    }

    #[test]
    fn displacement_limits_hold() {
        for family in [DeformationFamily::RotationSmall, DeformationFamily::GaussianBumps] {
            let spec = SynthSpec::new(family, 3.0, 4, 9);
            for pair in synthesize(&spec).unwrap().pairs() {
                let m = pair.ground_truth.as_ref().unwrap().max_magnitude();
                assert!(m <= 3.0 + 1e-4 && m > 2.9, "{family:?}: {m}");
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SynthSpec::new(DeformationFamily::GaussianBumps, 3.0, 3, 42);
        assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
        let other = SynthSpec { seed: 43, ..spec.clone() };
        assert_ne!(synthesize(&spec).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn spec_limits_enforced() {
        let too_far = SynthSpec::new(DeformationFamily::Translation, 8.0, 1, 0);
        assert!(matches!(too_far.validate(), Err(Error::Config { ref path, .. }) if path == "max_displacement"));
        let noisy = SynthSpec {
            noise_sigma: 0.2,
            ..SynthSpec::new(DeformationFamily::Translation, 2.0, 1, 0)
        };
        assert!(noisy.validate().is_err());
    }

    #[test]
    fn spec_json_forms() {
        let spec = SynthSpec::from_json(
            r#"{"family": "gaussian_bumps", "max_displacement": 3, "pair_count": 2, "base": {"file": "a.pgm"}}"#,
        )
        .unwrap();
        assert_eq!(spec.base, BaseImage::File("a.pgm".into()));
        assert!(SynthSpec::from_json(r#"{"family": "swirl", "max_displacement": 3, "pair_count": 2}"#).is_err());
    }
}
