//! Grayscale images and dense displacement fields.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

static CLAMPED_ON_INGEST: AtomicUsize = AtomicUsize::new(0);

/// Number of pixel values clamped into `[0, 1]` by [`Image2D::new`] since
/// process start.
pub fn ingest_clamp_count() -> usize {
    CLAMPED_ON_INGEST.load(Ordering::Relaxed)
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    /// Out-of-range intensities are clamped and counted (see
    /// [`ingest_clamp_count`]); non-finite ones are rejected.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "Image2D::new",
                format!("{} pixels for a non-empty {height}x{width} image", height * width),
                pixels.len(),
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite intensity at pixel ({}, {})",
                i % width,
                i / width
            )));
        }
        let mut clamped = 0;
        for p in &mut pixels {
            if !(0.0..=1.0).contains(p) {
                *p = p.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        if clamped > 0 {
            CLAMPED_ON_INGEST.fetch_add(clamped, Ordering::Relaxed);
            log::warn!("clamped {clamped} intensities into [0, 1]");
        }
        Ok(Image2D { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image2D::new(height, width, vec![value; height * width]).expect("valid fill")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Image2D::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// `[1, 1, H, W]` view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            other => return Err(Error::shape("Image2D::from_tensor", "[1, 1, H, W]", format!("{other:?}"))),
        };
        Image2D::new(h, w, t.data().to_vec())
    }

    /// Stacks images into an `[N, 1, H, W]` batch.
    pub fn batch(images: &[&Image2D]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot batch zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.pixels.len());
        for im in images {
            if im.dims() != first.dims() {
                return Err(Error::shape("Image2D::batch", format!("{:?}", first.dims()), format!("{:?}", im.dims())));
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::new(vec![images.len(), 1, first.height, first.width], data)
    }
}

/// Dense per-pixel displacement `(dx, dy)` in pixel units of the field's own
/// grid. The warped image samples the moving image at `x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    disp: Vec<[f32; 2]>,
}

impl DeformationField {
    pub fn new(height: usize, width: usize, disp: Vec<[f32; 2]>) -> Result<Self> {
        if height == 0 || width == 0 || disp.len() != height * width {
            return Err(Error::shape(
                "DeformationField::new",
                format!("{} vectors for a non-empty {height}x{width} field", height * width),
                disp.len(),
            ));
        }
        if disp.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("deformation field contains non-finite values".into()));
        }
        Ok(DeformationField { height, width, disp })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, [0.0, 0.0])
    }

    pub fn constant(height: usize, width: usize, d: [f32; 2]) -> Self {
        DeformationField {
            height,
            width,
            disp: vec![d; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 2]) -> Result<Self> {
        let disp = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        DeformationField::new(height, width, disp)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn disp(&self) -> &[[f32; 2]] {
        &self.disp
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.disp[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, clamped to the grid.
    pub fn sample(&self, x: f32, y: f32) -> [f32; 2] {
        let (x0, x1, fx) = crate::warp::taps(x, self.width);
        let (y0, y1, fy) = crate::warp::taps(y, self.height);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let v = |xx: usize, yy: usize| self.disp[yy * self.width + xx][c];
            let top = v(x0, y0) + fx * (v(x1, y0) - v(x0, y0));
            let bottom = v(x0, y1) + fx * (v(x1, y1) - v(x0, y1));
            *o = top + fy * (bottom - top);
        }
        out
    }

    pub fn max_magnitude(&self) -> f32 {
        self.disp.iter().map(|d| d[0].hypot(d[1])).fold(0.0, f32::max)
    }

    pub fn scaled(&self, k: f32) -> DeformationField {
        DeformationField {
            height: self.height,
            width: self.width,
            disp: self.disp.iter().map(|d| [d[0] * k, d[1] * k]).collect(),
        }
    }

    /// `[1, 2, H, W]` with channel 0 = dx, channel 1 = dy.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.disp.len();
        let mut data = vec![0.0; 2 * n];
        for (i, d) in self.disp.iter().enumerate() {
            data[i] = d[0];
            data[n + i] = d[1];
        }
        Tensor::new(vec![1, 2, self.height, self.width], data).expect("field shape")
    }

    /// Inverse of [`DeformationField::to_tensor`]; also accepts `[2, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 2, h, w] | [2, h, w] => (*h, *w),
            other => {
                return Err(Error::shape("DeformationField::from_tensor", "[1, 2, H, W]", format!("{other:?}")))
            }
        };
        Self::from_planar(h, w, t.data())
    }

    /// Builds a field from planar `[dx plane, dy plane]` data.
    pub fn from_planar(height: usize, width: usize, data: &[f32]) -> Result<Self> {
        let n = height * width;
        if data.len() != 2 * n {
            return Err(Error::shape("DeformationField::from_planar", 2 * n, data.len()));
        }
        DeformationField::new(height, width, (0..n).map(|i| [data[i], data[n + i]]).collect())
    }
}
