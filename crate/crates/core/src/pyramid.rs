//! Average-pooling image pyramids.
//!
//! Level 0 is the source image; every further level halves both dimensions
//! by 2x2 averaging.

use crate::error::{Error, Result};
use crate::image::{DeformationField, Image2D};
use crate::ndgrad::Tensor;

/// Multi-resolution stack, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<Image2D>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[Image2D] {
        &self.levels
    }

    pub fn level(&self, s: usize) -> &Image2D {
        &self.levels[s]
    }

    pub fn scale_count(&self) -> usize {
        self.levels.len()
    }

    pub fn coarsest(&self) -> &Image2D {
        self.levels.last().expect("at least one level")
    }
}

/// 2x2 average pooling of `planes` stacked `h x w` planes.
pub fn avg_pool2_planes(data: &[f32], planes: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || data.len() != planes * h * w {
        return Err(Error::shape(
            "avg_pool2",
            "even dimensions",
            format!("{planes} planes of {h}x{w} ({} values)", data.len()),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (r0, r1) = (&src[2 * y * w..(2 * y + 1) * w], &src[(2 * y + 1) * w..(2 * y + 2) * w]);
            for x in 0..ow {
                let s = r0[2 * x] as f64 + r0[2 * x + 1] as f64 + r1[2 * x] as f64 + r1[2 * x + 1] as f64;
                out.push((s * 0.25) as f32);
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling of an `[N, C, H, W]` tensor.
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4("avg_pool2")?;
    let data = avg_pool2_planes(t.data(), n * c, h, w)?;
    Tensor::new(vec![n, c, h / 2, w / 2], data)
}

/// `[t, pool(t), pool(pool(t)), ...]` with `scale_count` entries.
pub fn tensor_pyramid(t: &Tensor, scale_count: usize) -> Result<Vec<Tensor>> {
    let [_, _, h, w] = t.dims4("tensor_pyramid")?;
    check_divisible(h, w, scale_count)?;
    let mut levels = vec![t.clone()];
    for _ in 1..scale_count {
        let next = avg_pool2(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

fn check_divisible(h: usize, w: usize, scale_count: usize) -> Result<()> {
    if scale_count == 0 {
        return Err(Error::InvalidArgument("scale_count must be at least 1".into()));
    }
    let m = 1usize << (scale_count - 1);
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is not divisible by {m} for {scale_count} scales; pad to {ph}x{pw} (pad_to_pyramid)"
        )));
    }
    Ok(())
}

pub fn build_pyramid(image: &Image2D, scale_count: usize) -> Result<ImagePyramid> {
    let (h, w) = image.dims();
    check_divisible(h, w, scale_count)?;
    let mut levels = vec![image.clone()];
    for _ in 1..scale_count {
        let prev = levels.last().expect("non-empty");
        let (ph, pw) = prev.dims();
        let data = avg_pool2_planes(prev.pixels(), 1, ph, pw)?;
        levels.push(Image2D::new(ph / 2, pw / 2, data)?);
    }
    Ok(ImagePyramid { levels })
}

/// Ground-truth field pyramid; each coarser level halves the displacements.
pub fn field_pyramid(field: &DeformationField, scale_count: usize) -> Result<Vec<DeformationField>> {
    let (h, w) = field.dims();
    check_divisible(h, w, scale_count)?;
    let mut levels = vec![field.clone()];
    for _ in 1..scale_count {
        let next = crate::warp::downsample_field(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

/// How an image was padded by [`pad_to_pyramid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }

    pub fn crop_image(&self, image: &Image2D) -> Result<Image2D> {
        self.check(image.dims())?;
        Image2D::from_fn(self.height, self.width, |x, y| image.get(x, y))
    }

    pub fn crop_field(&self, field: &DeformationField) -> Result<DeformationField> {
        self.check(field.dims())?;
        DeformationField::from_fn(self.height, self.width, |x, y| field.get(x, y))
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if dims != (self.padded_height, self.padded_width) {
            return Err(Error::shape(
                "CropRecord",
                format!("{:?}", (self.padded_height, self.padded_width)),
                format!("{dims:?}"),
            ));
        }
        Ok(())
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the right and bottom edges up to the next multiple of
/// `2^(scale_count - 1)`.
pub fn pad_to_pyramid(image: &Image2D, scale_count: usize) -> Result<(Image2D, CropRecord)> {
    if scale_count == 0 {
        return Err(Error::InvalidArgument("scale_count must be at least 1".into()));
    }
    let m = 1usize << (scale_count - 1);
    let (h, w) = image.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let record = CropRecord {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
    };
    if record.is_identity() {
        return Ok((image.clone(), record));
    }
    let padded = Image2D::from_fn(ph, pw, |x, y| image.get(reflect(x, w), reflect(y, h)))?;
    Ok((padded, record))
}
