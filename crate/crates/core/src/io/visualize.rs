use crate::error::{Error, Result};
use crate::image::{DeformationField, Image2D};

/// Header comment stating the colour coding.
pub const FIELD_COLOR_NOTE: &str =
    "hue = displacement angle (0 deg = +x, counter-clockwise in image coordinates), saturation = |u| / p98(|u|), value = 1";

/// Magnitude at the 98th percentile (nearest rank).
pub fn magnitude_p98(field: &DeformationField) -> f32 {
    let mut mags: Vec<f32> = field.disp().iter().map(|d| d[0].hypot(d[1])).collect();
    mags.sort_by(f32::total_cmp);
    let rank = ((0.98 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// RGB colour of every displacement, row-major.
pub fn field_colors(field: &DeformationField) -> Vec<[u8; 3]> {
    let p98 = magnitude_p98(field);
    field
        .disp()
        .iter()
        .map(|d| {
            let mag = d[0].hypot(d[1]);
            if p98 <= 0.0 || mag == 0.0 {
                return [255, 255, 255];
            }
            // y points down, so negate it for a conventional angle.
            let angle = (-d[1]).atan2(d[0]).to_degrees().rem_euclid(360.0);
            hsv_to_rgb(angle, (mag / p98).min(1.0), 1.0)
        })
        .collect()
}

/// Binary PPM (P6) of [`field_colors`] with the coding in a comment.
pub fn field_to_ppm(field: &DeformationField) -> Vec<u8> {
    let mut out = format!(
        "P6\n# {FIELD_COLOR_NOTE}; p98 = {:.4} px\n{} {}\n255\n",
        magnitude_p98(field),
        field.width(),
        field.height()
    )
    .into_bytes();
    for c in field_colors(field) {
        out.extend_from_slice(&c);
    }
    out
}

/// Alternating `tile`-sized squares of `a` and `b`.
pub fn checkerboard(a: &Image2D, b: &Image2D, tile: usize) -> Result<Image2D> {
    if a.dims() != b.dims() {
        return Err(Error::shape("checkerboard", format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let tile = tile.max(1);
    Image2D::from_fn(a.height(), a.width(), |x, y| {
        if (x / tile + y / tile).is_multiple_of(2) {
            a.get(x, y)
        } else {
            b.get(x, y)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_white() {
        let ppm = field_to_ppm(&DeformationField::zeros(2, 3));
        assert!(ppm.starts_with(b"P6\n# "));
        assert!(ppm[ppm.len() - 18..].iter().all(|&b| b == 255));
    }

    #[test]
    fn primary_directions() {
        let f = DeformationField::new(1, 3, vec![[1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]]).unwrap();
        let c = field_colors(&f);
        assert_eq!(c[0], [255, 0, 0]);
        assert_eq!(c[1], [128, 255, 0]);
        assert_eq!(c[2], [0, 255, 255]);
    }

    #[test]
    fn saturation_scales_with_magnitude() {
        let f = DeformationField::new(1, 2, vec![[2.0, 0.0], [1.0, 0.0]]).unwrap();
        let c = field_colors(&f);
        assert_eq!(c[0], [255, 0, 0]);
        assert_eq!(c[1], [255, 128, 128]);
    }

    #[test]
    fn checkerboard_alternates() {
        let a = Image2D::filled(4, 4, 0.0);
        let b = Image2D::filled(4, 4, 1.0);
        let c = checkerboard(&a, &b, 2).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(2, 0), 1.0);
        assert_eq!(c.get(2, 2), 0.0);
    }
}
