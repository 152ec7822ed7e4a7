//! Registration quality metrics: Jaccard overlap of segmentation masks and
//! mean distance between corresponding landmarks.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::image::{DeformationField, Image2D};
use crate::warp::{apply_to_landmarks, warp_mask};

/// A point in pixel coordinates: origin top-left, `x` right, `y` down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub index: usize,
    pub x: f32,
    pub y: f32,
}

/// Landmarks with unique indices, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.index) {
                return Err(Error::InvalidArgument(format!("duplicate landmark index {}", p.index)));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::InvalidArgument(format!("landmark {} has non-finite coordinates", p.index)));
            }
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point must satisfy `0 <= x <= width - 1`, `0 <= y <= height - 1`.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            let ok = p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f32 && p.y <= (height - 1) as f32;
            if !ok {
                return Err(Error::LandmarkOutOfBounds {
                    index: p.index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

/// Binary segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask(Image2D);

impl SegMask {
    pub fn new(image: Image2D) -> Result<Self> {
        if let Some(v) = image.pixels().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(SegMask(image))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        SegMask(Image2D::from_fn(height, width, |x, y| if f(x, y) { 1.0 } else { 0.0 }).expect("binary mask"))
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn count(&self) -> usize {
        self.0.pixels().iter().filter(|&&v| v == 1.0).count()
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn jaccard(a: &SegMask, b: &SegMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("jaccard", format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.0.pixels().iter().zip(b.0.pixels()) {
        let (p, q) = (p == 1.0, q == 1.0);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean Euclidean distance between index-aligned landmark pairs.
pub fn landmark_distance(warped: &LandmarkSet, fixed: &LandmarkSet) -> Result<f64> {
    if warped.len() != fixed.len() || warped.is_empty() {
        return Err(Error::shape("landmark_distance", format!("{} landmarks", fixed.len()), warped.len()));
    }
    let mut total = 0.0f64;
    for (p, q) in warped.points.iter().zip(&fixed.points) {
        if p.index != q.index {
            return Err(Error::InvalidArgument(format!(
                "landmark sets are not index-aligned: {} vs {}",
                p.index, q.index
            )));
        }
        total += ((p.x - q.x) as f64).hypot((p.y - q.y) as f64);
    }
    Ok(total / warped.len() as f64)
}

/// Metrics for one registered pair, with the no-registration baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pair_id: String,
    pub dist_before: Option<f64>,
    pub dist_after: Option<f64>,
    pub jacc_before: Option<f64>,
    pub jacc_after: Option<f64>,
    pub runtime_s: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str = "pair_id,dist_before,dist_after,jacc_before,jacc_after,runtime_s";

impl MetricReport {
    /// One CSV row; missing metrics are left empty.
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.pair_id,
            cell(self.dist_before),
            cell(self.dist_after),
            cell(self.jacc_before),
            cell(self.jacc_after),
            cell(self.runtime_s)
        )
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Fixed/moving annotations for one pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct Annotations<'a> {
    pub masks: Option<(&'a SegMask, &'a SegMask)>,
    pub landmarks: Option<(&'a LandmarkSet, &'a LandmarkSet)>,
}

/// Jaccard through [`warp_mask`], landmark distance through
/// [`apply_to_landmarks`], both also for the zero field.
pub fn evaluate_pair(
    pair_id: impl Into<String>,
    field: &DeformationField,
    annotations: Annotations<'_>,
    runtime: Option<Duration>,
) -> Result<MetricReport> {
    if annotations.masks.is_none() && annotations.landmarks.is_none() {
        return Err(Error::InvalidArgument("nothing to evaluate: provide masks or landmarks".into()));
    }
    let (h, w) = field.dims();
    let mut report = MetricReport {
        pair_id: pair_id.into(),
        dist_before: None,
        dist_after: None,
        jacc_before: None,
        jacc_after: None,
        runtime_s: runtime.map(|d| d.as_secs_f64()),
    };
    if let Some((fixed, moving)) = annotations.masks {
        for m in [fixed, moving] {
            if m.dims() != (h, w) {
                return Err(Error::shape("evaluate_pair", format!("mask {:?}", (h, w)), format!("{:?}", m.dims())));
            }
        }
        report.jacc_before = Some(jaccard(fixed, moving)?);
        let warped = SegMask::new(warp_mask(moving.image(), field)?)?;
        report.jacc_after = Some(jaccard(fixed, &warped)?);
    }
    if let Some((fixed, moving)) = annotations.landmarks {
        fixed.check_bounds(w, h)?;
        report.dist_before = Some(landmark_distance(moving, fixed)?);
        let warped = apply_to_landmarks(moving, field)?;
        report.dist_after = Some(landmark_distance(&warped, fixed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(points: &[(f32, f32)]) -> LandmarkSet {
        LandmarkSet::new(
            points
                .iter()
                .enumerate()
                .map(|(index, &(x, y))| Landmark { index, x, y })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn jaccard_cases() {
        let a = SegMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let b = SegMask::from_fn(4, 4, |x, y| (1..3).contains(&x) && y < 2);
        let disjoint = SegMask::from_fn(4, 4, |x, y| x >= 2 && y >= 2);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &disjoint).unwrap(), 0.0);
        assert!((jaccard(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
    }

    #[test]
    fn jaccard_empty_conventions() {
        let empty = SegMask::from_fn(3, 3, |_, _| false);
        let one = SegMask::from_fn(3, 3, |x, y| x == y);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &one).unwrap(), 0.0);
        assert!(jaccard(&empty, &SegMask::from_fn(2, 3, |_, _| false)).is_err());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(landmark_distance(&lm(&[(1.0, 2.0)]), &lm(&[(1.0, 2.0)])).unwrap(), 0.0);
        assert_eq!(landmark_distance(&lm(&[(0.0, 0.0)]), &lm(&[(3.0, 4.0)])).unwrap(), 5.0);
        let a = lm(&[(0.0, 0.0), (0.0, 0.0)]);
        let b = lm(&[(3.0, 0.0), (0.0, 5.0)]);
        assert_eq!(landmark_distance(&a, &b).unwrap(), 4.0);
        assert!(landmark_distance(&a, &lm(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn duplicate_indices_rejected() {
        let p = Landmark { index: 3, x: 0.0, y: 0.0 };
        assert!(LandmarkSet::new(vec![p, p]).is_err());
    }

    #[test]
    fn zero_field_matches_baseline() {
        let fm = SegMask::from_fn(16, 16, |x, y| x + y < 12);
        let mm = SegMask::from_fn(16, 16, |x, y| x + y < 14);
        let fl = lm(&[(3.0, 4.0), (10.0, 2.5)]);
        let ml = lm(&[(4.0, 4.0), (11.5, 3.0)]);
        let r = evaluate_pair(
            "p0",
            &DeformationField::zeros(16, 16),
            Annotations {
                masks: Some((&fm, &mm)),
                landmarks: Some((&fl, &ml)),
            },
            None,
        )
        .unwrap();
        assert_eq!(r.dist_before, r.dist_after);
        assert_eq!(r.jacc_before, r.jacc_after);
        assert!(r.csv_row().starts_with("p0,"));
    }

    #[test]
    fn nothing_to_evaluate_rejected() {
        assert!(evaluate_pair("x", &DeformationField::zeros(4, 4), Annotations::default(), None).is_err());
    }

    #[test]
    fn csv_leaves_missing_cells_empty() {
        let r = MetricReport {
            pair_id: "a".into(),
            dist_before: Some(1.0),
            dist_after: Some(0.5),
            jacc_before: None,
            jacc_after: None,
            runtime_s: None,
        };
        assert_eq!(r.csv_row(), "a,1.000000,0.500000,,,");
        assert!(reports_to_csv(&[r]).starts_with(REPORT_CSV_HEADER));
    }
}
