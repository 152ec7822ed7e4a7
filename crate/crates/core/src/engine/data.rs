use crate::error::{Error, Result};
use crate::eval::{LandmarkSet, SegMask};
use crate::image::{DeformationField, Image2D};

/// One fixed/moving pair with whatever annotations are available.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub id: String,
    pub fixed: Image2D,
    pub moving: Image2D,
    /// `(fixed, moving)` segmentation masks.
    pub masks: Option<(SegMask, SegMask)>,
    /// Registration field `u` with `moving(x + u(x)) ≈ fixed(x)`.
    pub ground_truth: Option<DeformationField>,
    /// `(fixed, moving)` landmarks.
    pub landmarks: Option<(LandmarkSet, LandmarkSet)>,
}

impl PairSample {
    pub fn new(id: impl Into<String>, fixed: Image2D, moving: Image2D) -> Self {
        PairSample {
            id: id.into(),
            fixed,
            moving,
            masks: None,
            ground_truth: None,
            landmarks: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.fixed.dims()
    }

    fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let mismatch = |what: &str, got: (usize, usize)| {
            Error::shape("PairDataset", format!("{what} {dims:?}"), format!("{got:?} in pair {}", self.id))
        };
        if self.moving.dims() != dims {
            return Err(mismatch("moving", self.moving.dims()));
        }
        if let Some((f, m)) = &self.masks {
            for mask in [f, m] {
                if mask.dims() != dims {
                    return Err(mismatch("mask", mask.dims()));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.dims() != dims {
                return Err(mismatch("ground truth", gt.dims()));
            }
        }
        if let Some((f, m)) = &self.landmarks {
            f.check_bounds(dims.1, dims.0)?;
            m.check_bounds(dims.1, dims.0)?;
        }
        Ok(())
    }
}

/// Ordered collection of equally sized pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDataset {
    pairs: Vec<PairSample>,
}

impl PairDataset {
    pub fn new(pairs: Vec<PairSample>) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let dims = first.dims();
            for p in &pairs {
                p.validate()?;
                if p.dims() != dims {
                    return Err(Error::shape("PairDataset", format!("{dims:?}"), format!("{:?} in pair {}", p.dims(), p.id)));
                }
            }
        }
        Ok(PairDataset { pairs })
    }

    pub fn pairs(&self) -> &[PairSample] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(PairSample::dims)
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.ground_truth.is_some())
    }

    /// Splits off the last `count` pairs, e.g. for held-out evaluation.
    pub fn split_tail(mut self, count: usize) -> (PairDataset, PairDataset) {
        let at = self.pairs.len().saturating_sub(count);
        let tail = self.pairs.split_off(at);
        (self, PairDataset { pairs: tail })
    }
}
