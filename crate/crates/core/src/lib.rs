//! Deformable 2D image registration with a multi-scale convolutional network
//! trained without ground-truth fields.
//!
//! A network looks at a fixed/moving image pair and predicts a dense
//! displacement field `u` at every pyramid scale, such that
//! `moving(x + u(x))` reproduces `fixed(x)`. Training minimizes a weighted
//! sum of photometric and smoothness losses through a differentiable
//! bilinear warp. The same losses drive [`engine::optimize_field`], a
//! per-pair coarse-to-fine optimizer used as the iterative baseline.
//!
//! ```
//! use deformreg::{register, ArchConfig, Image2D, RegModel};
//!
//! let model = RegModel::init(ArchConfig { input_height: 16, input_width: 16, ..ArchConfig::default() }, 0)?;
//! let fixed = Image2D::from_fn(16, 16, |x, y| ((x + y) % 5) as f32 / 4.0)?;
//! let out = register(&model, &fixed, &fixed)?;
//! assert_eq!(out.warped, fixed);
//! # Ok::<(), deformreg::Error>(())
//! ```

pub mod engine;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod losses;
pub mod ndgrad;
pub mod pyramid;
pub mod regnet;
pub mod warp;

pub use engine::{optimize_field, register, train, DirectConfig, PairDataset, PairSample, TrainConfig, TrainMode};
pub use error::{Error, Result};
pub use eval::{evaluate_pair, jaccard, landmark_distance, Landmark, LandmarkSet, MetricReport, SegMask};
pub use image::{DeformationField, Image2D};
pub use losses::{LossConfig, LossReport, Reduction, SmoothVariant};
pub use pyramid::{build_pyramid, pad_to_pyramid, CropRecord, ImagePyramid};
pub use regnet::{ArchConfig, RegModel};
pub use warp::{apply_to_landmarks, bilinear_warp, invert_field, warp_image, warp_mask};
