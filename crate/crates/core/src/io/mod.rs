//! File formats, configuration documents and synthetic data generation.

mod config;
mod field;
mod landmarks;
mod pgm;
mod synth;
mod visualize;

use std::path::Path;

pub use config::{from_json, DirectSection, PathsSection, RunConfig, TrainSection};
pub use field::{decode_field, encode_field, read_field, write_field, FIELD_MAGIC};
pub use landmarks::{landmarks_to_csv, parse_landmarks, read_landmarks, write_landmarks, LANDMARK_CSV_HEADER};
pub use pgm::{decode_pgm, encode_pgm, read_image, read_mask, read_pgm, write_image, write_mask, Pgm};
pub use synth::{
    generate_synthetic, synthesize, write_pair, BaseImage, DeformationFamily, Manifest, SynthSpec, MANIFEST_NAME,
};
pub use visualize::{checkerboard, field_colors, field_to_ppm, magnitude_p98, FIELD_COLOR_NOTE};

use crate::engine::{PairDataset, PairSample};
use crate::error::{Error, Result};

/// Loads one pair directory: `fixed.pgm` and `moving.pgm` are required;
/// `gt.dff`, `fixed_mask.pgm`/`moving_mask.pgm` and
/// `fixed_lm.csv`/`moving_lm.csv` are picked up when present.
pub fn load_pair(dir: &Path) -> Result<PairSample> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let fixed = read_image(dir.join("fixed.pgm"))?;
    let moving = read_image(dir.join("moving.pgm"))?;
    let (h, w) = fixed.dims();
    let mut pair = PairSample::new(id, fixed, moving);
    let gt = dir.join("gt.dff");
    if gt.exists() {
        pair.ground_truth = Some(read_field(gt)?);
    }
    let (fm, mm) = (dir.join("fixed_mask.pgm"), dir.join("moving_mask.pgm"));
    if fm.exists() && mm.exists() {
        pair.masks = Some((read_mask(fm)?, read_mask(mm)?));
    }
    let (fl, ml) = (dir.join("fixed_lm.csv"), dir.join("moving_lm.csv"));
    if fl.exists() && ml.exists() {
        pair.landmarks = Some((read_landmarks(fl, Some((w, h)))?, read_landmarks(ml, Some((w, h)))?));
    }
    Ok(pair)
}

/// Every subdirectory of `dir` holding a `fixed.pgm`, in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PairDataset> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join("fixed.pgm").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} contains no pair directories", dir.display())));
    }
    PairDataset::new(subdirs.iter().map(|p| load_pair(p)).collect::<Result<_>>()?)
}
