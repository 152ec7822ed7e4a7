//! Inputs shared by the criterion benchmarks.

use deformreg::io::{synthesize, DeformationFamily, SynthSpec};
use deformreg::{ArchConfig, Image2D, RegModel};

/// A 256x256 bump-deformed pair.
pub fn pair_256() -> (Image2D, Image2D) {
    pair(256, 8.0)
}

/// A seeded synthetic pair of the given square size.
pub fn pair(size: usize, max_displacement: f32) -> (Image2D, Image2D) {
    let spec = SynthSpec::new(DeformationFamily::GaussianBumps, max_displacement, 1, 17).with_size(size, size);
    let pair = synthesize(&spec).expect("valid spec").pairs()[0].clone();
    (pair.fixed, pair.moving)
}

/// The default architecture sized for `size`x`size` inputs.
pub fn model(size: usize) -> RegModel {
    let arch = ArchConfig { input_height: size, input_width: size, ..ArchConfig::default() };
    RegModel::init(arch, 0).expect("valid architecture")
}
