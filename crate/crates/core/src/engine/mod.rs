//! Training, direct per-pair optimization and inference.

mod adam;
mod data;
mod direct;
mod train;

pub use adam::{AdamState, StepOutcome};
pub use data::{PairDataset, PairSample};
pub use direct::{optimize_field, register, DirectConfig, DirectOutcome, LevelTrace, Registration};
pub use train::{
    history_csv, pair_objective, train, train_from, EpochRecord, PairObjective, PreparedPair, TrainConfig,
    TrainMode, TrainOutcome, DIVERGENCE_FACTOR, HISTORY_CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::regnet::{read_blocks, BlockWriter, RegModel};

/// Model file with the optimizer state appended as `adam.*` blocks.
pub fn checkpoint_to_bytes(model: &RegModel, adam: &AdamState) -> Vec<u8> {
    let mut w = BlockWriter::new(model.arch());
    for (name, t) in model.params() {
        w.block(name, t);
    }
    w.block(
        "adam.hyper",
        &Tensor::new(vec![5], vec![adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay]).expect("5 values"),
    );
    let step = adam.step_count;
    let halves = vec![f32::from_bits(step as u32), f32::from_bits((step >> 32) as u32)];
    w.block("adam.step", &Tensor::new(vec![2], halves).expect("2 values"));
    for ((name, t), (m, v)) in model
        .params()
        .iter()
        .zip(adam.first_moments().iter().zip(adam.second_moments()))
    {
        w.block(&format!("adam.m.{name}"), &Tensor::new(t.shape().to_vec(), m.clone()).expect("moment shape"));
        w.block(&format!("adam.v.{name}"), &Tensor::new(t.shape().to_vec(), v.clone()).expect("moment shape"));
    }
    w.finish()
}

/// Parses a checkpoint; plain model files yield no optimizer state.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(RegModel, Option<AdamState>)> {
    let (arch, blocks) = read_blocks(bytes)?;
    let (adam_blocks, params): (Vec<_>, Vec<_>) = blocks.into_iter().partition(|(n, _)| n.starts_with("adam."));
    let model = RegModel::from_params(arch, params)?;
    if adam_blocks.is_empty() {
        return Ok((model, None));
    }
    let find = |name: &str| {
        adam_blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing block {name}")))
    };
    let hyper = find("adam.hyper")?;
    let hyper: [f32; 5] = hyper
        .data()
        .try_into()
        .map_err(|_| Error::InvalidArgument("adam.hyper must hold 5 values".into()))?;
    let step = find("adam.step")?.data();
    if step.len() != 2 {
        return Err(Error::InvalidArgument("adam.step must hold 2 values".into()));
    }
    let step_count = step[0].to_bits() as u64 | (step[1].to_bits() as u64) << 32;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in model.params() {
        for (prefix, out) in [("adam.m.", &mut first), ("adam.v.", &mut second)] {
            let m = find(&format!("{prefix}{name}"))?;
            if m.shape() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{prefix}{name} {:?}", t.shape()),
                    format!("{:?}", m.shape()),
                ));
            }
            out.push(m.data().to_vec());
        }
    }
    let expected = 2 + 2 * model.params().len();
    if adam_blocks.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} optimizer blocks, expected {expected}",
            adam_blocks.len()
        )));
    }
    Ok((model, Some(AdamState::from_parts(hyper, step_count, first, second))))
}
