//! Convolutional encoder-decoder predicting a deformation field at every
//! scale of the pyramid.
//!
//! Layout for `levels = L` with `c_l = min(base * 2^l, 128)`:
//!
//! * encoder level 0: 3x3 conv `2 -> c_0` on the concatenated fixed/moving pair;
//! * encoder level `l >= 1`: stride-2 4x4 conv `c_{l-1} -> c_l`, then 3x3 conv;
//! * flow head at the coarsest level: 3x3 conv `c_{L-1} -> 2`;
//! * decoder level `l < L - 1`: stride-2 4x4 transposed conv of the previous
//!   decoder features to `c_l`, concatenated with the encoder skip features
//!   and the 2x-upsampled coarser flow; a 3x3 head adds a residual to that
//!   upsampled flow.
//!
//! The finest flow therefore comes out at full input resolution. Flow heads
//! start at zero, so a fresh model predicts the identity warp everywhere.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DeformationField, Image2D};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::warp::upsample_field;

pub const MODEL_MAGIC: &[u8; 4] = b"DRG1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const MAX_CHANNELS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f32,
}

fn default_leaky_slope() -> f32 {
    0.1
}

impl Default for ArchConfig {
    /// Four levels, 16 base channels, 64x64 input.
    fn default() -> Self {
        ArchConfig {
            levels: 4,
            base_channels: 16,
            input_height: 64,
            input_width: 64,
            leaky_slope: default_leaky_slope(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, reason: String| Error::Config {
            path: format!("arch.{path}"),
            reason,
        };
        if self.levels == 0 || self.levels > 10 {
            return Err(err("levels", format!("{} is outside 1..=10", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(err("base_channels", "must be positive".into()));
        }
        let m = 1usize << (self.levels - 1);
        for (name, v) in [("input_height", self.input_height), ("input_width", self.input_width)] {
            if v == 0 || v % m != 0 {
                return Err(err(name, format!("{v} is not a positive multiple of {m}")));
            }
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(err("leaky_slope", format!("{} is outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }

    /// Channel count of the decoder features feeding the transposed conv
    /// into `level - 1`.
    fn decoder_channels(&self, level: usize) -> usize {
        if level == self.levels - 1 {
            self.channels(level)
        } else {
            2 * self.channels(level) + 2
        }
    }

    /// Output resolution at `level` (0 = finest).
    pub fn scale_dims(&self, level: usize) -> (usize, usize) {
        (self.input_height >> level, self.input_width >> level)
    }

    /// Names and shapes of every parameter, in storage order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("enc0.conv".into(), self.channels(0), 2, 3);
        for l in 1..self.levels {
            conv(format!("enc{l}.down"), self.channels(l), self.channels(l - 1), 4);
            conv(format!("enc{l}.conv"), self.channels(l), self.channels(l), 3);
        }
        let top = self.levels - 1;
        conv(format!("flow{top}"), 2, self.channels(top), 3);
        for l in (0..top).rev() {
            // transposed conv weights are [Cin, Cout, k, k]
            out.push((format!("dec{l}.up.weight"), vec![self.decoder_channels(l + 1), self.channels(l), 4, 4]));
            out.push((format!("dec{l}.up.bias"), vec![self.channels(l)]));
            out.push((format!("flow{l}.weight"), vec![2, self.decoder_channels(l), 3, 3]));
            out.push((format!("flow{l}.bias"), vec![2]));
        }
        out
    }
}

/// Network parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct RegModel {
    arch: ArchConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

fn build_index(params: &[(String, Tensor)]) -> HashMap<String, usize> {
    params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect()
}

impl RegModel {
    /// Fan-in scaled uniform init for feature convs; zero flow heads and
    /// biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope);
        let params: Vec<(String, Tensor)> = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let zero = name.starts_with("flow") || name.ends_with(".bias");
                let data = if zero {
                    vec![0.0; numel]
                } else {
                    let fan_in = if name.contains(".up.") {
                        // each output of a stride-2 transposed conv sees a quarter of the taps
                        shape[0] * shape[2] * shape[3] / 4
                    } else {
                        shape[1] * shape[2] * shape[3]
                    };
                    let bound = (3.0 * gain / fan_in as f32).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                (name, Tensor::new(shape, data).expect("param shape"))
            })
            .collect();
        let index = build_index(&params);
        Ok(RegModel { arch, params, index })
    }

    /// Assembles a model from named tensors, checking names and shapes.
    pub fn from_params(arch: ArchConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let index = build_index(&params);
        Ok(RegModel { arch, params, index })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn conv(&self, tape: &mut Tape, vars: &[Var], name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.var(vars, &format!("{name}.weight"));
        let b = self.var(vars, &format!("{name}.bias"));
        tape.conv2d(x, w, b, stride, padding)
    }

    /// Flows for `[N, 1, H, W]` fixed/moving batches, finest first; each is
    /// `[N, 2, H / 2^s, W / 2^s]`. The network is fully convolutional, so any
    /// `H`, `W` divisible by `2^(levels - 1)` is accepted.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], fixed: Var, moving: Var) -> Result<Vec<Var>> {
        let m = 1usize << (self.arch.levels - 1);
        let fs = tape.value(fixed).dims4("RegModel::forward")?;
        let ms = tape.value(moving).dims4("RegModel::forward")?;
        if fs != ms || fs[1] != 1 || fs[2] % m != 0 || fs[3] % m != 0 {
            return Err(Error::shape(
                "RegModel::forward",
                format!("two equal [N, 1, H, W] batches with H, W multiples of {m}"),
                format!("{fs:?} and {ms:?}"),
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument("parameter vars do not belong to this model".into()));
        }
        let slope = self.arch.leaky_slope;
        let levels = self.arch.levels;

        let input = tape.concat_channels(&[fixed, moving])?;
        let mut skips = Vec::with_capacity(levels);
        let x = self.conv(tape, vars, "enc0.conv", input, 1, 1)?;
        skips.push(tape.leaky_relu(x, slope)?);
        for l in 1..levels {
            let prev = *skips.last().expect("level 0");
            let x = self.conv(tape, vars, &format!("enc{l}.down"), prev, 2, 1)?;
            let x = tape.leaky_relu(x, slope)?;
            let x = self.conv(tape, vars, &format!("enc{l}.conv"), x, 1, 1)?;
            skips.push(tape.leaky_relu(x, slope)?);
        }

        let top = levels - 1;
        let mut features = skips[top];
        let mut flow = self.conv(tape, vars, &format!("flow{top}"), features, 1, 1)?;
        let mut flows = vec![flow];
        for l in (0..top).rev() {
            let w = self.var(vars, &format!("dec{l}.up.weight"));
            let b = self.var(vars, &format!("dec{l}.up.bias"));
            let up = tape.conv_transpose2d(features, w, b, 2, 1)?;
            let up = tape.leaky_relu(up, slope)?;
            let up_flow = upsample_field(tape, flow)?;
            features = tape.concat_channels(&[skips[l], up, up_flow])?;
            let residual = self.conv(tape, vars, &format!("flow{l}"), features, 1, 1)?;
            flow = tape.add(up_flow, residual)?;
            flows.push(flow);
        }
        flows.reverse();
        Ok(flows)
    }

    /// Inference without gradients; flows finest first.
    pub fn predict(&self, fixed: &Image2D, moving: &Image2D) -> Result<Vec<DeformationField>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.constant(fixed.to_tensor());
        let m = tape.constant(moving.to_tensor());
        let flows = self.forward(&mut tape, &vars, f, m)?;
        flows
            .into_iter()
            .map(|v| DeformationField::from_tensor(tape.value(v)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlockWriter::new(&self.arch);
        for (name, t) in &self.params {
            w.block(name, t);
        }
        w.finish()
    }

    /// Parses a model file; blocks prefixed `adam.` (checkpoint optimizer
    /// state) are ignored here.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (arch, blocks) = read_blocks(bytes)?;
        let params = blocks.into_iter().filter(|(n, _)| !n.starts_with("adam.")).collect();
        RegModel::from_params(arch, params)
    }
}

/// Serializer for the named-block model/checkpoint format.
pub(crate) struct BlockWriter {
    header: Vec<u8>,
    body: Vec<u8>,
    count: u32,
}

impl BlockWriter {
    pub(crate) fn new(arch: &ArchConfig) -> Self {
        let mut header = Vec::with_capacity(28);
        header.extend_from_slice(MODEL_MAGIC);
        header.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        for v in [arch.levels, arch.base_channels, arch.input_height, arch.input_width] {
            header.extend_from_slice(&(v as u32).to_le_bytes());
        }
        header.extend_from_slice(&arch.leaky_slope.to_le_bytes());
        BlockWriter {
            header,
            body: Vec::new(),
            count: 0,
        }
    }

    pub(crate) fn block(&mut self, name: &str, t: &Tensor) {
        self.body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.body.extend_from_slice(name.as_bytes());
        self.body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            self.body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            self.body.extend_from_slice(&v.to_le_bytes());
        }
        self.count += 1;
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        self.header.extend_from_slice(&self.count.to_le_bytes());
        self.header.extend_from_slice(&self.body);
        self.header
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                "model",
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses header and all named blocks.
pub(crate) fn read_blocks(bytes: &[u8]) -> Result<(ArchConfig, Vec<(String, Tensor)>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format("model", 0, "bad magic, expected DRG1"));
    }
    let version = r.u32("format version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            "model",
            4,
            format!("unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"),
        ));
    }
    let arch = ArchConfig {
        levels: r.u32("levels")? as usize,
        base_channels: r.u32("base_channels")? as usize,
        input_height: r.u32("input_height")? as usize,
        input_width: r.u32("input_width")? as usize,
        leaky_slope: r.f32("leaky_slope")?,
    };
    let count = r.u32("block count")?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| Error::format("model", start + 4, "block name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format("model", r.pos - 4, format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blocks.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("model", r.pos, "trailing bytes after last block"));
    }
    Ok((arch, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig {
            levels: 3,
            base_channels: 4,
            input_height: 16,
            input_width: 16,
            leaky_slope: 0.1,
        }
    }

    #[test]
    fn heads_per_level() {
        let m = RegModel::init(ArchConfig::default(), 0).unwrap();
        let heads = m.params().iter().filter(|(n, _)| n.starts_with("flow") && n.ends_with("weight")).count();
        let decoders = m.params().iter().filter(|(n, _)| n.starts_with("dec") && n.ends_with("weight")).count();
        let encoders = m.params().iter().filter(|(n, _)| n.starts_with("enc") && n.ends_with("conv.weight")).count();
        assert_eq!((heads, decoders, encoders), (4, 3, 4));
        assert!(m.params().iter().filter(|(n, _)| n.starts_with("flow")).all(|(_, t)| t.shape()[0] == 2 || t.shape() == [2]));
    }

    #[test]
    fn desk_default_parameter_budget() {
        let m = RegModel::init(ArchConfig::default(), 0).unwrap();
        assert!(m.param_count() < 1_500_000, "{}", m.param_count());
    }

    #[test]
    fn output_scales_halve() {
        let m = RegModel::init(ArchConfig::default(), 3).unwrap();
        let im = Image2D::from_fn(64, 64, |x, y| ((x * y) % 7) as f32 / 7.0).unwrap();
        let flows = m.predict(&im, &im).unwrap();
        let dims: Vec<_> = flows.iter().map(|f| f.dims()).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        assert!(flows.iter().all(|f| f.max_magnitude() == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = RegModel::init(small(), 7).unwrap();
        let b = RegModel::init(small(), 7).unwrap();
        let c = RegModel::init(small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.param("enc0.conv.weight"), c.param("enc0.conv.weight"));
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = RegModel::init(small(), 0).unwrap();
        let im = Image2D::filled(10, 8, 0.0);
        assert!(m.predict(&im, &im).is_err());
        let other = Image2D::filled(8, 12, 0.0);
        assert!(m.predict(&Image2D::filled(8, 8, 0.0), &other).is_err());
        let ok = Image2D::filled(8, 12, 0.5);
        assert_eq!(m.predict(&ok, &ok).unwrap()[0].dims(), (8, 12));
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = small();
        a.input_width = 18;
        assert!(RegModel::init(a, 0).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let m = RegModel::init(small(), 11).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], MODEL_MAGIC);
        assert_eq!(RegModel::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupt_and_truncated_rejected() {
        let bytes = RegModel::init(small(), 1).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(RegModel::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(RegModel::from_bytes(&bad_version).is_err());
        match RegModel::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 28),
            other => panic!("{other:?}"),
        }
    }
}
