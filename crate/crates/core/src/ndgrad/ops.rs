//! Elementwise, reduction and layout ops.

use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    kind: Binary,
    /// Second operand is a one-element tensor broadcast over the first.
    scalar_rhs: bool,
}

impl Backward for BinaryOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let rhs = |i: usize| if self.scalar_rhs { b[0] } else { b[i] };
        let ga = needs[0].then(|| match self.kind {
            Binary::Add | Binary::Sub => grad.to_vec(),
            Binary::Mul => grad.iter().enumerate().map(|(i, g)| g * rhs(i)).collect(),
        });
        let gb = needs[1].then(|| {
            let full: Vec<f32> = match self.kind {
                Binary::Add => grad.to_vec(),
                Binary::Sub => grad.iter().map(|g| -g).collect(),
                Binary::Mul => grad.iter().zip(a).map(|(g, x)| g * x).collect(),
            };
            if self.scalar_rhs {
                vec![full.iter().map(|&v| v as f64).sum::<f64>() as f32]
            } else {
                full
            }
        });
        vec![ga, gb]
    }
}

struct ScalarMul(f32);

impl Backward for ScalarMul {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

struct Abs;

impl Backward for Abs {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let g = grad
            .iter()
            .zip(inputs[0].data())
            .map(|(g, &x)| {
                if x > 0.0 {
                    *g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(g)]
    }
}

struct ExpNeg;

impl Backward for ExpNeg {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad.iter().zip(output.data()).map(|(g, y)| -g * y).collect())]
    }
}

struct LeakyRelu(f32);

impl Backward for LeakyRelu {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let slope = self.0;
        let g = grad
            .iter()
            .zip(inputs[0].data())
            .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
            .collect();
        vec![Some(g)]
    }
}

struct ReduceSum {
    scale: f32,
}

impl Backward for ReduceSum {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].numel()])]
    }
}

struct ConcatChannels {
    channels: Vec<usize>,
}

impl Backward for ConcatChannels {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let [n, total, h, w] = output.dims4("concat_channels").expect("rank 4");
        let plane = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (k, &c) in self.channels.iter().enumerate() {
            if needs[k] {
                let mut g = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let start = (b * total + offset) * plane;
                    g.extend_from_slice(&grad[start..start + c * plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Forward difference along the last (`Axis::X`) or second-to-last
/// (`Axis::Y`) dimension of an `[N, C, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

struct ForwardDiff(Axis);

impl Backward for ForwardDiff {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let [n, c, h, w] = inputs[0].dims4("diff").expect("rank 4");
        let mut g = vec![0.0f32; n * c * h * w];
        let (oh, ow) = match self.0 {
            Axis::X => (h, w - 1),
            Axis::Y => (h - 1, w),
        };
        for p in 0..n * c {
            let src = &mut g[p * h * w..(p + 1) * h * w];
            let dg = &grad[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let d = dg[y * ow + x];
                    let (lo, hi) = match self.0 {
                        Axis::X => (y * w + x, y * w + x + 1),
                        Axis::Y => (y * w + x, (y + 1) * w + x),
                    };
                    src[hi] += d;
                    src[lo] -= d;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Forward difference without wraparound: `[N, C, H, W] -> [N, C, H, W-1]`
/// for `Axis::X`, `[N, C, H-1, W]` for `Axis::Y`.
pub fn forward_diff_values(t: &Tensor, axis: Axis) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4("forward_diff")?;
    let (oh, ow) = match axis {
        Axis::X => (h, w.saturating_sub(1)),
        Axis::Y => (h.saturating_sub(1), w),
    };
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            "forward_diff",
            "at least 2 samples along the differenced axis",
            format!("{:?}", t.shape()),
        ));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let src = &d[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = match axis {
                    Axis::X => src[y * w + x + 1] - src[y * w + x],
                    Axis::Y => src[(y + 1) * w + x] - src[y * w + x],
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn check_binary(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.numel() == 1 {
        Ok(true)
    } else {
        Err(Error::shape(op, format!("{:?} or a scalar", a.shape()), format!("{:?}", b.shape())))
    }
}

impl Tape {
    fn binary(&mut self, op: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let scalar_rhs = check_binary(op, ta, tb)?;
        let rhs = |i: usize| if scalar_rhs { tb.data()[0] } else { tb.data()[i] };
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| match kind {
                Binary::Add => x + rhs(i),
                Binary::Sub => x - rhs(i),
                Binary::Mul => x * rhs(i),
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, &[a, b], BinaryOp { kind, scalar_rhs }))
    }

    /// `a + b`; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: Var, k: f32) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.record(value, &[a], ScalarMul(k))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::abs);
        self.record(value, &[a], Abs)
    }

    /// Elementwise `exp(-x)`.
    pub fn exp_neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| (-x).exp());
        self.record(value, &[a], ExpNeg)
    }

    /// Elementwise `max(x, slope * x)`; at 0 the slope branch is used.
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} not in [0, 1)")));
        }
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        Ok(self.record(value, &[a], LeakyRelu(slope)))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_f64() as f32);
        self.record(value, &[a], ReduceSum { scale: 1.0 })
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel().max(1);
        let value = Tensor::scalar((t.sum_f64() / n as f64) as f32);
        self.record(value, &[a], ReduceSum { scale: 1.0 / n as f32 })
    }

    /// Stacks `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat_channels needs at least one input".into())
        })?);
        let [n, _, h, w] = first.dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("[{n}, _, {h}, {w}]"),
                    format!("{:?}", self.value(p).shape()),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], data)?;
        Ok(self.record(value, parts, ConcatChannels { channels }))
    }

    /// Forward difference along `axis`; see [`forward_diff_values`].
    pub fn forward_diff(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let value = forward_diff_values(self.value(a), axis)?;
        Ok(self.record(value, &[a], ForwardDiff(axis)))
    }
}
