//! 2D convolution and transposed convolution via im2col + SGEMM.

use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry of a convolution over one image plane stack.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for kernel tap (ky, kx) at output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

fn im2col(src: &[f32], g: &Geometry) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let plane = g.height * g.width;
    let mut out = vec![0.0f32; rows * cols];
    for c in 0..g.channels {
        let img = &src[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = img[i];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
fn col2im(cols_buf: &[f32], g: &Geometry, dst: &mut [f32]) {
    let cols = g.col_cols();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let img = &mut dst[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            img[i] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a' * b' + beta * c` with row-major `c: m x n`. `a'` is `m x k`,
/// stored transposed when `ta`; likewise `b'` (`k x n`) with `tb`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe dense row-major buffers whose lengths are
    // checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(op: &'static str, bias: &Tensor, out_channels: usize) -> Result<()> {
    if bias.shape() != [out_channels] {
        return Err(Error::shape(op, format!("bias [{out_channels}]"), format!("{:?}", bias.shape())));
    }
    Ok(())
}

struct Conv2d {
    geom: Geometry,
}

impl Backward for Conv2d {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let [n, k, _, _] = output.dims4("conv2d").expect("rank 4");
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_plane = g.channels * g.height * g.width;

        let mut gx = needs[0].then(|| vec![0.0f32; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0f32; w.numel()]);
        let mut gb = needs[2].then(|| vec![0.0f32; k]);
        let mut dcols = vec![0.0f32; rows * cols];
        for b in 0..n {
            let dout = &grad[b * k * cols..(b + 1) * k * cols];
            if let Some(gw) = gw.as_mut() {
                let col = im2col(&x.data()[b * in_plane..(b + 1) * in_plane], g);
                gemm(k, cols, rows, dout, false, &col, true, 1.0, gw);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(rows, k, cols, w.data(), true, dout, false, 0.0, &mut dcols);
                col2im(&dcols, g, &mut gx[b * in_plane..(b + 1) * in_plane]);
            }
            if let Some(gb) = gb.as_mut() {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    *acc += dout[ch * cols..(ch + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        vec![gx, gw, gb]
    }
}

struct ConvTranspose2d {
    /// Geometry of the equivalent forward convolution mapping the output
    /// back onto the input grid.
    geom: Geometry,
}

impl Backward for ConvTranspose2d {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let [n, cin, _, _] = x.dims4("conv_transpose2d").expect("rank 4");
        let [_, cout, oh, ow] = output.dims4("conv_transpose2d").expect("rank 4");
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let out_plane = cout * oh * ow;

        let mut gx = needs[0].then(|| vec![0.0f32; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0f32; w.numel()]);
        let mut gb = needs[2].then(|| vec![0.0f32; cout]);
        for b in 0..n {
            let dout = &grad[b * out_plane..(b + 1) * out_plane];
            if gx.is_some() || gw.is_some() {
                let gcols = im2col(dout, g);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, rows, cols, w.data(), false, &gcols, false, 0.0, &mut gx[b * cin * cols..(b + 1) * cin * cols]);
                }
                if let Some(gw) = gw.as_mut() {
                    let xb = &x.data()[b * cin * cols..(b + 1) * cin * cols];
                    gemm(cin, cols, rows, xb, false, &gcols, true, 1.0, gw);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let plane = oh * ow;
                for (ch, acc) in gb.iter_mut().enumerate() {
                    *acc += dout[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        vec![gx, gw, gb]
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (ch, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[ch % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

impl Tape {
    /// Cross-correlation of `input [N, C, H, W]` with `weight [K, C, kh, kw]`
    /// plus `bias [K]`, giving `[N, K, H', W']` with
    /// `H' = (H + 2 * padding - kh) / stride + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let [n, c, h, wd] = x.dims4("conv2d")?;
        let [k, wc, kh, kw] = w.dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("weight with {c} input channels (input is {:?})", x.shape()),
                format!("weight {:?}", w.shape()),
            ));
        }
        check_bias("conv2d", b, k)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input of at least {kh}x{kw}"),
                format!("{ph}x{pw}"),
            ));
        }
        let geom = Geometry {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_plane = c * h * wd;
        let mut out = vec![0.0f32; n * k * cols];
        for bi in 0..n {
            let col = im2col(&x.data()[bi * in_plane..(bi + 1) * in_plane], &geom);
            gemm(k, rows, cols, w.data(), false, &col, false, 0.0, &mut out[bi * k * cols..(bi + 1) * k * cols]);
        }
        add_bias(&mut out, b.data(), cols);
        let value = Tensor::new(vec![n, k, geom.out_h, geom.out_w], out)?;
        Ok(self.record(value, &[input, weight, bias], Conv2d { geom }))
    }

    /// Transposed convolution of `input [N, Cin, H, W]` with
    /// `weight [Cin, Cout, kh, kw]`, giving `[N, Cout, H', W']` with
    /// `H' = (H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let [n, cin, h, wd] = x.dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = w.dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight with {cin} input channels (input is {:?})", x.shape()),
                format!("weight {:?}", w.shape()),
            ));
        }
        check_bias("conv_transpose2d", b, cout)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be at least 1".into()));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output larger than twice the padding {padding}"),
                format!("{full_h}x{full_w} before cropping"),
            ));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        let geom = Geometry {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let out_plane = cout * oh * ow;
        let mut out = vec![0.0f32; n * out_plane];
        let mut colbuf = vec![0.0f32; rows * cols];
        for bi in 0..n {
            let xb = &x.data()[bi * cin * cols..(bi + 1) * cin * cols];
            gemm(rows, cin, cols, w.data(), true, xb, false, 0.0, &mut colbuf);
            col2im(&colbuf, &geom, &mut out[bi * out_plane..(bi + 1) * out_plane]);
        }
        add_bias(&mut out, b.data(), oh * ow);
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        Ok(self.record(value, &[input, weight, bias], ConvTranspose2d { geom }))
    }
}
