//! Raw NCHW kernels shared by the autograd graph and gradient-free code paths.
//!
//! Convolution lowers to im2col + GEMM (`matrixmultiply::dgemm`, single-threaded,
//! deterministic); output extents use floor division,
//! `(H + 2 * padding - k) / stride + 1`. Bilinear resampling uses half-pixel centers:
//! `src = (dst + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(Error::Shape(format!(
                "conv2d expects input [N,C,H,W] and kernel [Cout,Cin,k,k], got {input:?} and {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel has {kcin} input channels, input has {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh} larger than padded input {span_h}x{span_w}"
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel: kh,
            stride,
            padding,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst = &mut chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = vec![0.0; kk * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_sz..(n + 1) * in_sz], &mut cols);
        let dst = &mut out[n * out_sz..(n + 1) * out_sz];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            g.out_channels,
            kk,
            plane,
            kernel,
            (kk as isize, 1),
            &cols,
            (plane as isize, 1),
            1.0,
            dst,
        );
    }
    out
}

/// Accumulates gradients w.r.t. input, kernel and bias into the provided buffers.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * plane;

    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let go = &grad_out[n * out_sz..(n + 1) * out_sz];
            for (co, row) in go.chunks(plane).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
    }

    let mut cols = vec![0.0; kk * plane];
    if let Some(gk) = grad_kernel {
        for n in 0..g.batch {
            im2col(g, &input[n * in_sz..(n + 1) * in_sz], &mut cols);
            // gk[cout, kk] += go[cout, plane] * cols^T[plane, kk]
            gemm(
                g.out_channels,
                plane,
                kk,
                &grad_out[n * out_sz..(n + 1) * out_sz],
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                1.0,
                gk,
            );
        }
    }

    if let Some(gi) = grad_input {
        for n in 0..g.batch {
            // cols[kk, plane] = kernel^T[kk, cout] * go[cout, plane]
            gemm(
                kk,
                g.out_channels,
                plane,
                kernel,
                (1, kk as isize),
                &grad_out[n * out_sz..(n + 1) * out_sz],
                (plane as isize, 1),
                0.0,
                &mut cols,
            );
            col2im_add(g, &cols, &mut gi[n * in_sz..(n + 1) * in_sz]);
        }
    }
}

/// Per-axis interpolation taps: `(lo, hi, weight_of_hi)` for each output index.
#[derive(Debug, Clone)]
pub struct AxisTaps(Vec<(usize, usize, f64)>);

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let max = (in_len - 1) as f64;
        AxisTaps(
            (0..out_len)
                .map(|d| {
                    let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(in_len - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect(),
        )
    }
}

pub fn check_resize(shape: &[usize], out_h: usize, out_w: usize) -> Result<[usize; 4]> {
    let &[n, c, h, w] = shape else {
        return Err(Error::Shape(format!(
            "bilinear_resize expects [N,C,H,W], got {shape:?}"
        )));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "bilinear_resize extents must be positive: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    Ok([n, c, h, w])
}

pub fn bilinear_forward(dims: [usize; 4], input: &[f64], out_h: usize, out_w: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    if h == out_h && w == out_w {
        return input.to_vec();
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane_in, plane_out) in input
        .chunks(h * w)
        .zip(out.chunks_mut(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.0.iter().enumerate() {
            let r0 = &plane_in[y0 * w..(y0 + 1) * w];
            let r1 = &plane_in[y1 * w..(y1 + 1) * w];
            let dst = &mut plane_out[oy * out_w..(oy + 1) * out_w];
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&tx.0) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *d = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    dims: [usize; 4],
    grad_out: &[f64],
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f64],
) {
    let [_, _, h, w] = dims;
    if h == out_h && w == out_w {
        for (gi, go) in grad_in.iter_mut().zip(grad_out) {
            *gi += go;
        }
        return;
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    for (plane_in, plane_out) in grad_in
        .chunks_mut(h * w)
        .zip(grad_out.chunks(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.0.iter().enumerate() {
            let src = &plane_out[oy * out_w..(oy + 1) * out_w];
            for (&g, &(x0, x1, fx)) in src.iter().zip(&tx.0) {
                plane_in[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane_in[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane_in[y1 * w + x0] += g * fy * (1.0 - fx);
                plane_in[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Nearest-neighbour source index for each output index (half-pixel centers).
pub fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// Softmax over the channel axis of an `[N,C,H,W]` buffer, max-subtracted.
pub fn softmax_channels(dims: [usize; 4], logits: &[f64]) -> Result<Vec<f64>> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; logits.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = logits[base + ch * plane + p];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "softmax input sample {b}, channel {ch}, pixel ({}, {})",
                        p / w,
                        p % w
                    )));
                }
                max = max.max(v);
            }
            let mut total = 0.0;
            for ch in 0..c {
                let e = (logits[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= total;
            }
        }
    }
    Ok(out)
}
