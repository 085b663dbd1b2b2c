//! 2-D convolution (cross-correlation) and transposed convolution with
//! hand-written backward passes.
//!
//! Forward and backward passes are parallel over the batch axis. Per-sample
//! weight and bias gradients are reduced in batch order, so results do not
//! depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use super::{NnError, Tensor4};

/// Weights and geometry of a convolution layer.
///
/// For [`conv2d_forward`] the weight is laid out `(c_out, c_in, f, f)`; for
/// [`transp_conv2d_forward`] it is `(c_in, c_out, f, f)`, so the same buffer
/// drives a convolution and its adjoint. `bias` always has one entry per
/// output channel of the layer it is used in.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for both weight and bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        weight_shape: [usize; 4],
        bias_len: usize,
        fan_in: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let weight = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..bias_len).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor4::from_vec(weight_shape, weight).expect("sized above"),
            bias,
            stride,
            padding,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.height()
    }
}

/// Forward-convolution output extent `floor((i - f + 2p) / s) + 1`, or `None`
/// when the kernel does not fit the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Transposed-convolution output extent `s * (i - 1) + f - 2p`, or `None`
/// when the padding exceeds `f - 1` or the input is empty.
pub fn transp_output_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 || padding + 1 > kernel {
        return None;
    }
    Some(stride * (input - 1) + kernel - 2 * padding)
}

/// Output positions `o` in `0..out_len` for which `o * s + k - p` lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if in_len + p > k {
        ((in_len - 1 + p - k) / s + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    s: usize,
    p: usize,
}

fn conv_geometry(x: &Tensor4, weight: &Tensor4, stride: usize, padding: usize) -> Result<Geometry, NnError> {
    let [c_out, c_in, kh, kw] = weight.shape();
    if kh != kw {
        return Err(NnError::Shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if x.channels() != c_in {
        return Err(NnError::Shape(format!(
            "input has {} channels, kernel expects {c_in}",
            x.channels()
        )));
    }
    let out_h = conv_output_extent(x.height(), kh, padding, stride);
    let out_w = conv_output_extent(x.width(), kw, padding, stride);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(NnError::Shape(format!(
            "kernel {kh} with padding {padding} and stride {stride} does not fit input {}x{}",
            x.height(),
            x.width()
        )));
    };
    Ok(Geometry {
        c_in,
        c_out,
        in_h: x.height(),
        in_w: x.width(),
        out_h,
        out_w,
        k: kh,
        s: stride,
        p: padding,
    })
}

/// Cross-correlation of one sample, accumulated into `out` (which should hold the bias).
fn correlate_sample(g: &Geometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let out_c = &mut out[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c_in {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.s, g.p);
                for kx in 0..g.k {
                    let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.s, g.p);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.s + ky - g.p;
                        let x_row = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let o_row = &mut out_c[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            o_row[ox] += wv * x_row[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters `grad_out` of one sample back onto the input grid.
fn input_grad_sample(g: &Geometry, w: &[f64], grad_out: &[f64], dx: &mut [f64]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let up_c = &grad_out[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c_in {
            let dx_c = &mut dx[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.s, g.p);
                for kx in 0..g.k {
                    let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.s, g.p);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.s + ky - g.p;
                        for ox in ox_lo..ox_hi {
                            dx_c[iy * g.in_w + ox * g.s + kx - g.p] += wv * up_c[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient contribution of one sample, accumulated into `dw`.
fn weight_grad_sample(g: &Geometry, x: &[f64], grad_out: &[f64], dw: &mut [f64]) {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let up_c = &grad_out[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c_in {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.s, g.p);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.s, g.p);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.s + ky - g.p;
                        let x_row = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let u_row = &up_c[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            acc += u_row[ox] * x_row[ox * g.s + kx - g.p];
                        }
                    }
                    dw[((co * g.c_in + ci) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for part in parts {
        total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
    }
    total
}

/// Per-channel sum of `t` over batch and space.
fn channel_sums(t: &Tensor4) -> Vec<f64> {
    let [n, c, h, w] = t.shape();
    let plane = h * w;
    let mut sums = vec![0.0; c];
    for i in 0..n {
        for (ch, sum) in sums.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *sum += t.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    sums
}

/// Zero-padded cross-correlation.
pub fn conv2d_forward(x: &Tensor4, p: &Conv2dParams) -> Result<Tensor4, NnError> {
    let g = conv_geometry(x, &p.weight, p.stride, p.padding)?;
    if p.bias.len() != g.c_out {
        return Err(NnError::Shape(format!(
            "bias has {} entries for {} output channels",
            p.bias.len(),
            g.c_out
        )));
    }
    let out_plane = g.out_h * g.out_w;
    let mut out = Tensor4::zeros([x.batch(), g.c_out, g.out_h, g.out_w]);
    let sample_out = g.c_out * out_plane;
    if sample_out == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(n, o)| {
            for (co, &b) in p.bias.iter().enumerate() {
                o[co * out_plane..(co + 1) * out_plane].fill(b);
            }
            correlate_sample(&g, x.sample(n), p.weight.data(), o);
        });
    Ok(out)
}

/// Gradients of the loss w.r.t. input, weight and bias of a forward convolution.
pub struct ConvGrads {
    pub dx: Tensor4,
    pub dw: Tensor4,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor4, p: &Conv2dParams, upstream: &Tensor4) -> Result<ConvGrads, NnError> {
    let g = conv_geometry(x, &p.weight, p.stride, p.padding)?;
    let expected = [x.batch(), g.c_out, g.out_h, g.out_w];
    if upstream.shape() != expected {
        return Err(NnError::Shape(format!(
            "upstream {:?} does not match conv output {expected:?}",
            upstream.shape()
        )));
    }
    let mut dx = Tensor4::zeros(x.shape());
    let in_len = x.sample_len();
    let w_len = p.weight.len();
    let per_sample: Vec<Vec<f64>> = if in_len == 0 {
        Vec::new()
    } else {
        dx.data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .map(|(n, dx_n)| {
                input_grad_sample(&g, p.weight.data(), upstream.sample(n), dx_n);
                let mut dw = vec![0.0; w_len];
                weight_grad_sample(&g, x.sample(n), upstream.sample(n), &mut dw);
                dw
            })
            .collect()
    };
    Ok(ConvGrads {
        dx,
        dw: Tensor4::from_vec(p.weight.shape(), sum_in_order(per_sample, w_len))?,
        db: channel_sums(upstream),
    })
}

/// Transposed convolution, computed the textbook way: insert `s - 1` zeros
/// between input elements, pad by `f - 1 - p`, flip the kernel and run a
/// stride-1 correlation. Output extent is `s * (i - 1) + f - 2p`.
pub fn transp_conv2d_forward(x: &Tensor4, p: &Conv2dParams) -> Result<Tensor4, NnError> {
    let [c_in, c_out, k, kw] = p.weight.shape();
    if k != kw {
        return Err(NnError::Shape(format!("kernel must be square, got {k}x{kw}")));
    }
    if x.channels() != c_in {
        return Err(NnError::Shape(format!(
            "input has {} channels, transposed kernel expects {c_in}",
            x.channels()
        )));
    }
    if p.bias.len() != c_out {
        return Err(NnError::Shape(format!(
            "bias has {} entries for {c_out} output channels",
            p.bias.len()
        )));
    }
    let (s, pad) = (p.stride, p.padding);
    let (Some(out_h), Some(out_w)) = (
        transp_output_extent(x.height(), k, pad, s),
        transp_output_extent(x.width(), k, pad, s),
    ) else {
        return Err(NnError::Shape(format!(
            "transposed conv with kernel {k}, stride {s}, padding {pad} undefined for input {}x{}",
            x.height(),
            x.width()
        )));
    };

    // Flipped kernel with in/out channel axes swapped: (c_out, c_in, k, k).
    let mut flipped = Tensor4::zeros([c_out, c_in, k, k]);
    for ci in 0..c_in {
        for co in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = flipped.index(co, ci, k - 1 - ky, k - 1 - kx);
                    flipped.data_mut()[dst] = p.weight.get(ci, co, ky, kx);
                }
            }
        }
    }

    let edge = k - 1 - pad;
    let dil_h = s * (x.height() - 1) + 1 + 2 * edge;
    let dil_w = s * (x.width() - 1) + 1 + 2 * edge;
    let g = Geometry {
        c_in,
        c_out,
        in_h: dil_h,
        in_w: dil_w,
        out_h,
        out_w,
        k,
        s: 1,
        p: 0,
    };
    let out_plane = out_h * out_w;
    let mut out = Tensor4::zeros([x.batch(), c_out, out_h, out_w]);
    let sample_out = c_out * out_plane;
    if sample_out == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(n, o)| {
            let mut dilated = vec![0.0; c_in * dil_h * dil_w];
            let src = x.sample(n);
            let (h, w) = (x.height(), x.width());
            for ci in 0..c_in {
                for y in 0..h {
                    for xx in 0..w {
                        let dy = edge + y * s;
                        let dx = edge + xx * s;
                        dilated[(ci * dil_h + dy) * dil_w + dx] = src[(ci * h + y) * w + xx];
                    }
                }
            }
            for (co, &b) in p.bias.iter().enumerate() {
                o[co * out_plane..(co + 1) * out_plane].fill(b);
            }
            correlate_sample(&g, &dilated, flipped.data(), o);
        });
    Ok(out)
}

/// Backward pass of [`transp_conv2d_forward`]. The input gradient is the
/// strided correlation of `upstream` with the same kernel; the kernel gradient
/// is the forward-conv kernel gradient with the roles of input and output swapped.
pub fn transp_conv2d_backward(x: &Tensor4, p: &Conv2dParams, upstream: &Tensor4) -> Result<ConvGrads, NnError> {
    let [c_in, c_out, k, _] = p.weight.shape();
    let expected_h = transp_output_extent(x.height(), k, p.padding, p.stride);
    let expected_w = transp_output_extent(x.width(), k, p.padding, p.stride);
    if x.channels() != c_in
        || Some(upstream.height()) != expected_h
        || Some(upstream.width()) != expected_w
        || upstream.channels() != c_out
        || upstream.batch() != x.batch()
    {
        return Err(NnError::Shape(format!(
            "upstream {:?} inconsistent with input {:?} and kernel {:?}",
            upstream.shape(),
            x.shape(),
            p.weight.shape()
        )));
    }
    let as_conv = Conv2dParams {
        weight: p.weight.clone(),
        bias: vec![0.0; c_in],
        stride: p.stride,
        padding: p.padding,
    };
    let dx = conv2d_forward(upstream, &as_conv)?;

    let g = conv_geometry(upstream, &Tensor4::zeros([c_in, c_out, k, k]), p.stride, p.padding)?;
    let w_len = p.weight.len();
    let per_sample: Vec<Vec<f64>> = (0..x.batch())
        .into_par_iter()
        .map(|n| {
            let mut dw = vec![0.0; w_len];
            weight_grad_sample(&g, upstream.sample(n), x.sample(n), &mut dw);
            dw
        })
        .collect();
    Ok(ConvGrads {
        dx,
        dw: Tensor4::from_vec(p.weight.shape(), sum_in_order(per_sample, w_len))?,
        db: channel_sums(upstream),
    })
}
