//! 2-d convolution with stride, zero padding and dilation.
//!
//! The kernels accumulate each output element over a fixed (channel, ky,
//! kx) order, so splitting the outer plane loop across threads never
//! changes a single bit of the result. Out-of-bounds taps read zero.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Geometry of a convolution: stride, zero padding and dilation (the
/// atrous rate). `dilation = 1` is an ordinary dense kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Result<ConvSpec> {
        if stride == 0 || dilation == 0 {
            return Err(shape_err!(
                "conv spec requires stride >= 1 and dilation >= 1, got stride {stride}, dilation {dilation}"
            ));
        }
        Ok(ConvSpec {
            stride,
            padding,
            dilation,
        })
    }

    /// Unit stride with the given padding and dilation.
    pub fn with_dilation(padding: usize, dilation: usize) -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, requiring the stride to divide the
    /// span exactly (a fractional output size is a spec error).
    fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let effective = self
            .dilation
            .checked_mul(kernel - 1)
            .and_then(|v| v.checked_add(1))
            .ok_or_else(|| shape_err!("kernel extent overflow"))?;
        let padded = input + 2 * self.padding;
        if padded < effective {
            return Err(shape_err!(
                "conv kernel (effective {effective}) larger than padded input {padded}"
            ));
        }
        let span = padded - effective;
        if span % self.stride != 0 {
            return Err(shape_err!(
                "conv output size not an integer: span {span} not divisible by stride {}",
                self.stride
            ));
        }
        Ok(span / self.stride + 1)
    }
}

struct ConvDims {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
}

fn check_dims(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<ConvDims> {
    let xd = x.dims();
    let wd = w.dims();
    let bd = b.dims();
    if xd.len() != 4 || wd.len() != 4 || bd.len() != 1 {
        return Err(shape_err!(
            "conv2d expects input N×C×H×W, weight O×C×K×K, bias O; got {:?}, {:?}, {:?}",
            xd,
            wd,
            bd
        ));
    }
    if wd[2] != wd[3] {
        return Err(shape_err!("conv2d kernel must be square, got {:?}", wd));
    }
    if wd[1] != xd[1] {
        return Err(shape_err!(
            "conv2d channel mismatch: input has {} channels, weight expects {}",
            xd[1],
            wd[1]
        ));
    }
    if bd[0] != wd[0] {
        return Err(shape_err!(
            "conv2d bias length {} does not match {} output channels",
            bd[0],
            wd[0]
        ));
    }
    let out_h = spec.output_extent(xd[2], wd[2])?;
    let out_w = spec.output_extent(xd[3], wd[2])?;
    Ok(ConvDims {
        batch: xd[0],
        in_c: xd[1],
        in_h: xd[2],
        in_w: xd[3],
        out_c: wd[0],
        kernel: wd[2],
        out_h,
        out_w,
    })
}

/// Records `conv2d(input, weight, bias)` on the tape with exact
/// reverse-mode gradients for all three operands.
pub fn conv2d(tape: &Tape, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
    let x = tape.value(input);
    let w = tape.value(weight);
    let b = tape.value(bias);
    let dims = check_dims(&x, &w, &b, spec)?;
    let out = forward(&x, &w, &b, spec, &dims);

    let spec = *spec;
    Ok(tape.push_op(
        out,
        Box::new(move |gout| {
            let dims = check_dims(&x, &w, &b, &spec).expect("conv dims already validated");
            let gx = backward_input(&w, gout, &spec, &dims);
            let gw = backward_weight(&x, gout, &spec, &dims);
            let gb = backward_bias(gout, &dims);
            vec![(input.0, gx), (weight.0, gw), (bias.0, gb)]
        }),
    ))
}

fn forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec, d: &ConvDims) -> Tensor {
    let plane = d.out_h * d.out_w;
    let mut out = vec![0.0; d.batch * d.out_c * plane];
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let (s, p, dil, k) = (spec.stride, spec.padding as isize, spec.dilation, d.kernel);

    out.par_chunks_mut(plane).enumerate().for_each(|(pi, dst)| {
        let n = pi / d.out_c;
        let o = pi % d.out_c;
        dst.fill(bs[o]);
        for c in 0..d.in_c {
            let x_plane = &xs[(n * d.in_c + c) * d.in_h * d.in_w..][..d.in_h * d.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = ws[((o * d.in_c + c) * k + ky) * k + kx];
                    let off_x = (kx * dil) as isize - p;
                    for oy in 0..d.out_h {
                        let iy = (oy * s) as isize + (ky * dil) as isize - p;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * d.in_w..][..d.in_w];
                        let dst_row = &mut dst[oy * d.out_w..][..d.out_w];
                        axpy_gather(dst_row, x_row, wv, s, off_x, d.in_w);
                    }
                }
            }
        }
    });

    Tensor::from_op(vec![d.batch, d.out_c, d.out_h, d.out_w], out)
}

/// `dst[ox] += wv * src[ox*stride + off]` for every in-bounds source index.
#[inline]
fn axpy_gather(dst: &mut [f64], src: &[f64], wv: f64, stride: usize, off: isize, src_len: usize) {
    if stride == 1 {
        let lo = (-off).max(0) as usize;
        let hi = ((src_len as isize - off).max(0) as usize).min(dst.len());
        if lo >= hi {
            return;
        }
        let src = &src[(lo as isize + off) as usize..][..hi - lo];
        for (dv, sv) in dst[lo..hi].iter_mut().zip(src) {
            *dv += wv * sv;
        }
    } else {
        for (ox, dv) in dst.iter_mut().enumerate() {
            let ix = (ox * stride) as isize + off;
            if ix >= 0 && (ix as usize) < src_len {
                *dv += wv * src[ix as usize];
            }
        }
    }
}

/// `dst[ox*stride + off] += wv * src[ox]`, the transpose of
/// [`axpy_gather`].
#[inline]
fn axpy_scatter(dst: &mut [f64], src: &[f64], wv: f64, stride: usize, off: isize, dst_len: usize) {
    if stride == 1 {
        let lo = (-off).max(0) as usize;
        let hi = ((dst_len as isize - off).max(0) as usize).min(src.len());
        if lo >= hi {
            return;
        }
        let dst = &mut dst[(lo as isize + off) as usize..][..hi - lo];
        for (dv, sv) in dst.iter_mut().zip(&src[lo..hi]) {
            *dv += wv * sv;
        }
    } else {
        for (ox, sv) in src.iter().enumerate() {
            let ix = (ox * stride) as isize + off;
            if ix >= 0 && (ix as usize) < dst_len {
                dst[ix as usize] += wv * sv;
            }
        }
    }
}

fn backward_input(w: &Tensor, gout: &Tensor, spec: &ConvSpec, d: &ConvDims) -> Tensor {
    let in_plane = d.in_h * d.in_w;
    let mut gx = vec![0.0; d.batch * d.in_c * in_plane];
    let (ws, gs) = (w.data(), gout.data());
    let (s, p, dil, k) = (spec.stride, spec.padding as isize, spec.dilation, d.kernel);

    gx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, dst)| {
        let n = pi / d.in_c;
        let c = pi % d.in_c;
        for o in 0..d.out_c {
            let g_plane = &gs[(n * d.out_c + o) * d.out_h * d.out_w..][..d.out_h * d.out_w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = ws[((o * d.in_c + c) * k + ky) * k + kx];
                    let off_x = (kx * dil) as isize - p;
                    for oy in 0..d.out_h {
                        let iy = (oy * s) as isize + (ky * dil) as isize - p;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * d.in_w..][..d.in_w];
                        let g_row = &g_plane[oy * d.out_w..][..d.out_w];
                        axpy_scatter(dst_row, g_row, wv, s, off_x, d.in_w);
                    }
                }
            }
        }
    });

    Tensor::from_op(vec![d.batch, d.in_c, d.in_h, d.in_w], gx)
}

fn backward_weight(x: &Tensor, gout: &Tensor, spec: &ConvSpec, d: &ConvDims) -> Tensor {
    let k = d.kernel;
    let mut gw = vec![0.0; d.out_c * d.in_c * k * k];
    let (xs, gs) = (x.data(), gout.data());
    let (s, p, dil) = (spec.stride, spec.padding as isize, spec.dilation);

    gw.par_chunks_mut(k * k).enumerate().for_each(|(pi, dst)| {
        let o = pi / d.in_c;
        let c = pi % d.in_c;
        for ky in 0..k {
            for kx in 0..k {
                let off_x = (kx * dil) as isize - p;
                let mut acc = 0.0;
                for n in 0..d.batch {
                    let x_plane = &xs[(n * d.in_c + c) * d.in_h * d.in_w..][..d.in_h * d.in_w];
                    let g_plane =
                        &gs[(n * d.out_c + o) * d.out_h * d.out_w..][..d.out_h * d.out_w];
                    for oy in 0..d.out_h {
                        let iy = (oy * s) as isize + (ky * dil) as isize - p;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * d.in_w..][..d.in_w];
                        let g_row = &g_plane[oy * d.out_w..][..d.out_w];
                        acc += dot_gather(g_row, x_row, s, off_x, d.in_w);
                    }
                }
                dst[ky * k + kx] = acc;
            }
        }
    });

    Tensor::from_op(vec![d.out_c, d.in_c, k, k], gw)
}

/// `sum over ox of g[ox] * src[ox*stride + off]`, in ascending `ox` order.
#[inline]
fn dot_gather(g: &[f64], src: &[f64], stride: usize, off: isize, src_len: usize) -> f64 {
    let mut acc = 0.0;
    if stride == 1 {
        let lo = (-off).max(0) as usize;
        let hi = ((src_len as isize - off).max(0) as usize).min(g.len());
        if lo >= hi {
            return 0.0;
        }
        let src = &src[(lo as isize + off) as usize..][..hi - lo];
        for (gv, sv) in g[lo..hi].iter().zip(src) {
            acc += gv * sv;
        }
    } else {
        for (ox, gv) in g.iter().enumerate() {
            let ix = (ox * stride) as isize + off;
            if ix >= 0 && (ix as usize) < src_len {
                acc += gv * src[ix as usize];
            }
        }
    }
    acc
}

fn backward_bias(gout: &Tensor, d: &ConvDims) -> Tensor {
    let plane = d.out_h * d.out_w;
    let gs = gout.data();
    let mut gb = vec![0.0; d.out_c];
    for n in 0..d.batch {
        for (o, gv) in gb.iter_mut().enumerate() {
            let g_plane = &gs[(n * d.out_c + o) * plane..][..plane];
            for g in g_plane {
                *gv += g;
            }
        }
    }
    Tensor::from_op(vec![d.out_c], gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::sum_all;
    use crate::params::ParamSet;

    fn t(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(dims, data).unwrap()
    }

    fn run_conv(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let bv = tape.leaf(b);
        let y = conv2d(&tape, xv, wv, bv, &spec)?;
        Ok(tape.value(y))
    }

    #[test]
    fn identity_kernel_returns_input() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let out = run_conv(
            t(vec![1, 1, 4, 4], data.clone()),
            t(vec![1, 1, 1, 1], vec![1.0]),
            t(vec![1], vec![0.0]),
            ConvSpec::new(1, 0, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn ones_kernel_with_padding_counts_neighbours() {
        let out = run_conv(
            t(vec![1, 1, 3, 3], vec![1.0; 9]),
            t(vec![1, 1, 3, 3], vec![1.0; 9]),
            t(vec![1], vec![0.0]),
            ConvSpec::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(
            out.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn shape_rule_64x128() {
        let out = run_conv(
            Tensor::zeros(vec![1, 3, 64, 128]),
            Tensor::zeros(vec![16, 3, 3, 3]),
            Tensor::zeros(vec![16]),
            ConvSpec::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(out.dims(), &[1, 16, 64, 128]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let err = run_conv(
            Tensor::zeros(vec![1, 3, 8, 8]),
            Tensor::zeros(vec![4, 2, 3, 3]),
            Tensor::zeros(vec![4]),
            ConvSpec::new(1, 1, 1).unwrap(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("channel mismatch"));
    }

    #[test]
    fn fractional_output_size_is_spec_error() {
        // (5 + 0 - 2 - 1) = 2 not divisible by stride 4
        let err = run_conv(
            Tensor::zeros(vec![1, 1, 5, 5]),
            Tensor::zeros(vec![1, 1, 3, 3]),
            Tensor::zeros(vec![1]),
            ConvSpec::new(4, 0, 1).unwrap(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not an integer"));
    }

    #[test]
    fn centered_delta_kernel_is_identity_for_any_input() {
        // 3x3 kernel with a 1 at the center, padding 1.
        let data: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let out = run_conv(
            t(vec![1, 1, 5, 6], data.clone()),
            t(vec![1, 1, 3, 3], w),
            t(vec![1], vec![0.0]),
            ConvSpec::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    /// Zero-upsamples a K×K kernel by `d` into the equivalent dense kernel.
    fn upsample_kernel(w: &Tensor, d: usize) -> Tensor {
        let dims = w.dims().to_vec();
        let (o, c, k) = (dims[0], dims[1], dims[2]);
        let ku = d * (k - 1) + 1;
        let mut out = vec![0.0; o * c * ku * ku];
        for oi in 0..o {
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((oi * c + ci) * ku + ky * d) * ku + kx * d] =
                            w.data()[((oi * c + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        Tensor::new(vec![o, c, ku, ku], out).unwrap()
    }

    #[test]
    fn dilated_conv_equals_zero_upsampled_dense_kernel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &dil in &[2usize, 3] {
            let x = t(
                vec![1, 2, 10, 11],
                (0..220).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let w = t(
                vec![3, 2, 3, 3],
                (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let b = t(vec![3], vec![0.1, -0.2, 0.3]);
            let dilated = run_conv(
                x.clone(),
                w.clone(),
                b.clone(),
                ConvSpec::new(1, dil, dil).unwrap(),
            )
            .unwrap();
            let dense = run_conv(
                x,
                upsample_kernel(&w, dil),
                b,
                ConvSpec::new(1, dil, 1).unwrap(),
            )
            .unwrap();
            assert_eq!(dilated.dims(), dense.dims());
            assert!(dilated.max_abs_diff(&dense).unwrap() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = t(
            vec![2, 3, 12, 16],
            (0..2 * 3 * 12 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let w = t(
            vec![4, 3, 3, 3],
            (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let b = t(vec![4], vec![0.1, 0.2, -0.3, 0.4]);
        let spec = ConvSpec::new(1, 1, 1).unwrap();
        let a = run_conv(x.clone(), w.clone(), b.clone(), spec).unwrap();
        let c = run_conv(x, w, b, spec).unwrap();
        assert!(a.bitwise_eq(&c));
    }

    #[test]
    fn gradient_dims_match_operands() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 6, 8]));
        let w = tape.leaf(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = conv2d(&tape, x, w, b, &ConvSpec::new(1, 1, 1).unwrap()).unwrap();
        let loss = sum_all(&tape, y);
        let mut ps = ParamSet::new();
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads.get(x).unwrap().dims(), &[1, 2, 6, 8]);
        assert_eq!(grads.get(w).unwrap().dims(), &[3, 2, 3, 3]);
        assert_eq!(grads.get(b).unwrap().dims(), &[3]);
    }
}
