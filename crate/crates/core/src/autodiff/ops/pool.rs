//! Max pooling with gradient routing to the window argmax.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Window maximum over `kernel`×`kernel` patches moved by `stride`. The
/// input extent minus the kernel must be divisible by the stride. On ties
/// the gradient routes to the first maximum in row-major window order.
pub fn max_pool2d(tape: &Tape, input: Var, kernel: usize, stride: usize) -> Result<Var> {
    if kernel == 0 || stride == 0 {
        return Err(shape_err!("max_pool2d requires kernel >= 1 and stride >= 1"));
    }
    let x = tape.value(input);
    let xd = x.dims();
    if xd.len() != 4 {
        return Err(shape_err!("max_pool2d expects N×C×H×W, got {:?}", xd));
    }
    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
    if h < kernel || w < kernel || (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
        return Err(shape_err!(
            "max_pool2d size {h}×{w} not divisible for kernel {kernel}, stride {stride}"
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;

    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut out = vec![0.0; n * c * out_plane];
    let mut argmax = vec![0usize; n * c * out_plane];
    let xs = x.data();
    for plane in 0..n * c {
        let src = &xs[plane * in_plane..][..in_plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        let v = src[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out[plane * out_plane + oy * ow + ox] = best;
                argmax[plane * out_plane + oy * ow + ox] = best_idx;
            }
        }
    }

    let in_dims = xd.to_vec();
    Ok(tape.push_op(
        Tensor::from_op(vec![n, c, oh, ow], out),
        Box::new(move |gout| {
            let mut gx = vec![0.0; n * c * in_plane];
            let gs = gout.data();
            for plane in 0..n * c {
                let dst = &mut gx[plane * in_plane..][..in_plane];
                for (g, &idx) in gs[plane * out_plane..][..out_plane]
                    .iter()
                    .zip(&argmax[plane * out_plane..][..out_plane])
                {
                    dst[idx] += g;
                }
            }
            vec![(input.0, Tensor::from_op(in_dims.clone(), gx))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::sum_all;
    use crate::params::ParamSet;

    #[test]
    fn two_by_two_window() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = max_pool2d(&tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 2, 6, 6], 3.5).unwrap());
        let y = max_pool2d(&tape, x, 2, 2).unwrap();
        let out = tape.value(y);
        assert_eq!(out.dims(), &[1, 2, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn matches_brute_force_window_max() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 8, 8], data.clone()).unwrap());
        let y = max_pool2d(&tape, x, 2, 2).unwrap();
        let out = tape.value(y);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut expect = f64::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        expect = expect.max(data[(oy * 2 + ky) * 8 + ox * 2 + kx]);
                    }
                }
                assert_eq!(out.data()[oy * 4 + ox], expect);
            }
        }
    }

    #[test]
    fn indivisible_size_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 6]));
        assert!(max_pool2d(&tape, x, 2, 2).is_err());
    }

    #[test]
    fn tie_routes_gradient_to_first_maximum() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap());
        let y = max_pool2d(&tape, x, 2, 2).unwrap();
        let loss = sum_all(&tape, y);
        let mut ps = ParamSet::new();
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
