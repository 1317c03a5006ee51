//! Bilinear resampling with the align-corners convention: corner pixels of
//! the output map exactly onto corner pixels of the input.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Per-axis sample: the two source indices and the interpolation weight of
/// the upper one.
#[derive(Clone, Copy)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    let scale = if out_len > 1 {
        (in_len - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = (pos.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            AxisTap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Resizes `N×C×H×W` to `N×C×out_h×out_w`; differentiable.
pub fn bilinear_resize(tape: &Tape, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_resize target size must be >= 1"));
    }
    let x = tape.value(input);
    let xd = x.dims();
    if xd.len() != 4 || xd[2] == 0 || xd[3] == 0 {
        return Err(shape_err!("bilinear_resize expects non-empty N×C×H×W, got {:?}", xd));
    }
    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
    let ys = axis_taps(h, out_h);
    let xs_taps = axis_taps(w, out_w);

    let in_plane = h * w;
    let out_plane = out_h * out_w;
    let src = x.data();
    let mut out = vec![0.0; n * c * out_plane];
    for plane in 0..n * c {
        let sp = &src[plane * in_plane..][..in_plane];
        let dp = &mut out[plane * out_plane..][..out_plane];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs_taps.iter().enumerate() {
                let a = sp[ty.lo * w + tx.lo];
                let b = sp[ty.lo * w + tx.hi];
                let c2 = sp[ty.hi * w + tx.lo];
                let d = sp[ty.hi * w + tx.hi];
                dp[oy * out_w + ox] = (1.0 - ty.frac) * (1.0 - tx.frac) * a
                    + (1.0 - ty.frac) * tx.frac * b
                    + ty.frac * (1.0 - tx.frac) * c2
                    + ty.frac * tx.frac * d;
            }
        }
    }

    let in_dims = xd.to_vec();
    Ok(tape.push_op(
        Tensor::from_op(vec![n, c, out_h, out_w], out),
        Box::new(move |gout| {
            let gs = gout.data();
            let mut gx = vec![0.0; n * c * in_plane];
            for plane in 0..n * c {
                let gp = &gs[plane * out_plane..][..out_plane];
                let dp = &mut gx[plane * in_plane..][..in_plane];
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs_taps.iter().enumerate() {
                        let g = gp[oy * out_w + ox];
                        dp[ty.lo * w + tx.lo] += (1.0 - ty.frac) * (1.0 - tx.frac) * g;
                        dp[ty.lo * w + tx.hi] += (1.0 - ty.frac) * tx.frac * g;
                        dp[ty.hi * w + tx.lo] += ty.frac * (1.0 - tx.frac) * g;
                        dp[ty.hi * w + tx.hi] += ty.frac * tx.frac * g;
                    }
                }
            }
            vec![(input.0, Tensor::from_op(in_dims.clone(), gx))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resize(t: Tensor, oh: usize, ow: usize) -> Tensor {
        let tape = Tape::new();
        let x = tape.leaf(t);
        let y = bilinear_resize(&tape, x, oh, ow).unwrap();
        tape.value(y)
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = resize(Tensor::full(vec![1, 2, 3, 3], 2.5).unwrap(), 7, 5);
        assert_eq!(out.dims(), &[1, 2, 7, 5]);
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_to_three_by_three_hand_weights() {
        let out = resize(
            Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            3,
            3,
        );
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (got, want) in out.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64).cos()).collect();
        let t = Tensor::new(vec![1, 2, 3, 4], data.clone()).unwrap();
        let out = resize(t, 3, 4);
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn corners_map_to_corners() {
        let t = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let out = resize(t, 9, 9);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[8], 2.0);
        assert_eq!(out.data()[72], 6.0);
        assert_eq!(out.data()[80], 8.0);
    }

    #[test]
    fn single_pixel_target() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = resize(t, 1, 1);
        // align-corners with a single output sample reads the (0,0) corner
        assert_eq!(out.data(), &[1.0]);
    }
}
