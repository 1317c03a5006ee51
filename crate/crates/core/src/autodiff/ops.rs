//! Differentiable operations recorded on a [`Tape`].
//!
//! Every op validates shapes up front, computes its output eagerly, and
//! registers a backward closure. Reductions inside kernels always run in a
//! fixed element order, so results are bitwise reproducible regardless of
//! how much internal parallelism is in play.

mod conv;
mod pool;
mod resize;

pub use conv::{conv2d, ConvSpec};
pub use pool::max_pool2d;
pub use resize::bilinear_resize;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `out = input · weightᵀ + bias` for `input: N×F`, `weight: G×F`, `bias: G`.
pub fn linear(tape: &Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let x = tape.value(input);
    let w = tape.value(weight);
    let b = tape.value(bias);
    let (xd, wd, bd) = (x.dims(), w.dims(), b.dims());
    if xd.len() != 2 || wd.len() != 2 || bd.len() != 1 {
        return Err(shape_err!(
            "linear expects input N×F, weight G×F, bias G; got {:?}, {:?}, {:?}",
            xd,
            wd,
            bd
        ));
    }
    let (n, f) = (xd[0], xd[1]);
    let (g, wf) = (wd[0], wd[1]);
    if wf != f || bd[0] != g {
        return Err(shape_err!(
            "linear inner dims disagree: input {:?}, weight {:?}, bias {:?}",
            xd,
            wd,
            bd
        ));
    }

    let mut out = vec![0.0; n * g];
    for row in 0..n {
        let xrow = &x.data()[row * f..(row + 1) * f];
        for col in 0..g {
            let wrow = &w.data()[col * f..(col + 1) * f];
            let mut acc = b.data()[col];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            out[row * g + col] = acc;
        }
    }

    let (xc, wc) = (x.clone(), w.clone());
    Ok(tape.push_op(
        Tensor::from_op(vec![n, g], out),
        Box::new(move |gout| {
            let go = gout.data();
            let mut gx = vec![0.0; n * f];
            for row in 0..n {
                for fi in 0..f {
                    let mut acc = 0.0;
                    for col in 0..g {
                        acc += go[row * g + col] * wc.data()[col * f + fi];
                    }
                    gx[row * f + fi] = acc;
                }
            }
            let mut gw = vec![0.0; g * f];
            let mut gb = vec![0.0; g];
            for col in 0..g {
                for fi in 0..f {
                    let mut acc = 0.0;
                    for row in 0..n {
                        acc += go[row * g + col] * xc.data()[row * f + fi];
                    }
                    gw[col * f + fi] = acc;
                }
                let mut acc = 0.0;
                for row in 0..n {
                    acc += go[row * g + col];
                }
                gb[col] = acc;
            }
            vec![
                (input.0, Tensor::from_op(vec![n, f], gx)),
                (weight.0, Tensor::from_op(vec![g, f], gw)),
                (bias.0, Tensor::from_op(vec![g], gb)),
            ]
        }),
    ))
}

/// `max(0, x)`; the subgradient at exactly zero is zero.
pub fn relu(tape: &Tape, input: Var) -> Var {
    let x = tape.value(input);
    let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
    tape.push_op(
        out,
        Box::new(move |gout| {
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![(input.0, Tensor::from_op(x.dims().to_vec(), data))]
        }),
    )
}

/// `log(1 + e^x)`, computed without overflow for large |x|.
pub fn softplus(tape: &Tape, input: Var) -> Var {
    let x = tape.value(input);
    let out = x.map(softplus_scalar);
    tape.push_op(
        out,
        Box::new(move |gout| {
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| g * sigmoid_scalar(v))
                .collect();
            vec![(input.0, Tensor::from_op(x.dims().to_vec(), data))]
        }),
    )
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stacks 4-d inputs along the channel axis; all other dims must agree.
pub fn concat_channels(tape: &Tape, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(shape_err!("concat_channels needs at least one input"));
    }
    let values: Vec<Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let first = values[0].dims().to_vec();
    if first.len() != 4 {
        return Err(shape_err!("concat_channels expects N×C×H×W, got {:?}", first));
    }
    let (n, h, w) = (first[0], first[2], first[3]);
    let mut channels = Vec::with_capacity(values.len());
    for value in &values {
        let d = value.dims();
        if d.len() != 4 || d[0] != n || d[2] != h || d[3] != w {
            return Err(shape_err!(
                "concat_channels dims disagree: {:?} vs {:?}",
                first,
                d
            ));
        }
        channels.push(d[1]);
    }
    let total_c: usize = channels.iter().sum();
    let plane = h * w;

    let mut out = Vec::with_capacity(n * total_c * plane);
    for batch in 0..n {
        for value in &values {
            let c = value.dims()[1];
            let start = batch * c * plane;
            out.extend_from_slice(&value.data()[start..start + c * plane]);
        }
    }

    let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
    let chans = channels.clone();
    Ok(tape.push_op(
        Tensor::from_op(vec![n, total_c, h, w], out),
        Box::new(move |gout| {
            let go = gout.data();
            let mut result = Vec::with_capacity(parents.len());
            let mut offset_c = 0usize;
            for (&parent, &c) in parents.iter().zip(&chans) {
                let mut g = Vec::with_capacity(n * c * plane);
                for batch in 0..n {
                    let start = (batch * total_c + offset_c) * plane;
                    g.extend_from_slice(&go[start..start + c * plane]);
                }
                result.push((parent, Tensor::from_op(vec![n, c, h, w], g)));
                offset_c += c;
            }
            result
        }),
    ))
}

/// View under new dims (numel preserved); gradient reshapes back.
pub fn reshape(tape: &Tape, input: Var, dims: Vec<usize>) -> Result<Var> {
    let x = tape.value(input);
    let out = x.reshaped(dims)?;
    let in_dims = x.dims().to_vec();
    Ok(tape.push_op(
        out,
        Box::new(move |gout| {
            let g = gout
                .reshaped(in_dims.clone())
                .expect("reshape backward: numel preserved");
            vec![(input.0, g)]
        }),
    ))
}

/// Elementwise sum of two vars with identical dims.
pub fn add(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let av = tape.value(a);
    let bv = tape.value(b);
    let out = av.add(&bv)?;
    Ok(tape.push_op(
        out,
        Box::new(move |gout| vec![(a.0, gout.clone()), (b.0, gout.clone())]),
    ))
}

/// Elementwise difference `a - b`.
pub fn sub(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let av = tape.value(a);
    let bv = tape.value(b);
    if av.dims() != bv.dims() {
        return Err(shape_err!(
            "sub dims mismatch: {:?} vs {:?}",
            av.dims(),
            bv.dims()
        ));
    }
    let data = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(x, y)| x - y)
        .collect();
    Ok(tape.push_op(
        Tensor::from_op(av.dims().to_vec(), data),
        Box::new(move |gout| {
            let neg = gout.map(|g| -g);
            vec![(a.0, gout.clone()), (b.0, neg)]
        }),
    ))
}

/// Elementwise product of two vars with identical dims.
pub fn mul(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let av = tape.value(a);
    let bv = tape.value(b);
    if av.dims() != bv.dims() {
        return Err(shape_err!(
            "mul dims mismatch: {:?} vs {:?}",
            av.dims(),
            bv.dims()
        ));
    }
    let data = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(x, y)| x * y)
        .collect();
    Ok(tape.push_op(
        Tensor::from_op(av.dims().to_vec(), data),
        Box::new(move |gout| {
            let ga = gout
                .data()
                .iter()
                .zip(bv.data())
                .map(|(g, y)| g * y)
                .collect();
            let gb = gout
                .data()
                .iter()
                .zip(av.data())
                .map(|(g, x)| g * x)
                .collect();
            vec![
                (a.0, Tensor::from_op(bv.dims().to_vec(), ga)),
                (b.0, Tensor::from_op(av.dims().to_vec(), gb)),
            ]
        }),
    ))
}

/// Multiplication by a constant.
pub fn scale(tape: &Tape, input: Var, factor: f64) -> Var {
    let x = tape.value(input);
    let out = x.map(|v| v * factor);
    tape.push_op(
        out,
        Box::new(move |gout| vec![(input.0, gout.map(|g| g * factor))]),
    )
}

/// Reduces all elements to a single scalar by summation in row-major order.
pub fn sum_all(tape: &Tape, input: Var) -> Var {
    let x = tape.value(input);
    let mut acc = 0.0;
    for v in x.data() {
        acc += v;
    }
    let dims = x.dims().to_vec();
    tape.push_op(
        Tensor::from_op(vec![1], vec![acc]),
        Box::new(move |gout| {
            let g = gout.data()[0];
            vec![(input.0, Tensor::from_op(dims.clone(), vec![g; dims.iter().product()]))]
        }),
    )
}
