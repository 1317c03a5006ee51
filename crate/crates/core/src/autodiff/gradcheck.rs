//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckResult {
    /// Worst relative error `|a - n| / max(1e-8, |a| + |n|)` over all
    /// checked elements.
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the worst error lives.
    pub worst: Option<(String, usize)>,
    /// Number of elements compared.
    pub checked: usize,
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε` for every element of every
/// parameter.
pub fn grad_check<F>(params: &mut ParamSet, epsilon: f64, build: F) -> Result<GradCheckResult>
where
    F: Fn(&ParamSet, &Tape) -> Result<Var>,
{
    grad_check_at(params, epsilon, build, None)
}

/// Like [`grad_check`] but compares at most `per_param` seeded-random
/// elements of each parameter, for models too large to sweep exhaustively.
pub fn grad_check_sampled<F>(
    params: &mut ParamSet,
    epsilon: f64,
    per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckResult>
where
    F: Fn(&ParamSet, &Tape) -> Result<Var>,
{
    grad_check_at(params, epsilon, build, Some((per_param, seed)))
}

fn grad_check_at<F>(
    params: &mut ParamSet,
    epsilon: f64,
    build: F,
    sampling: Option<(usize, u64)>,
) -> Result<GradCheckResult>
where
    F: Fn(&ParamSet, &Tape) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(config_err!("grad_check epsilon must be positive"));
    }

    params.zero_grads();
    let tape = Tape::new();
    let loss = build(params, &tape)?;
    tape.backward(loss, params)?;

    let analytic: Vec<(String, Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let eval = |params: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let loss = build(params, &tape)?;
        tape.value(loss).item()
    };

    let mut result = GradCheckResult {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };

    for (name, grad) in &analytic {
        let original = params.get(name)?.value.clone();
        let numel = original.numel();
        let indices: Vec<usize> = match sampling {
            Some((per_param, seed)) if per_param < numel => {
                // Seed per parameter so the picked subset is independent of
                // which other parameters exist.
                let mut hash = seed;
                for byte in name.bytes() {
                    hash = hash.wrapping_mul(0x100000001b3).wrapping_add(byte as u64);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(hash);
                let mut all: Vec<usize> = (0..numel).collect();
                all.shuffle(&mut rng);
                all.truncate(per_param);
                all.sort_unstable();
                all
            }
            _ => (0..numel).collect(),
        };

        for idx in indices {
            let mut plus = original.data().to_vec();
            plus[idx] += epsilon;
            params.set_value(name, Tensor::new(original.dims().to_vec(), plus)?)?;
            let f_plus = eval(params)?;

            let mut minus = original.data().to_vec();
            minus[idx] -= epsilon;
            params.set_value(name, Tensor::new(original.dims().to_vec(), minus)?)?;
            let f_minus = eval(params)?;

            params.set_value(name, original.clone())?;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            result.checked += 1;
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = Some((name.clone(), idx));
            }
        }
    }

    Ok(result)
}
