use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords: 48, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖∞ / max(‖numeric‖∞, 1e-6·G, 1e-8)` over
    /// probed coordinates, where `G` is the largest `‖numeric‖∞` of any input.
    /// Each difference is first reduced by the round-off bound of its numeric
    /// estimate.
    /// The `G` floor keeps inputs whose gradient nearly vanishes from turning
    /// central-difference round-off into an arbitrarily large ratio.
    pub per_input: Vec<f64>,
    pub max_relative_error: f64,
}

/// Compare the tape's adjoints against central differences.
///
/// Each probed coordinate starts with step `eps`; see [`derivative`] for the
/// refinement near kinks. `op` builds the computation from one `Var` per input. A non-scalar output
/// is reduced with a fixed random projection.
pub fn finite_difference_check<F>(op: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { eps, ..Default::default() };
    Ok(finite_difference_check_with(op, inputs, &opts)?.max_relative_error)
}

pub fn finite_difference_check_with<F>(op: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("gradient check eps {} outside [1e-6, 1e-3]", opts.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&tape, &vars)?;
    let out_shape = tape.shape(out);
    let projection = Tensor::from_fn(out_shape.clone(), |_| rng.gen_range(-1.0..1.0));
    let loss = project(&tape, out, &projection)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&tape, &vars)?;
        let loss = project(&tape, out, &projection)?;
        Ok(tape.value(loss).item())
    };

    let mut stats = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let mut worst_diff = 0.0f64;
        let mut numeric_scale = 0.0f64;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for &j in &coords {
            let x0 = input.data()[j];
            let (numeric, noise) = derivative(
                |h| {
                    work[i].make_mut()[j] = x0 + h;
                    let up = eval(&work)?;
                    work[i].make_mut()[j] = x0 - h;
                    let down = eval(&work)?;
                    work[i].make_mut()[j] = x0;
                    Ok((up, down))
                },
                opts.eps,
            )?;
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!("central difference for input {i}[{j}] is not finite")));
            }
            worst_diff = worst_diff.max((analytic[i].data()[j] - numeric).abs() - noise);
            numeric_scale = numeric_scale.max(numeric.abs());
        }
        stats.push((worst_diff, numeric_scale));
    }
    let global = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    let per_input: Vec<f64> = stats.iter().map(|&(d, n)| d / n.max(1e-6 * global).max(1e-8)).collect();
    let max_relative_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { per_input, max_relative_error })
}

/// Halvings allowed while looking for a step that does not straddle a kink.
const MAX_HALVINGS: usize = 12;

/// Central difference at `eps` and `eps/2`, Richardson-extrapolated when the two
/// agree. Disagreement means a kink (ReLU, max pool) lies inside the bracket,
/// so the step is halved until a smooth bracket is found. Also returns the
/// round-off bound of the final difference.
fn derivative(mut at: impl FnMut(f64) -> Result<(f64, f64)>, eps: f64) -> Result<(f64, f64)> {
    let mut central = |h: f64| -> Result<(f64, f64)> {
        let (up, down) = at(h)?;
        Ok(((up - down) / (2.0 * h), 64.0 * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * h)))
    };
    let mut h = eps;
    let (mut coarse, mut coarse_noise) = central(h)?;
    for _ in 0..MAX_HALVINGS {
        h *= 0.5;
        let (fine, noise) = central(h)?;
        if (fine - coarse).abs() <= 1e-6 * fine.abs().max(coarse.abs()) + noise {
            return Ok((fine + (fine - coarse) / 3.0, 2.0 * noise));
        }
        (coarse, coarse_noise) = (fine, noise);
    }
    Ok((coarse, coarse_noise))
}

fn project(tape: &Tape, out: Var, projection: &Tensor) -> Result<Var> {
    if projection.numel() == 1 {
        return tape.reshape(out, &[]);
    }
    let p = tape.constant(projection.clone());
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let x = Tensor::new([4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let sq = t.square(v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_op_has_zero_gradients() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = finite_difference_check_with(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_adjoint_is_detected() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = finite_difference_check_with(
            |t, v| {
                let xv = t.value(v[0]);
                let y = Tensor::from_fn([3], |i| xv.data()[i] * xv.data()[i]);
                // claims d(x²)/dx = 3x
                t.record1("bad_square", &[v[0]], y, move |g, _| {
                    vec![Some(Tensor::from_fn([3], |i| 3.0 * xv.data()[i] * g[0].data()[i]))]
                })
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error > 0.3, "{report:?}");
    }

    #[test]
    fn kink_inside_the_first_bracket_is_resolved() {
        // 3e-6 from the ReLU kink, well inside a 1e-5 bracket
        let x = Tensor::new([2], vec![3e-6, -2e-6]).unwrap();
        let report = finite_difference_check_with(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::zeros([1]);
        assert!(finite_difference_check(|t, v| t.sum(v[0]), &[x], 1e-2).is_err());
    }
}
