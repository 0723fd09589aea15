//! Central-finite-difference gradient verification.
//!
//! The checker re-runs the closed-over function at perturbed points, so
//! it stays independent of the tape's backward pass by construction.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

/// Max over all coordinates of |autodiff - central-diff| / max(1, |central-diff|).
///
/// `f` must build a scalar output from leaves created in order from `points`.
/// Returns NaN if the function evaluates non-finite at any probe.
pub fn gradcheck<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    gradcheck_at(f, points, step, &coords)
}

/// Like [`gradcheck`] but only at `n_coords` randomly chosen coordinates;
/// for large parameter vectors where the full sweep is wasteful.
pub fn gradcheck_sampled<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let mut chosen = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        chosen.push(all[rng.below(all.len())]);
    }
    gradcheck_at(f, points, step, &chosen)
}

fn gradcheck_at<F>(f: F, points: &[Tensor], step: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    // analytic gradients once
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut scratch: Vec<Tensor> = points.to_vec();
    for &(pi, ci) in coords {
        let orig = scratch[pi].data()[ci];
        scratch[pi].data_mut()[ci] = orig + step;
        let up = eval(&scratch)?;
        scratch[pi].data_mut()[ci] = orig - step;
        let down = eval(&scratch)?;
        scratch[pi].data_mut()[ci] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Ok(f64::NAN);
        }
        let fd = (up - down) / (2.0 * step);
        let ad = grads.grad(vars[pi], &tape).data()[ci];
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let point = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = gradcheck(
            |tape, vars| {
                let s = tape.scale(vars[0], 3.5)?;
                tape.sum(s)
            },
            &[point],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn swish_affine_chain_matches_finite_differences() {
        let mut rng = Rng::seed(42);
        let x = Tensor::randn(&[5], &mut rng);
        let w = Tensor::randn(&[3, 5], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let err = gradcheck(
            |tape, vars| {
                let y = tape.affine(vars[0], vars[1], vars[2])?;
                let s = tape.swish(y)?;
                tape.sum(s)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
