//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs at `f64`: the generic ops are instantiated at double precision so the
//! central-difference quotient resolves well below the acceptance tolerances.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Relative error with the denominator floored at 1e-4: coordinates where
/// both gradients are tiny are effectively compared with an absolute
/// tolerance instead of amplifying finite-difference roundoff.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the reverse-mode gradient of `graph` against central finite
/// differences at every coordinate of every input. Returns the maximum
/// relative error. `graph` must return a scalar tensor. Inputs must be
/// gradient-tracking leaves.
pub fn grad_check<F>(graph: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_coords(graph, inputs, eps, None, 0)
}

/// As [`grad_check`] but probing at most `coords_per_input` seeded random
/// coordinates of each input — for graphs too large to probe exhaustively.
pub fn grad_check_sampled<F>(
    graph: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords_per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_coords(graph, inputs, eps, Some(coords_per_input), seed)
}

fn check_coords<F>(
    graph: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords_per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            return Err(Error::invalid(
                "grad_check",
                format!("input {idx} does not track gradients"),
            ));
        }
        input.zero_grad();
    }

    let loss = graph(inputs)?;
    if loss.len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("graph output must be scalar, got shape {:?}", loss.shape()),
        ));
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for input in inputs {
        input.zero_grad();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match coords_per_input {
            Some(k) if k < input.len() => {
                let mut all: Vec<usize> = (0..input.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let original = input.data()[j];
            input.data_mut()[j] = original + eps;
            let up = graph(inputs)?.item();
            input.data_mut()[j] = original - eps;
            let down = graph(inputs)?.item();
            input.data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[ti][j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{l1_loss, mul_scalar, tanh};

    #[test]
    fn linear_map_is_exact() {
        // y = 3x summed to a scalar via l1 against zero with positive x.
        let x = Tensor::<f64>::param(vec![4], vec![0.5, 1.5, 2.0, 0.25]);
        let zero = Tensor::<f64>::from_vec(vec![4], vec![0.0; 4]);
        let f = |inputs: &[Tensor<f64>]| {
            let y = mul_scalar(&inputs[0], 3.0);
            l1_loss(&y, &zero)
        };
        let err = grad_check(&f, &[x], 1e-6).unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn tanh_chain_depth_three() {
        let x = Tensor::<f64>::param(vec![5], vec![0.3, -0.7, 1.1, 0.05, -1.9]);
        let target = Tensor::<f64>::from_vec(vec![5], vec![0.1; 5]);
        let f = |inputs: &[Tensor<f64>]| {
            let y = tanh(&tanh(&tanh(&inputs[0])));
            l1_loss(&y, &target)
        };
        let err = grad_check(&f, &[x], 1e-6).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn rejects_non_scalar_graphs() {
        let x = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]);
        let f = |inputs: &[Tensor<f64>]| Ok(tanh(&inputs[0]));
        assert!(grad_check(&f, &[x], 1e-6).is_err());
    }
}
