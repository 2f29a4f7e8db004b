use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{ModelGraph, OutputKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Largest model the finite-difference check will perturb exhaustively.
pub const MAX_GRADCHECK_PARAMS: usize = 50_000;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` in registry order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

/// Compares analytic parameter gradients with central differences.
///
/// The scalar objective is a fixed random projection `sum(r * y)` of the
/// model output, so every layer including a trailing softmax is exercised.
/// Per tensor the error is `|a - n| / max(|a| + |n|, 1e-8)` with Euclidean
/// norms over the tensor's elements.
pub fn finite_diff_check(
    model: &mut ModelGraph,
    input: &Tensor,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let total = model.num_parameters();
    if total > MAX_GRADCHECK_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "{total} parameters exceed the gradient-check limit of {MAX_GRADCHECK_PARAMS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.predict(input, OutputKind::Probabilities)?;
    let projection: Vec<f64> = (0..out.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let objective = |m: &ModelGraph| -> Result<f64> {
        let y = m.predict(input, OutputKind::Probabilities)?;
        Ok(y.data().iter().zip(&projection).map(|(a, b)| a * b).sum())
    };

    model.zero_grad();
    let y = model.forward(input, OutputKind::Probabilities)?;
    model.backward(Tensor::new(y.shape().to_vec(), projection.clone())?)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .parameters()
        .into_iter()
        .map(|(n, t)| {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            (n, g)
        })
        .collect();
    model.zero_grad();

    let mut per_tensor = Vec::with_capacity(analytic.len());
    for (idx, (name, grad)) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let original = model.parameters()[idx].1.data()[j];
            set_param(model, idx, j, original + epsilon);
            let hi = objective(model)?;
            set_param(model, idx, j, original - epsilon);
            let lo = objective(model)?;
            set_param(model, idx, j, original);
            let numeric = (hi - lo) / (2.0 * epsilon);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-8);
        per_tensor.push((name.clone(), rel));
    }
    let max_relative_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_relative_error,
    })
}

fn set_param(model: &mut ModelGraph, idx: usize, j: usize, value: f64) {
    model.parameters_mut()[idx].1.data_mut()[j] = value;
}
