use super::graph::ModelGraph;
use super::layers::softmax_axis1;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Learning rate used by every classifier configuration unless overridden.
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// Row-wise softmax of `[n, C]` (or per-pixel for `[n, C, H, W]`).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    softmax_axis1(logits)
}

/// Mean cross-entropy of `[n, C]` logits against class indices.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        ));
    }
    let c = logits.shape()[1];
    pixel_cross_entropy(
        &logits.clone().reshape(vec![labels.len(), c, 1, 1])?,
        labels,
        &vec![1.0; c],
    )
    .and_then(|(loss, g)| Ok((loss, g.reshape(vec![labels.len(), c])?)))
}

/// Class-weighted per-pixel cross-entropy for `[n, C, H, W]` logits.
///
/// `labels` holds one class index per pixel in `n, H, W` order. The loss is
/// normalised by the total weight of the labelled pixels.
pub fn pixel_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(shape_err!("pixel cross-entropy needs [n,C,H,W], got {s:?}"));
    }
    let (n, c) = (s[0], s[1]);
    let inner = s[2] * s[3];
    if labels.len() != n * inner || class_weights.len() != c {
        return Err(shape_err!(
            "{} labels / {} weights for logits {s:?}",
            labels.len(),
            class_weights.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let x = logits.data();
    let mut grad = vec![0.0; logits.numel()];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    let mut probs = vec![0.0; c];
    for i in 0..n {
        let base = i * c * inner;
        for p in 0..inner {
            let label = labels[i * inner + p];
            let w = class_weights[label];
            let m = (0..c)
                .map(|ch| x[base + ch * inner + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (x[base + ch * inner + p] - m).exp();
                z += *pr;
            }
            let log_z = z.ln() + m;
            total += w * (log_z - x[base + label * inner + p]);
            weight_sum += w;
            for (ch, pr) in probs.iter().enumerate() {
                let onehot = if ch == label { 1.0 } else { 0.0 };
                grad[base + ch * inner + p] = w * (pr / z - onehot);
            }
        }
    }
    if weight_sum <= 0.0 {
        return Err(Error::Numeric("cross-entropy with zero total weight".into()));
    }
    for g in &mut grad {
        *g /= weight_sum;
    }
    Ok((total / weight_sum, Tensor::new(s.to_vec(), grad)?))
}

/// `w <- w - lr * g` for every parameter, then clears the gradients.
pub fn sgd_step(model: &mut ModelGraph, learning_rate: f64) -> Result<()> {
    let mut params = model.parameters_mut();
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGradient(name.clone()));
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        for (w, g) in t.data_mut().iter_mut().zip(g) {
            *w -= learning_rate * g;
        }
        t.clear_grad();
    }
    Ok(())
}
