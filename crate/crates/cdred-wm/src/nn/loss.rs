use super::NnError;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    super::mlp::softmax_in_place(&mut out);
    out
}

/// Cross-entropy `-sum(target * log softmax(logits))` against a probability
/// target, with its analytic gradient `softmax(logits) - target`.
///
/// The target must be nonnegative and sum to 1 within 1e-9.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if logits.len() != target.len() {
        return Err(NnError::ShapeMismatch {
            context: "softmax_cross_entropy".into(),
            expected: logits.len().to_string(),
            got: target.len().to_string(),
        });
    }
    if let Some(bad) = target.iter().find(|&&t| !(t >= 0.0)) {
        return Err(NnError::InvalidTarget {
            reason: format!("negative or NaN entry {bad}"),
        });
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(NnError::InvalidTarget {
            reason: format!("sums to {sum}, not 1"),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum_exp = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    for (&t, &l) in target.iter().zip(logits) {
        if t > 0.0 {
            loss -= t * (l - log_sum_exp);
        }
    }
    let mut grad = softmax(logits);
    for (g, &t) in grad.iter_mut().zip(target) {
        *g -= t;
    }
    Ok((loss, grad))
}
