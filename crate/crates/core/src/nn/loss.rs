use ndarray::Array4;

use super::Tensor;

/// Mean softmax cross-entropy over a batch of `(N, C, 1, 1)` logits.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, c, _, _) = logits.dim();
    assert_eq!(n, labels.len(), "one label per sample");
    let mut grad = Array4::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..c).map(|k| logits[[b, k, 0, 0]]).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        for k in 0..c {
            let p = (row[k] - log_denom).exp();
            grad[[b, k, 0, 0]] = (p - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Mean absolute difference and its gradient with respect to `pred`.
/// Subgradient 0 where the two agree exactly.
pub fn l1_mean(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.dim(), target.dim(), "l1 operands must share a shape");
    let m = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / m;
    let grad = diff.mapv(|d| {
        if d > 0.0 {
            1.0 / m
        } else if d < 0.0 {
            -1.0 / m
        } else {
            0.0
        }
    });
    (loss, grad)
}

/// Mean squared difference and its gradient with respect to `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.dim(), target.dim(), "mse operands must share a shape");
    let m = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
    (loss, diff.mapv(|d| 2.0 * d / m))
}
