use super::tensor::Tensor;

/// Mean binary cross-entropy on raw logits, in the numerically stable form
/// `max(z, 0) - z·y + ln(1 + e^{-|z|})`. Returns the loss and its gradient
/// with respect to the logits.
pub fn bce_with_logits(logits: &Tensor, labels: &[f32]) -> (f64, Tensor) {
    assert_eq!(logits.len(), labels.len());
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for ((z, y), g) in logits.data().iter().zip(labels).zip(grad.data_mut()) {
        let (z64, y64) = (*z as f64, *y as f64);
        loss += z64.max(0.0) - z64 * y64 + (-z64.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z64).exp());
        *g = ((p - y64) / n) as f32;
    }
    (loss / n, grad)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0f64;
    for ((p, t), g) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let d = (*p - *t) as f64;
        loss += d * d;
        *g = (2.0 * d / n) as f32;
    }
    (loss / n, grad)
}
