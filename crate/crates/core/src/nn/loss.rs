use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Reconstruction loss: mean over the batch of `‖target − pred‖²`.
/// Returns the loss and its gradient w.r.t. `pred`, `2(pred − target)/batch`.
pub fn mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Tensor<T>), NnError> {
    if pred.shape() != target.shape() || pred.shape().is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let batch = pred.shape()[0] as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            loss += d * d;
            T::from_f64(2.0 * d / batch)
        })
        .collect();
    Ok((loss / batch, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Categorical cross entropy of softmax outputs against class labels,
/// averaged over the batch.
///
/// The returned gradient is taken w.r.t. the softmax *inputs* (logits):
/// `(p − onehot(label)) / batch`.
pub fn cross_entropy_loss<T: Scalar>(
    probabilities: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>), NnError> {
    let shape = probabilities.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnError::ShapeMismatch(format!(
            "cross entropy: probabilities {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::ShapeMismatch(format!(
            "label {bad} >= {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probabilities.len());
    for (row, &label) in probabilities.data().chunks(classes).zip(labels) {
        loss -= row[label].as_f64().max(f64::MIN_POSITIVE).ln();
        grad.extend(row.iter().enumerate().map(|(j, &p)| {
            let target = if j == label { 1.0 } else { 0.0 };
            T::from_f64((p.as_f64() - target) / batch as f64)
        }));
    }
    Ok((loss / batch as f64, Tensor::new(shape.to_vec(), grad)?))
}
