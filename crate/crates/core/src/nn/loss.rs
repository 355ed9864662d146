use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One-vs-rest squared hinge loss averaged over the batch.
///
/// With `t_j = +1` for the true class and `-1` otherwise, each example
/// contributes `Σ_j max(0, 1 − t_j s_j)²`. Returns the loss and its exact
/// gradient with respect to `scores` (`classes × batch`).
pub fn hinge_loss(scores: &Matrix, labels: &[usize]) -> Result<(f32, Matrix)> {
    let (classes, batch) = scores.shape();
    if labels.len() != batch {
        return Err(Error::Shape {
            op: "hinge_loss",
            left: scores.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = 1.0 / batch as f32;
    let mut total = 0.0f64;
    let mut delta = Matrix::zeros(classes, batch);
    for j in 0..classes {
        for (b, &label) in labels.iter().enumerate() {
            let t = if label == j { 1.0 } else { -1.0 };
            let margin = (1.0 - t * scores.get(j, b)).max(0.0);
            total += (margin as f64) * (margin as f64);
            delta.set(j, b, -2.0 * t * margin * inv_b);
        }
    }
    Ok(((total / batch as f64) as f32, delta))
}
