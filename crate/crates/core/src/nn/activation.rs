use crate::tensor::Matrix;

pub fn relu(z: &Matrix) -> Matrix {
    z.map(|v| v.max(0.0))
}

/// Indicator of `z > 0`; the derivative at exactly zero is taken as 0.
pub fn relu_prime(z: &Matrix) -> Matrix {
    z.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}
