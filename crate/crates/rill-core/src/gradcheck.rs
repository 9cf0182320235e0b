//! Finite-difference gradient verification.
//!
//! Backprop bugs are silent: training still "works", just worse. Every
//! analytic gradient in this crate (data loss, penalty terms, head variants)
//! is checked against central differences in the test suites, and the same
//! helpers are exported so downstream losses can be checked the same way.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::nn::Parameterized;

/// Central-difference gradient of `loss` with respect to every element of
/// every parameter, in `params()` order. `h` is the half-step; `1e-5` is a
/// good default for f64 losses of order 1.
pub fn numeric_grads<M, F>(model: &M, mut loss: F, h: f64) -> Result<Vec<Matrix>>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    let n_params = model.params().len();
    let mut out = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let (rows, cols) = {
            let param = model.params()[p];
            (param.value.rows(), param.value.cols())
        };
        let mut grad = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let mut plus = model.clone();
            plus.params_mut()[p].value.data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].value.data_mut()[i] -= h;
            grad.data_mut()[i] = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `|a - b| / max(1, |a|, |b|)`: absolute near zero, relative for large
/// values.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Largest elementwise [`relative_error`] between analytic and numeric
/// gradients. Panics on shape disagreement — that is a test-harness bug, not
/// a data condition.
pub fn max_relative_error(analytic: &[&Matrix], numeric: &[Matrix]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "parameter count mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!((a.rows(), a.cols()), (n.rows(), n.cols()), "gradient shape mismatch");
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    worst
}
