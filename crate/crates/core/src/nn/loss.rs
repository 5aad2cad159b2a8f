//! Loss functions returning (scalar loss, gradient wrt predictions).

use ndarray::{Array1, Array2};

use super::Float;
use crate::error::{Error, Result};

/// Mean squared error over a batch of scalar predictions.
pub fn mse_loss<F: Float>(pred: &Array1<F>, target: &Array1<F>) -> Result<(F, Array1<F>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Argument(format!(
            "mse over mismatched or empty vectors ({} vs {})",
            pred.len(),
            target.len()
        )));
    }
    let n = F::from_usize(pred.len()).unwrap();
    let diff = pred - target;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let grad = diff.mapv(|d| (F::one() + F::one()) * d / n);
    Ok((loss, grad))
}

/// Numerically stable binary cross-entropy on logits, averaged over all
/// entries. Targets are 0/1 multi-label indicators.
pub fn bce_with_logits<F: Float>(logits: &Array2<F>, targets: &Array2<F>) -> Result<(F, Array2<F>)> {
    if logits.dim() != targets.dim() || logits.is_empty() {
        return Err(Error::Argument(format!(
            "bce over mismatched shapes {:?} vs {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let n = F::from_usize(logits.len()).unwrap();
    let mut loss = F::zero();
    let grad = ndarray::Zip::from(logits).and(targets).map_collect(|&z, &y| {
        // max(z, 0) - z*y + ln(1 + exp(-|z|))
        let zp = if z > F::zero() { z } else { F::zero() };
        loss = loss + zp - z * y + (F::one() + (-z.abs()).exp()).ln();
        let sig = F::one() / (F::one() + (-z).exp());
        (sig - y) / n
    });
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn mse_value_and_gradient() {
        let pred = array![0.0f64, 2.0];
        let target = array![1.0f64, 3.0];
        let (loss, grad) = mse_loss(&pred, &target).unwrap();
        assert_relative_eq!(loss, 1.0);
        assert_relative_eq!(grad[0], -1.0);
        assert_relative_eq!(grad[1], -1.0);
    }

    #[test]
    fn bce_matches_finite_differences() {
        let logits = array![[0.3f64, -1.2, 2.0], [0.0, 5.0, -4.0]];
        let targets = array![[1.0f64, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let (_, grad) = bce_with_logits(&logits, &targets).unwrap();
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += eps;
                let mut lm = logits.clone();
                lm[[i, j]] -= eps;
                let (vp, _) = bce_with_logits(&lp, &targets).unwrap();
                let (vm, _) = bce_with_logits(&lm, &targets).unwrap();
                assert_relative_eq!(grad[[i, j]], (vp - vm) / (2.0 * eps), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let pred = array![0.0f64, 2.0];
        let target = array![1.0f64];
        assert!(mse_loss(&pred, &target).is_err());
    }
}
