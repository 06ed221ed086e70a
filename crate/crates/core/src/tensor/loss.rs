//! Reconstruction and regression losses. Targets are treated as constants:
//! gradient flows into the prediction only.

use super::{Element, Tensor, TensorError};

fn check_same_shape<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean of squared differences over all elements.
pub fn mse_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    check_same_shape(pred, target)?;
    let n = pred.numel();
    let inv_n = E::from_f64(1.0 / n as f64);
    let mut sum = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d * d;
    }
    let pred_data = pred.data_rc();
    let target_data = target.data_rc();
    let two = E::from_f64(2.0);
    Ok(pred.unary(vec![], vec![sum * inv_n], move |g| {
        let scale = g[0] * two * inv_n;
        pred_data
            .iter()
            .zip(target_data.iter())
            .map(|(&p, &t)| scale * (p - t))
            .collect()
    }))
}

/// Mean of absolute differences, differentiable with subgradient 0 at ties.
pub fn l1_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    check_same_shape(pred, target)?;
    let n = pred.numel();
    let inv_n = E::from_f64(1.0 / n as f64);
    let mut sum = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        sum += (p - t).abs();
    }
    let pred_data = pred.data_rc();
    let target_data = target.data_rc();
    Ok(pred.unary(vec![], vec![sum * inv_n], move |g| {
        let scale = g[0] * inv_n;
        pred_data
            .iter()
            .zip(target_data.iter())
            .map(|(&p, &t)| {
                if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    E::ZERO
                }
            })
            .collect()
    }))
}

/// Mean absolute error as a plain monitoring value (no trace participation).
pub fn mae_metric<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E, TensorError> {
    check_same_shape(pred, target)?;
    let mut sum = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        sum += (p - t).abs();
    }
    Ok(sum * E::from_f64(1.0 / pred.numel() as f64))
}
