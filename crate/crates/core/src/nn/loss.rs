use super::{NnError, Tensor4};

/// Mean SmoothL1 loss and its gradient w.r.t. `pred`.
///
/// Per element with `d = target - pred`: `0.5 d^2` when `|d| < 1`, else
/// `|d| - 0.5`. At `|d| = 1` the gradient takes the linear-branch value
/// `sign(pred - target) / n`.
pub fn smooth_l1(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = t - p;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad.push(-d / n);
        } else {
            loss += d.abs() - 0.5;
            grad.push(-d.signum() / n);
        }
    }
    Ok((loss / n, Tensor4::from_vec(pred.shape(), grad)?))
}
