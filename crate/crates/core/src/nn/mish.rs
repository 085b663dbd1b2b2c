//! Mish activation, `x * tanh(softplus(x))`.

use super::{NnError, Tensor4};

/// `ln(1 + e^x)` without overflow for large `x` or cancellation for small.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

/// `d/dx [x tanh(sp(x))] = tanh(sp) + x * sech^2(sp) * sigmoid(x)`.
#[inline]
pub fn mish_derivative(x: f64) -> f64 {
    let t = softplus(x).tanh();
    let sigmoid = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    t + x * (1.0 - t * t) * sigmoid
}

pub fn mish_forward(x: &Tensor4) -> Tensor4 {
    x.map(mish)
}

pub fn mish_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4, NnError> {
    if x.shape() != upstream.shape() {
        return Err(NnError::Shape(format!(
            "mish input {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| u * mish_derivative(v))
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_values() {
        assert_eq!(mish(0.0), 0.0);
        // 1 * tanh(ln(1 + e)), 40-digit reference.
        assert!((mish(1.0) - 0.865_098_388_267_310_3).abs() < 1e-15);
        assert!((mish(50.0) - 50.0).abs() < 1e-9);
        assert!(mish(-800.0).abs() < 1e-300);
        assert!((softplus(30.0) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn derivative_at_zero() {
        assert!((mish_derivative(0.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-2.0, 0.3, 5.0]).unwrap();
        let g = mish_backward(&x, &Tensor4::zeros([1, 1, 1, 3])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor4::zeros([1, 1, 1, 3]);
        assert!(mish_backward(&x, &Tensor4::zeros([1, 1, 3, 1])).is_err());
    }
}
