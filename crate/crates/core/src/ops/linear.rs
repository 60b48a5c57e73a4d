use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_weights: Tensor4<T>,
    pub grad_bias: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor4<T>, weights: &Tensor4<T>, bias: &[T]) -> Result<(usize, usize, usize)> {
    let (n, inputs) = (x.n(), x.sample_len());
    let outputs = weights.n();
    if weights.sample_len() != inputs {
        return Err(Error::ChannelMismatch {
            op: "fully_connected",
            expected: weights.sample_len(),
            found: inputs,
        });
    }
    if bias.len() != outputs {
        return Err(Error::ChannelMismatch {
            op: "fully_connected bias",
            expected: outputs,
            found: bias.len(),
        });
    }
    Ok((n, inputs, outputs))
}

/// `y = x W^T + b` with `x: (N, C, 1, 1)`, `W: (classes, C, 1, 1)`,
/// `y: (N, classes, 1, 1)`.
pub fn fully_connected_forward<T: Scalar>(x: &Tensor4<T>, weights: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let (n, inputs, outputs) = check(x, weights, bias)?;
    let mut y = Tensor4::zeros([n, outputs, 1, 1])?;
    gemm(n, inputs, outputs, x.data(), false, weights.data(), true, T::zero(), y.data_mut());
    for row in y.data_mut().chunks_exact_mut(outputs.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    Ok(y)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: &[T],
    grad_out: &Tensor4<T>,
) -> Result<LinearGrads<T>> {
    let (n, inputs, outputs) = check(x, weights, bias)?;
    grad_out.expect_dims("fully_connected_backward", [n, outputs, 1, 1])?;
    let mut grad_x = Tensor4::zeros(x.dims())?;
    gemm(n, outputs, inputs, grad_out.data(), false, weights.data(), false, T::zero(), grad_x.data_mut());
    let mut grad_w = Tensor4::zeros(weights.dims())?;
    gemm(outputs, n, inputs, grad_out.data(), true, x.data(), false, T::zero(), grad_w.data_mut());
    let mut grad_b = vec![T::zero(); outputs];
    for row in grad_out.data().chunks_exact(outputs.max(1)) {
        for (acc, &g) in grad_b.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok(LinearGrads {
        grad_x,
        grad_weights: grad_w,
        grad_bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn identity_weights() {
        let x = Tensor4::<f64>::randn([3, 4, 1, 1], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let mut w = Tensor4::zeros([4, 4, 1, 1]).unwrap();
        for i in 0..4 {
            w[[i, i, 0, 0]] = 1.0;
        }
        assert_eq!(fully_connected_forward(&x, &w, &[0.0; 4]).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let x = Tensor4::<f64>::randn([2, 3, 1, 1], 0.0, 1.0, &mut Rng::new(2)).unwrap();
        let w = Tensor4::zeros([2, 3, 1, 1]).unwrap();
        let y = fully_connected_forward(&x, &w, &[1.5, -2.0]).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn dimension_errors() {
        let x = Tensor4::<f64>::zeros([2, 3, 1, 1]).unwrap();
        let w = Tensor4::zeros([2, 4, 1, 1]).unwrap();
        assert!(fully_connected_forward(&x, &w, &[0.0; 2]).is_err());
        let w = Tensor4::zeros([2, 3, 1, 1]).unwrap();
        assert!(fully_connected_forward(&x, &w, &[0.0; 3]).is_err());
        let g = Tensor4::zeros([2, 3, 1, 1]).unwrap();
        assert!(fully_connected_backward(&x, &w, &[0.0; 2], &g).is_err());
    }
}
