use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Per-channel spatial mean, `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor4::from_vec([n, c, 1, 1], data)
}

/// Spreads each pooled gradient uniformly, `grad / (H * W)`.
pub fn global_avg_pool_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input_dims;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool_backward", "empty spatial extent"));
    }
    grad_out.expect_dims("global_avg_pool_backward", [n, c, 1, 1])?;
    let inv = T::one() / T::lit(plane as f64);
    let mut out = Tensor4::zeros(input_dims)?;
    for (dst, &g) in out.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        dst.fill(g * inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_value() {
        let x = Tensor4::<f64>::full([2, 3, 4, 4], 2.5).unwrap();
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.dims(), [2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ramp_mean() {
        let x = Tensor4::from_vec([1, 1, 8, 8], (0..64).map(|v| v as f64).collect()).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[31.5]);
    }

    #[test]
    fn backward_is_uniform() {
        let g = Tensor4::<f64>::full([1, 1, 1, 1], 1.0).unwrap();
        let gx = global_avg_pool_backward([1, 1, 8, 8], &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0 / 64.0));
    }

    #[test]
    fn empty_plane_is_an_error() {
        assert!(global_avg_pool_forward(&Tensor4::<f64>::zeros([1, 1, 0, 4]).unwrap()).is_err());
    }
}
