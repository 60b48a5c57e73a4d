//! Per-channel batch normalization over `(N, H, W)`.
//!
//! Forward never mutates the state. In train mode it returns the batch
//! statistics inside the cache, and `BatchNormState::updated` /
//! `apply_running_update` fold them into the running estimates
//! (`new = (1 - momentum) * old + momentum * batch`, biased variance).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn updated(&self, cache: &BnCache<T>) -> Self {
        let mut next = self.clone();
        next.apply_running_update(cache);
        next
    }

    /// No-op for caches produced in infer mode.
    pub fn apply_running_update(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * cache.batch_var[c];
        }
    }
}

pub fn batchnorm_forward<T: Scalar>(x: &Tensor4<T>, s: &BatchNormState<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
    batchnorm_forward_mode(x, s, s.mode)
}

pub fn batchnorm_forward_mode<T: Scalar>(
    x: &Tensor4<T>,
    s: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let [n, c, h, w] = x.dims();
    if c != s.channels() {
        return Err(Error::ChannelMismatch {
            op: "batchnorm",
            expected: s.channels(),
            found: c,
        });
    }
    let plane = h * w;
    let count = n * plane;

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Infer => (s.running_mean.clone(), s.running_var.clone()),
        Mode::Train => {
            if count < 2 {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("train mode needs at least 2 values per channel, got {count}"),
                ));
            }
            (0..c)
                .map(|ch| {
                    let values = || {
                        (0..n).flat_map(move |i| {
                            let start = (i * c + ch) * plane;
                            x.data()[start..start + plane].iter().map(|v| v.to_f64().unwrap_or(f64::NAN))
                        })
                    };
                    let mean = values().sum::<f64>() / count as f64;
                    let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
                    (T::lit(mean), T::lit(var))
                })
                .unzip()
        }
    };

    let eps = T::lit(s.epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(x.dims())?;
    let mut out = Tensor4::zeros(x.dims())?;
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            let src = &x.data()[start..start + plane];
            let (mu, is, g, b) = (mean[ch], inv_std[ch], s.gamma[ch], s.beta[ch]);
            for (k, &v) in src.iter().enumerate() {
                let xh = (v - mu) * is;
                x_hat.data_mut()[start + k] = xh;
                out.data_mut()[start + k] = g * xh + b;
            }
        }
    }

    Ok((
        out,
        BnCache {
            mode,
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Gradient of the train-mode map, including the dependence of the batch
/// statistics on `x`. Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    s: &BatchNormState<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if cache.mode != Mode::Train {
        return Err(Error::invalid("batchnorm_backward", "called on an infer-mode forward"));
    }
    cache.x_hat.expect_dims("batchnorm_backward", grad_out.dims())?;
    let [n, c, h, w] = grad_out.dims();
    let plane = h * w;
    let count = T::lit((n * plane) as f64);

    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            let g = &grad_out.data()[start..start + plane];
            let xh = &cache.x_hat.data()[start..start + plane];
            for (&gv, &xv) in g.iter().zip(xh) {
                grad_beta[ch] = grad_beta[ch] + gv;
                grad_gamma[ch] = grad_gamma[ch] + gv * xv;
            }
        }
    }

    let mut grad_x = Tensor4::zeros(grad_out.dims())?;
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            let scale = s.gamma[ch] * cache.inv_std[ch] / count;
            let (gb, gg) = (grad_beta[ch], grad_gamma[ch]);
            for k in start..start + plane {
                let gv = grad_out.data()[k];
                let xv = cache.x_hat.data()[k];
                grad_x.data_mut()[k] = scale * (count * gv - gb - xv * gg);
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
