//! Per-block second moments at initialization.
//!
//! Forward only, with batch statistics in every BN (as during a training
//! step) and no running-stat update. Exploding variants show geometric growth
//! of `E[h^2]` with depth; BN-terminated branches grow at most linearly.

use crate::error::Result;
use crate::ops::Mode;
use crate::tensor::{Rng, Scalar, Tensor4};

use super::network::{Network, INPUT_CHANNELS};

#[derive(Clone, Debug, PartialEq)]
pub struct MomentProfile {
    /// Mean of squared activations after each block.
    pub moments: Vec<f64>,
}

impl MomentProfile {
    pub fn diverged(&self) -> bool {
        self.moments.iter().any(|m| !m.is_finite())
    }

    /// Last block moment over first block moment; infinite once any moment
    /// has overflowed.
    pub fn growth_ratio(&self) -> f64 {
        if self.diverged() {
            return f64::INFINITY;
        }
        match (self.moments.first(), self.moments.last()) {
            (Some(&first), Some(&last)) => last / first,
            _ => f64::NAN,
        }
    }

    /// Largest over smallest block moment.
    pub fn spread(&self) -> f64 {
        let max = self.moments.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.moments.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

pub fn activation_moment_profile<T: Scalar>(net: &Network<T>, x: &Tensor4<T>) -> Result<MomentProfile> {
    let mut moments = vec![0.0; net.blocks().len()];
    net.forward_observed(x, Mode::Train, &mut |i, out| moments[i] = out.mean_square())?;
    Ok(MomentProfile { moments })
}

/// Standard-normal input batch `(batch, 3, size, size)`.
pub fn gaussian_input<T: Scalar>(batch: usize, size: usize, rng: &mut Rng) -> Result<Tensor4<T>> {
    Tensor4::randn([batch, INPUT_CHANNELS, size, size], 0.0, 1.0, rng)
}
