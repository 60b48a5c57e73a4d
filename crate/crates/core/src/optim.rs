//! SGD with classical momentum, L2 weight decay and a step learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::model::ParamInfo;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub base_lr: f64,
    /// 0-indexed epochs at which the rate is divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub seed: u64,
    /// Apply weight decay to BN scales/shifts and biases as well.
    pub decay_all_params: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            decay_epochs: vec![81, 122],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            total_epochs: 164,
            seed: 0,
            decay_all_params: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("TrainSchedule", reason));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay epochs must be strictly increasing: {:?}", self.decay_epochs));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr / self.decay_factor.powi(decays as i32)
    }
}

/// Velocity buffers, one per registry entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
    decayed: Vec<bool>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(infos: &[ParamInfo], sched: &TrainSchedule) -> Self {
        Self {
            momentum: sched.momentum,
            weight_decay: sched.weight_decay,
            velocity: infos.iter().map(|i| vec![T::zero(); i.len()]).collect(),
            decayed: infos
                .iter()
                .map(|i| sched.decay_all_params || i.kind.is_weight())
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn velocity_len(&self) -> usize {
        self.velocity.iter().map(Vec::len).sum()
    }

    pub fn flat_velocity(&self) -> Vec<T> {
        self.velocity.iter().flatten().copied().collect()
    }

    pub fn load_flat_velocity(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.velocity_len() {
            return Err(Error::invalid(
                "Sgd",
                format!("expected {} velocity values, found {}", self.velocity_len(), flat.len()),
            ));
        }
        let mut rest = flat;
        for v in &mut self.velocity {
            let (head, tail) = rest.split_at(v.len());
            v.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `v <- m v - lr (g + wd p)`, `p <- p + v`. Gradients are checked for
    /// finiteness before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!(
                    "{} parameter entries, {} gradient entries, {} velocity entries",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || g.len() != self.velocity[i].len() {
                return Err(Error::invalid("sgd_step", format!("entry {i} length mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient entry {i}")));
            }
        }
        let m = T::lit(self.momentum);
        let lr_t = T::lit(lr);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let wd = T::lit(if self.decayed[i] { self.weight_decay } else { 0.0 });
            for ((pj, &gj), vj) in p.iter_mut().zip(g).zip(&mut self.velocity[i]) {
                *vj = m * *vj - lr_t * (gj + wd * *pj);
                *pj = *pj + *vj;
            }
        }
        Ok(())
    }
}
