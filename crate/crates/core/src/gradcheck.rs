//! Central finite-difference oracle for every backward pass.
//!
//! All checks run in `f64` with step `h = 1e-5` and an elementwise relative
//! tolerance of `1e-4`, where the relative error of one entry is
//! `|a - n| / max(|a|, |n|, 1e-8)`. Batch-norm layers run in train mode with
//! their running statistics frozen, so the checked function depends on the
//! batch only.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{build_network, shortcut_apply, shortcut_backward, BlockVariant, Network, NetworkConfig};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, elu_backward, elu_forward,
    fully_connected_backward, fully_connected_forward, global_avg_pool_backward, global_avg_pool_forward,
    relu_backward, relu_forward, softmax_cross_entropy, BatchNormState, ConvParams, Mode,
};
use crate::tensor::{Rng, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;
/// Inputs this close to the ReLU kink are moved away before checking.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
    pub step_size: f64,
    pub tolerance: f64,
    pub entries: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<40} {} max_rel_error={:.3e} worst_index={} entries={} h={:e} tol={:e}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.worst_index,
            self.entries,
            self.step_size,
            self.tolerance
        )
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor4<f64>, h: f64) -> Result<Tensor4<f64>>
where
    F: FnMut(&Tensor4<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("numeric_gradient", format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.dims())?;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("numeric_gradient at index {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Finite differences of `loss` with respect to every registry entry of
/// `net`, perturbing parameters in place and restoring them afterwards.
pub fn network_numeric_gradient<F>(net: &mut Network<f64>, mut loss: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Network<f64>) -> Result<f64>,
{
    let lens: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(lens.iter().sum());
    for (entry, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let orig = net.params()[entry][i];
            net.params_mut()[entry][i] = orig + h;
            let plus = loss(net)?;
            net.params_mut()[entry][i] = orig - h;
            let minus = loss(net)?;
            net.params_mut()[entry][i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!("network gradient entry {entry}[{i}]")));
            }
            out.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(out)
}

pub fn check_op(op_name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    check_op_with_step(op_name, analytic, numeric, tolerance, DEFAULT_STEP)
}

pub fn check_op_with_step(
    op_name: &str,
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
    step_size: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(
            "check_op",
            format!("{op_name}: {} analytic vs {} numeric entries", analytic.len(), numeric.len()),
        ));
    }
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        // NaN compares false, so treat it as the worst possible entry.
        if rel.is_nan() || rel > max_rel_error {
            max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        worst_index,
        passed: max_rel_error <= tolerance,
        step_size,
        tolerance,
        entries: analytic.len(),
    })
}

fn weighted_sum(y: &Tensor4<f64>, w: &Tensor4<f64>) -> Result<f64> {
    Ok(y.hadamard(w)?.sum())
}

fn away_from_kink(x: Tensor4<f64>) -> Tensor4<f64> {
    x.map(|v| if v.abs() < KINK_MARGIN { v + v.signum() * 2.0 * KINK_MARGIN + KINK_MARGIN } else { v })
}

fn tensor_from(dims: [usize; 4], v: &[f64]) -> Result<Tensor4<f64>> {
    Tensor4::from_vec(dims, v.to_vec())
}

/// Gradient checks of every primitive on one random case drawn from `rng`.
/// Shapes stay within `(3, 4, 6, 6)`.
pub fn check_primitives(rng: &mut Rng) -> Result<Vec<GradCheckReport>> {
    let h = DEFAULT_STEP;
    let tol = DEFAULT_TOLERANCE;
    let mut reports = Vec::new();

    // conv2d, both strides
    for (stride, label) in [(1, "conv2d stride1"), (2, "conv2d stride2")] {
        let x = Tensor4::randn([2, 3, 5, 5], 0.0, 1.0, rng)?;
        let mut p = ConvParams::new(Tensor4::randn([4, 3, 3, 3], 0.0, 0.5, rng)?, None, stride, 1)?;
        p.bias = Some(Tensor4::randn([1, 1, 1, 4], 0.0, 0.5, rng)?.into_vec());
        let out_dims = conv2d_forward(&x, &p)?.dims();
        let w = Tensor4::randn(out_dims, 0.0, 1.0, rng)?;
        let analytic = conv2d_backward(&x, &p, &w)?;

        let numeric = numeric_gradient(|xx| weighted_sum(&conv2d_forward(xx, &p)?, &w), &x, h)?;
        reports.push(check_op(&format!("{label} grad_x"), analytic.grad_x.data(), numeric.data(), tol)?);

        let numeric = numeric_gradient(
            |k| {
                let q = ConvParams { weights: k.clone(), ..p.clone() };
                weighted_sum(&conv2d_forward(&x, &q)?, &w)
            },
            &p.weights,
            h,
        )?;
        reports.push(check_op(
            &format!("{label} grad_weights"),
            analytic.grad_weights.data(),
            numeric.data(),
            tol,
        )?);

        let bias = tensor_from([1, 1, 1, 4], p.bias.as_ref().expect("bias set"))?;
        let numeric = numeric_gradient(
            |b| {
                let q = ConvParams { bias: Some(b.data().to_vec()), ..p.clone() };
                weighted_sum(&conv2d_forward(&x, &q)?, &w)
            },
            &bias,
            h,
        )?;
        reports.push(check_op(
            &format!("{label} grad_bias"),
            analytic.grad_bias.as_deref().expect("bias set"),
            numeric.data(),
            tol,
        )?);
    }

    // batch norm, train mode
    {
        let x = Tensor4::randn([3, 4, 3, 3], 0.5, 2.0, rng)?;
        let mut s = BatchNormState::new(4);
        s.gamma = Tensor4::randn([1, 1, 1, 4], 1.0, 0.3, rng)?.into_vec();
        s.beta = Tensor4::randn([1, 1, 1, 4], 0.0, 0.3, rng)?.into_vec();
        let w = Tensor4::randn(x.dims(), 0.0, 1.0, rng)?;
        let (_, cache) = batchnorm_forward(&x, &s)?;
        let (gx, gg, gb) = batchnorm_backward(&cache, &s, &w)?;

        let numeric = numeric_gradient(|xx| weighted_sum(&batchnorm_forward(xx, &s)?.0, &w), &x, h)?;
        reports.push(check_op("batchnorm grad_x", gx.data(), numeric.data(), tol)?);
        let gamma = tensor_from([1, 1, 1, 4], &s.gamma)?;
        let numeric = numeric_gradient(
            |g| {
                let t = BatchNormState { gamma: g.data().to_vec(), ..s.clone() };
                weighted_sum(&batchnorm_forward(&x, &t)?.0, &w)
            },
            &gamma,
            h,
        )?;
        reports.push(check_op("batchnorm grad_gamma", &gg, numeric.data(), tol)?);
        let beta = tensor_from([1, 1, 1, 4], &s.beta)?;
        let numeric = numeric_gradient(
            |b| {
                let t = BatchNormState { beta: b.data().to_vec(), ..s.clone() };
                weighted_sum(&batchnorm_forward(&x, &t)?.0, &w)
            },
            &beta,
            h,
        )?;
        reports.push(check_op("batchnorm grad_beta", &gb, numeric.data(), tol)?);
    }

    // activations
    {
        let x = Tensor4::randn([3, 4, 6, 6], 0.0, 1.5, rng)?;
        let w = Tensor4::randn(x.dims(), 0.0, 1.0, rng)?;
        for alpha in [1.0, 0.5] {
            // away from 0 the derivative is smooth for any alpha
            let xx = if alpha == 1.0 { x.clone() } else { away_from_kink(x.clone()) };
            let analytic = elu_backward(&xx, alpha, &w)?;
            let numeric = numeric_gradient(|v| weighted_sum(&elu_forward(v, alpha), &w), &xx, h)?;
            reports.push(check_op(&format!("elu alpha={alpha}"), analytic.data(), numeric.data(), tol)?);
        }
        let xr = away_from_kink(x);
        let analytic = relu_backward(&xr, &w)?;
        let numeric = numeric_gradient(|v| weighted_sum(&relu_forward(v), &w), &xr, h)?;
        reports.push(check_op("relu", analytic.data(), numeric.data(), tol)?);
    }

    // global average pooling
    {
        let x = Tensor4::randn([2, 4, 6, 6], 0.0, 1.0, rng)?;
        let w = Tensor4::randn([2, 4, 1, 1], 0.0, 1.0, rng)?;
        let analytic = global_avg_pool_backward(x.dims(), &w)?;
        let numeric = numeric_gradient(|v| weighted_sum(&global_avg_pool_forward(v)?, &w), &x, h)?;
        reports.push(check_op("global_avg_pool", analytic.data(), numeric.data(), tol)?);
    }

    // fully connected
    {
        let x = Tensor4::randn([3, 4, 1, 1], 0.0, 1.0, rng)?;
        let wt = Tensor4::randn([5, 4, 1, 1], 0.0, 1.0, rng)?;
        let b = Tensor4::randn([1, 1, 1, 5], 0.0, 1.0, rng)?;
        let up = Tensor4::randn([3, 5, 1, 1], 0.0, 1.0, rng)?;
        let analytic = fully_connected_backward(&x, &wt, b.data(), &up)?;
        let numeric = numeric_gradient(|v| weighted_sum(&fully_connected_forward(v, &wt, b.data())?, &up), &x, h)?;
        reports.push(check_op("fully_connected grad_x", analytic.grad_x.data(), numeric.data(), tol)?);
        let numeric = numeric_gradient(|v| weighted_sum(&fully_connected_forward(&x, v, b.data())?, &up), &wt, h)?;
        reports.push(check_op(
            "fully_connected grad_weights",
            analytic.grad_weights.data(),
            numeric.data(),
            tol,
        )?);
        let numeric = numeric_gradient(|v| weighted_sum(&fully_connected_forward(&x, &wt, v.data())?, &up), &b, h)?;
        reports.push(check_op("fully_connected grad_bias", &analytic.grad_bias, numeric.data(), tol)?);
    }

    // softmax cross-entropy
    {
        let logits = Tensor4::randn([3, 10, 1, 1], 0.0, 2.0, rng)?;
        let labels: Vec<usize> = (0..3).map(|_| rng.below(10)).collect();
        let (_, analytic) = softmax_cross_entropy(&logits, &labels)?;
        let numeric = numeric_gradient(|v| Ok(softmax_cross_entropy(v, &labels)?.0), &logits, h)?;
        reports.push(check_op("softmax_cross_entropy", analytic.data(), numeric.data(), tol)?);
    }

    // parameter-free shortcut
    {
        let x = Tensor4::randn([2, 2, 5, 5], 0.0, 1.0, rng)?;
        let w = Tensor4::randn([2, 4, 3, 3], 0.0, 1.0, rng)?;
        let analytic = shortcut_backward(&w, x.dims(), 2)?;
        let numeric = numeric_gradient(|v| weighted_sum(&shortcut_apply(v, 2, 4, 2)?, &w), &x, h)?;
        reports.push(check_op("shortcut subsample+zero-pad", analytic.data(), numeric.data(), tol)?);
    }

    Ok(reports)
}

/// End-to-end check of the mean cross-entropy loss with respect to every
/// parameter of a small network (train-mode BN, running stats frozen).
pub fn check_network(
    cfg: &NetworkConfig,
    batch: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut net: Network<f64> = build_network(cfg, rng)?;
    let x = Tensor4::randn([batch, 3, size, size], 0.0, 1.0, rng)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.classes)).collect();

    let (logits, cache) = net.forward(&x, Mode::Train)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
    let analytic = net.backward(&cache, &grad_logits)?.flatten();

    let numeric = network_numeric_gradient(
        &mut net,
        |n| {
            let (logits, _) = n.forward(&x, Mode::Train)?;
            Ok(softmax_cross_entropy(&logits, &labels)?.0)
        },
        DEFAULT_STEP,
    )?;
    let name = format!(
        "network variant={} depth={} widths={:?}",
        cfg.variant,
        cfg.depth(),
        cfg.widths
    );
    check_op(&name, &analytic, &numeric, DEFAULT_TOLERANCE)
}

/// Every primitive plus the depth-8 network (n = 1, widths {2, 4, 8},
/// batch 2, 8x8 inputs) in all five block variants.
pub fn certify_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = check_primitives(&mut rng)?;
    for variant in BlockVariant::ALL {
        let cfg = NetworkConfig::new(1, 10, variant).with_widths([2, 4, 8]);
        reports.push(check_network(&cfg, 2, 8, &mut rng)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::elu;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor4::randn([2, 2, 3, 3], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let g = numeric_gradient(|v| Ok(v.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn half_square_norm_gradient_is_identity() {
        let x = Tensor4::randn([1, 2, 3, 3], 0.0, 1.0, &mut Rng::new(2)).unwrap();
        let g = numeric_gradient(|v| Ok(0.5 * v.hadamard(v)?.sum()), &x, DEFAULT_STEP).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn elu_sum_gradient() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let g = numeric_gradient(|v| Ok(v.data().iter().map(|&t| elu(t, 1.0)).sum()), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - (-1f64).exp()).abs() < 1e-6);
        assert!((g.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor4::full([1, 1, 1, 1], 0.0).unwrap();
        assert!(numeric_gradient(|_| Ok(f64::NAN), &x, DEFAULT_STEP).is_err());
        assert!(numeric_gradient(|v| Ok(v.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn report_arithmetic() {
        let r = check_op("self", &[1.0, -2.0], &[1.0, -2.0], 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
        let r = check_op("off", &[1.0], &[1.0 + 1e-3], 1e-4).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 1e-3 / (1.0 + 1e-3)).abs() < 1e-12);
        let r = check_op("nan", &[0.0, f64::NAN], &[0.0, 1.0], 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
        assert!(check_op("len", &[1.0], &[], 1e-4).is_err());
    }
}
