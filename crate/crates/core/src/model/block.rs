//! Residual blocks: `out = post(branch(x) + shortcut(x))`.

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward_mode, conv2d_backward, conv2d_forward, elu_backward, elu_forward,
    relu_backward, relu_forward, BatchNormState, BnCache, ConvParams, EluParams, Mode,
};
use crate::tensor::{Rng, Scalar, Tensor4};

use super::registry::{ParamInfo, ParamKind};
use super::variant::{Activation, BlockVariant, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Take every `stride`-th position, append zero channels.
    SubsampleZeroPad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub variant: BlockVariant,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub bn1: Option<BatchNormState<T>>,
    pub bn2: Option<BatchNormState<T>>,
    pub elu: EluParams,
}

#[derive(Clone, Debug)]
enum StepCache<T> {
    /// Input of a convolution or activation.
    Input(Tensor4<T>),
    Bn(BnCache<T>),
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input_dims: [usize; 4],
    steps: Vec<StepCache<T>>,
    /// Sum before the post-addition activation, when there is one.
    sum: Option<Tensor4<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T> {
    pub conv1_weights: Tensor4<T>,
    pub conv1_bias: Option<Vec<T>>,
    pub bn1: Option<(Vec<T>, Vec<T>)>,
    pub conv2_weights: Tensor4<T>,
    pub conv2_bias: Option<Vec<T>>,
    pub bn2: Option<(Vec<T>, Vec<T>)>,
}

fn shortcut_kind(in_ch: usize, out_ch: usize, stride: usize) -> Shortcut {
    if in_ch == out_ch && stride == 1 {
        Shortcut::Identity
    } else {
        Shortcut::SubsampleZeroPad
    }
}

/// Parameter-free shortcut: identity when shapes match, otherwise spatial
/// subsampling by `stride` followed by zero channels up to `out_ch`.
pub fn shortcut_apply<T: Scalar>(x: &Tensor4<T>, in_ch: usize, out_ch: usize, stride: usize) -> Result<Tensor4<T>> {
    if x.c() != in_ch {
        return Err(Error::ChannelMismatch {
            op: "shortcut",
            expected: in_ch,
            found: x.c(),
        });
    }
    if out_ch < in_ch {
        return Err(Error::invalid("shortcut", format!("cannot shrink {in_ch} channels to {out_ch}")));
    }
    if stride == 0 {
        return Err(Error::invalid("shortcut", "stride must be positive"));
    }
    if shortcut_kind(in_ch, out_ch, stride) == Shortcut::Identity {
        return Ok(x.clone());
    }
    let [n, _, h, w] = x.dims();
    let (ho, wo) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
    let mut out = Tensor4::zeros([n, out_ch, ho, wo])?;
    for i in 0..n {
        for c in 0..in_ch {
            for y in 0..ho {
                for xx in 0..wo {
                    out[[i, c, y, xx]] = x[[i, c, y * stride, xx * stride]];
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of `shortcut_apply`: grads of the padded channels are dropped,
/// subsampled positions scatter back, the rest get zero.
pub fn shortcut_backward<T: Scalar>(grad_out: &Tensor4<T>, input_dims: [usize; 4], stride: usize) -> Result<Tensor4<T>> {
    let [n, in_ch, h, w] = input_dims;
    if shortcut_kind(in_ch, grad_out.c(), stride) == Shortcut::Identity {
        grad_out.expect_dims("shortcut_backward", input_dims)?;
        return Ok(grad_out.clone());
    }
    let (ho, wo) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
    if grad_out.n() != n || grad_out.h() != ho || grad_out.w() != wo || grad_out.c() < in_ch {
        return Err(Error::ShapeMismatch {
            op: "shortcut_backward",
            expected: [n, grad_out.c().max(in_ch), ho, wo],
            found: grad_out.dims(),
        });
    }
    let mut gx = Tensor4::zeros(input_dims)?;
    for i in 0..n {
        for c in 0..in_ch {
            for y in 0..ho {
                for xx in 0..wo {
                    gx[[i, c, y * stride, xx * stride]] = grad_out[[i, c, y, xx]];
                }
            }
        }
    }
    Ok(gx)
}

fn activate<T: Scalar>(act: Activation, x: &Tensor4<T>, alpha: f64) -> Tensor4<T> {
    match act {
        Activation::Elu => elu_forward(x, alpha),
        Activation::Relu => relu_forward(x),
    }
}

fn activate_backward<T: Scalar>(act: Activation, x: &Tensor4<T>, alpha: f64, g: &Tensor4<T>) -> Result<Tensor4<T>> {
    match act {
        Activation::Elu => elu_backward(x, alpha, g),
        Activation::Relu => relu_backward(x, g),
    }
}

/// Builds one block with He-initialized convolutions. `conv1` carries the
/// stride; the shortcut subsamples and zero-pads whenever the shape changes.
pub fn build_block<T: Scalar>(
    variant: BlockVariant,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    elu: EluParams,
    rng: &mut Rng,
) -> Result<ResBlock<T>> {
    if in_ch == 0 || out_ch < in_ch {
        return Err(Error::invalid(
            "build_block",
            format!("invalid channels {in_ch} -> {out_ch}"),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid("build_block", format!("stride must be 1 or 2, got {stride}")));
    }
    let conv1 = ConvParams::he_normal(out_ch, in_ch, 3, stride, 1, variant.conv_bias(Step::Conv1), rng)?;
    let conv2 = ConvParams::he_normal(out_ch, out_ch, 3, 1, 1, variant.conv_bias(Step::Conv2), rng)?;
    Ok(ResBlock {
        variant,
        in_ch,
        out_ch,
        stride,
        conv1,
        conv2,
        bn1: variant.has_bn1().then(|| BatchNormState::new(out_ch)),
        bn2: variant.has_bn2().then(|| BatchNormState::new(out_ch)),
        elu,
    })
}

impl<T: Scalar> ResBlock<T> {
    pub fn shortcut(&self) -> Shortcut {
        shortcut_kind(self.in_ch, self.out_ch, self.stride)
    }

    fn bn(&self, step: Step) -> &BatchNormState<T> {
        let bn = if step == Step::Bn1 { &self.bn1 } else { &self.bn2 };
        bn.as_ref().expect("variant declares this BN")
    }

    fn conv(&self, step: Step) -> &ConvParams<T> {
        if step == Step::Conv1 {
            &self.conv1
        } else {
            &self.conv2
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, BlockCache<T>)> {
        let alpha = self.elu.alpha();
        let mut steps = Vec::with_capacity(self.variant.branch().len());
        let mut h = x.clone();
        for &step in self.variant.branch() {
            h = match step {
                Step::Conv1 | Step::Conv2 => {
                    let y = conv2d_forward(&h, self.conv(step))?;
                    steps.push(StepCache::Input(h));
                    y
                }
                Step::Bn1 | Step::Bn2 => {
                    let (y, cache) = batchnorm_forward_mode(&h, self.bn(step), mode)?;
                    steps.push(StepCache::Bn(cache));
                    y
                }
                Step::Act(act) => {
                    let y = activate(act, &h, alpha);
                    steps.push(StepCache::Input(h));
                    y
                }
            };
        }
        let mut sum = h;
        sum.add_assign(&shortcut_apply(x, self.in_ch, self.out_ch, self.stride)?)?;
        let (out, sum) = match self.variant.post_add() {
            Some(act) => (activate(act, &sum, alpha), Some(sum)),
            None => (sum, None),
        };
        Ok((
            out,
            BlockCache {
                input_dims: x.dims(),
                steps,
                sum,
            },
        ))
    }

    /// Returns the gradient at the block input and the parameter gradients.
    /// The input gradient is the sum of the branch and shortcut paths.
    pub fn backward(&self, cache: &BlockCache<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, BlockGrads<T>)> {
        let alpha = self.elu.alpha();
        let branch = self.variant.branch();
        if cache.steps.len() != branch.len() {
            return Err(Error::invalid("block backward", "cache does not match block"));
        }
        let g_sum = match (self.variant.post_add(), &cache.sum) {
            (Some(act), Some(sum)) => activate_backward(act, sum, alpha, grad_out)?,
            (None, None) => grad_out.clone(),
            _ => return Err(Error::invalid("block backward", "cache does not match block")),
        };

        let mut grads = BlockGrads {
            conv1_weights: Tensor4::zeros(self.conv1.weights.dims())?,
            conv1_bias: None,
            bn1: None,
            conv2_weights: Tensor4::zeros(self.conv2.weights.dims())?,
            conv2_bias: None,
            bn2: None,
        };
        let mut g = g_sum.clone();
        for (&step, sc) in branch.iter().zip(&cache.steps).rev() {
            g = match (step, sc) {
                (Step::Conv1 | Step::Conv2, StepCache::Input(input)) => {
                    let cg = conv2d_backward(input, self.conv(step), &g)?;
                    if step == Step::Conv1 {
                        grads.conv1_weights = cg.grad_weights;
                        grads.conv1_bias = cg.grad_bias;
                    } else {
                        grads.conv2_weights = cg.grad_weights;
                        grads.conv2_bias = cg.grad_bias;
                    }
                    cg.grad_x
                }
                (Step::Bn1 | Step::Bn2, StepCache::Bn(bc)) => {
                    let (gx, gg, gb) = batchnorm_backward(bc, self.bn(step), &g)?;
                    if step == Step::Bn1 {
                        grads.bn1 = Some((gg, gb));
                    } else {
                        grads.bn2 = Some((gg, gb));
                    }
                    gx
                }
                (Step::Act(act), StepCache::Input(input)) => activate_backward(act, input, alpha, &g)?,
                _ => return Err(Error::invalid("block backward", "cache does not match block")),
            };
        }
        g.add_assign(&shortcut_backward(&g_sum, cache.input_dims, self.stride)?)?;
        Ok((g, grads))
    }

    pub fn apply_running_updates(&mut self, cache: &BlockCache<T>) {
        let branch = self.variant.branch();
        for (&step, sc) in branch.iter().zip(&cache.steps) {
            if let StepCache::Bn(bc) = sc {
                let bn = if step == Step::Bn1 { &mut self.bn1 } else { &mut self.bn2 };
                if let Some(bn) = bn {
                    bn.apply_running_update(bc);
                }
            }
        }
    }

    pub(crate) fn param_infos(&self, prefix: &str, out: &mut Vec<ParamInfo>) {
        let mut push = |name: &str, kind, dims| out.push(ParamInfo::new(format!("{prefix}.{name}"), kind, dims));
        push("conv1.weight", ParamKind::ConvWeight, self.conv1.weights.dims());
        if self.conv1.bias.is_some() {
            push("conv1.bias", ParamKind::ConvBias, [self.out_ch, 1, 1, 1]);
        }
        if self.bn1.is_some() {
            push("bn1.gamma", ParamKind::BnGamma, [self.out_ch, 1, 1, 1]);
            push("bn1.beta", ParamKind::BnBeta, [self.out_ch, 1, 1, 1]);
        }
        push("conv2.weight", ParamKind::ConvWeight, self.conv2.weights.dims());
        if self.conv2.bias.is_some() {
            push("conv2.bias", ParamKind::ConvBias, [self.out_ch, 1, 1, 1]);
        }
        if self.bn2.is_some() {
            push("bn2.gamma", ParamKind::BnGamma, [self.out_ch, 1, 1, 1]);
            push("bn2.beta", ParamKind::BnBeta, [self.out_ch, 1, 1, 1]);
        }
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        out.push(self.conv1.weights.data());
        if let Some(b) = &self.conv1.bias {
            out.push(b);
        }
        if let Some(bn) = &self.bn1 {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.push(self.conv2.weights.data());
        if let Some(b) = &self.conv2.bias {
            out.push(b);
        }
        if let Some(bn) = &self.bn2 {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        let ResBlock {
            conv1, conv2, bn1, bn2, ..
        } = self;
        out.push(conv1.weights.data_mut());
        if let Some(b) = &mut conv1.bias {
            out.push(b);
        }
        if let Some(bn) = bn1 {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(conv2.weights.data_mut());
        if let Some(b) = &mut conv2.bias {
            out.push(b);
        }
        if let Some(bn) = bn2 {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }

    pub(crate) fn buffers<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            out.push(&bn.running_mean);
            out.push(&bn.running_var);
        }
    }

    pub(crate) fn buffers_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        for bn in [&mut self.bn1, &mut self.bn2].into_iter().flatten() {
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
    }

    /// Zeroes both convolutions (weights and biases) so the branch
    /// contributes nothing for the BN-terminated variants.
    pub fn zero_branch(&mut self) {
        for conv in [&mut self.conv1, &mut self.conv2] {
            conv.weights.data_mut().fill(T::zero());
            if let Some(b) = &mut conv.bias {
                b.fill(T::zero());
            }
        }
    }
}

impl<T: Scalar> BlockGrads<T> {
    pub(crate) fn push_into(self, out: &mut Vec<Vec<T>>) {
        out.push(self.conv1_weights.into_vec());
        if let Some(b) = self.conv1_bias {
            out.push(b);
        }
        if let Some((g, b)) = self.bn1 {
            out.push(g);
            out.push(b);
        }
        out.push(self.conv2_weights.into_vec());
        if let Some(b) = self.conv2_bias {
            out.push(b);
        }
        if let Some((g, b)) = self.bn2 {
            out.push(g);
            out.push(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(variant: BlockVariant, i: usize, o: usize, s: usize) -> ResBlock<f64> {
        build_block(variant, i, o, s, EluParams::default(), &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn variant_d_layout() {
        let b = block(BlockVariant::ConvEluConvBnNoEluAfterAdd, 16, 16, 1);
        assert!(b.bn1.is_none() && b.bn2.is_some());
        assert_eq!(b.shortcut(), Shortcut::Identity);
        assert_eq!(b.conv1.kernel(), (3, 3));
        assert_eq!(b.conv2.kernel(), (3, 3));
    }

    #[test]
    fn baseline_layout() {
        let b = block(BlockVariant::BaselineReluBn, 16, 16, 1);
        assert!(b.bn1.is_some() && b.bn2.is_some());
        assert!(b.conv1.bias.is_none() && b.conv2.bias.is_none());
        assert_eq!(b.variant.post_add(), Some(Activation::Relu));
    }

    #[test]
    fn downsampling_block_shapes() {
        let b = block(BlockVariant::ConvEluConvBnNoEluAfterAdd, 16, 32, 2);
        assert_eq!(b.shortcut(), Shortcut::SubsampleZeroPad);
        let x = Tensor4::randn([2, 16, 8, 8], 0.0, 1.0, &mut Rng::new(2)).unwrap();
        let (y, _) = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims(), [2, 32, 4, 4]);
    }

    #[test]
    fn invalid_block_arguments() {
        let mut rng = Rng::new(0);
        let v = BlockVariant::ConvEluConvElu;
        assert!(build_block::<f32>(v, 32, 16, 1, EluParams::default(), &mut rng).is_err());
        assert!(build_block::<f32>(v, 16, 32, 3, EluParams::default(), &mut rng).is_err());
        assert!(build_block::<f32>(v, 0, 16, 1, EluParams::default(), &mut rng).is_err());
    }

    #[test]
    fn shortcut_subsamples_and_pads() {
        let x = Tensor4::<f32>::randn([1, 16, 32, 32], 0.0, 1.0, &mut Rng::new(3)).unwrap();
        let y = shortcut_apply(&x, 16, 32, 2).unwrap();
        assert_eq!(y.dims(), [1, 32, 16, 16]);
        for c in 0..32 {
            for h in 0..16 {
                for w in 0..16 {
                    let expect = if c < 16 { x[[0, c, 2 * h, 2 * w]] } else { 0.0 };
                    assert_eq!(y[[0, c, h, w]], expect);
                }
            }
        }
        assert_eq!(shortcut_apply(&x, 16, 16, 1).unwrap(), x);
        assert!(shortcut_apply(&x, 16, 8, 1).is_err());
    }

    #[test]
    fn shortcut_backward_is_the_transpose() {
        // <S x, g> == <x, S^T g> for random x, g
        let mut rng = Rng::new(4);
        let x = Tensor4::<f64>::randn([2, 3, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let g = Tensor4::<f64>::randn([2, 6, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let sx = shortcut_apply(&x, 3, 6, 2).unwrap();
        let stg = shortcut_backward(&g, x.dims(), 2).unwrap();
        let lhs: f64 = sx.hadamard(&g).unwrap().sum();
        let rhs: f64 = x.hadamard(&stg).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_branch_variant_d_is_identity_with_identity_jacobian() {
        let mut b = block(BlockVariant::ConvEluConvBnNoEluAfterAdd, 4, 4, 1);
        b.zero_branch();
        let mut rng = Rng::new(5);
        let x = Tensor4::randn([2, 4, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let (y, cache) = b.forward(&x, mode).unwrap();
            assert_eq!(y, x);
            if mode == Mode::Train {
                let g = Tensor4::randn(x.dims(), 0.0, 1.0, &mut rng).unwrap();
                let (gx, _) = b.backward(&cache, &g).unwrap();
                assert_eq!(gx, g);
            }
        }
    }

    #[test]
    fn zero_branch_variant_c_is_elu_of_input() {
        let mut b = block(BlockVariant::ConvEluConvBnEluAfterAdd, 4, 4, 1);
        b.zero_branch();
        let x = Tensor4::randn([2, 4, 6, 6], 0.0, 1.0, &mut Rng::new(6)).unwrap();
        let (y, _) = b.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y, elu_forward(&x, 1.0));
    }
}
