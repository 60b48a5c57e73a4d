//! The 6n+2 CIFAR residual network.
//!
//! Layout: 3x3 stem conv -> BN -> activation, three stages of `n` blocks
//! (widths 16/32/64 by default, the first block of stages 2 and 3 halves the
//! spatial size), optional ELU, global average pooling, fully-connected.

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward_mode, conv2d_backward, conv2d_forward, elu_backward, elu_forward,
    fully_connected_backward, fully_connected_forward, global_avg_pool_backward, global_avg_pool_forward,
    relu_backward, relu_forward, BatchNormState, BnCache, ConvParams, EluParams, Mode,
};
use crate::tensor::{Rng, Scalar, Tensor4};

use super::block::{build_block, shortcut_apply, BlockCache, ResBlock};
use super::registry::{Gradients, ParamInfo, ParamKind};
use super::variant::{Activation, BlockVariant};

pub const INPUT_CHANNELS: usize = 3;
pub const CIFAR_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Blocks per stage.
    pub n: usize,
    pub classes: usize,
    pub variant: BlockVariant,
    pub alpha: f64,
    /// ELU right before global average pooling.
    pub head_elu: bool,
    /// Filter counts of the three stages.
    pub widths: [usize; 3],
}

impl NetworkConfig {
    pub fn new(n: usize, classes: usize, variant: BlockVariant) -> Self {
        NetworkConfig {
            n,
            classes,
            variant,
            alpha: 1.0,
            head_elu: variant.default_head_elu(),
            widths: CIFAR_WIDTHS,
        }
    }

    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self
    }

    /// Weighted layers: stem conv + 2 convs per block + the classifier.
    pub fn depth(&self) -> usize {
        6 * self.n + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("network config", "n must be at least 1"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("network config", "classes must be positive"));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(
                "network config",
                format!("stage widths must be positive and non-decreasing, got {:?}", self.widths),
            ));
        }
        EluParams::new(self.alpha)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    stem: ConvParams<T>,
    stem_bn: BatchNormState<T>,
    blocks: Vec<ResBlock<T>>,
    fc_weights: Tensor4<T>,
    fc_bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    mode: Mode,
    input: Tensor4<T>,
    stem_bn: BnCache<T>,
    stem_act_input: Tensor4<T>,
    blocks: Vec<BlockCache<T>>,
    head_act_input: Option<Tensor4<T>>,
    pool_input_dims: [usize; 4],
    pooled: Tensor4<T>,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Receives `(block index, block output)` during a forward pass.
pub type BlockObserver<'a, T> = &'a mut dyn FnMut(usize, &Tensor4<T>);

pub fn build_network<T: Scalar>(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Network<T>> {
    cfg.validate()?;
    let elu = EluParams::new(cfg.alpha)?;
    let stem = ConvParams::he_normal(cfg.widths[0], INPUT_CHANNELS, 3, 1, 1, false, rng)?;
    let stem_bn = BatchNormState::new(cfg.widths[0]);
    let mut blocks = Vec::with_capacity(3 * cfg.n);
    let mut in_ch = cfg.widths[0];
    for (stage, &width) in cfg.widths.iter().enumerate() {
        for j in 0..cfg.n {
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            blocks.push(build_block(cfg.variant, in_ch, width, stride, elu, rng)?);
            in_ch = width;
        }
    }
    let fc_in = cfg.widths[2];
    let fc_weights = Tensor4::randn([cfg.classes, fc_in, 1, 1], 0.0, (2.0 / fc_in as f64).sqrt(), rng)?;
    Ok(Network {
        config: cfg.clone(),
        stem,
        stem_bn,
        blocks,
        fc_weights,
        fc_bias: vec![T::zero(); cfg.classes],
    })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ResBlock<T>] {
        &self.blocks
    }

    pub fn stem(&self) -> (&ConvParams<T>, &BatchNormState<T>) {
        (&self.stem, &self.stem_bn)
    }

    pub fn classifier(&self) -> (&Tensor4<T>, &[T]) {
        (&self.fc_weights, &self.fc_bias)
    }

    fn alpha(&self) -> f64 {
        self.config.alpha
    }

    fn stem_activation(&self, x: &Tensor4<T>) -> Tensor4<T> {
        match self.config.variant.activation() {
            Activation::Elu => elu_forward(x, self.alpha()),
            Activation::Relu => relu_forward(x),
        }
    }

    /// Logits `(N, classes, 1, 1)` for `x: (N, 3, H, W)`. Fails with
    /// `Error::NonFinite` if any logit is not finite.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let (logits, cache) = self.forward_observed(x, mode, &mut |_, _| {})?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("network forward".into()));
        }
        Ok((logits, cache))
    }

    /// Forward pass without the finiteness check, reporting every block
    /// output to `observe`.
    pub fn forward_observed(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        observe: BlockObserver<'_, T>,
    ) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        if x.c() != INPUT_CHANNELS {
            return Err(Error::ChannelMismatch {
                op: "network forward",
                expected: INPUT_CHANNELS,
                found: x.c(),
            });
        }
        let z = conv2d_forward(x, &self.stem)?;
        let (stem_act_input, stem_bn) = batchnorm_forward_mode(&z, &self.stem_bn, mode)?;
        let mut h = self.stem_activation(&stem_act_input);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(&h, mode)?;
            observe(i, &out);
            blocks.push(cache);
            h = out;
        }

        let (head_act_input, pool_in) = if self.config.head_elu {
            let a = elu_forward(&h, self.alpha());
            (Some(h), a)
        } else {
            (None, h)
        };
        let pooled = global_avg_pool_forward(&pool_in)?;
        let logits = fully_connected_forward(&pooled, &self.fc_weights, &self.fc_bias)?;
        Ok((
            logits,
            ForwardCache {
                mode,
                input: x.clone(),
                stem_bn,
                stem_act_input,
                blocks,
                head_act_input,
                pool_input_dims: pool_in.dims(),
                pooled,
            },
        ))
    }

    /// Stem and head with every block replaced by its shortcut alone. This is
    /// what the network computes when all residual branches output zero.
    pub fn forward_shortcuts_only(&self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let z = conv2d_forward(x, &self.stem)?;
        let (a, _) = batchnorm_forward_mode(&z, &self.stem_bn, mode)?;
        let mut h = self.stem_activation(&a);
        for block in &self.blocks {
            h = shortcut_apply(&h, block.in_ch, block.out_ch, block.stride)?;
        }
        if self.config.head_elu {
            h = elu_forward(&h, self.alpha());
        }
        let pooled = global_avg_pool_forward(&h)?;
        fully_connected_forward(&pooled, &self.fc_weights, &self.fc_bias)
    }

    /// Gradients of every registry entry given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor4<T>) -> Result<Gradients<T>> {
        if cache.mode != Mode::Train {
            return Err(Error::invalid("network backward", "cache comes from an infer-mode forward"));
        }
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::invalid("network backward", "cache does not match network"));
        }
        let fc = fully_connected_backward(&cache.pooled, &self.fc_weights, &self.fc_bias, grad_logits)?;
        let mut g = global_avg_pool_backward(cache.pool_input_dims, &fc.grad_x)?;
        if let Some(h) = &cache.head_act_input {
            g = elu_backward(h, self.alpha(), &g)?;
        }

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (gx, grads) = block.backward(bc, &g)?;
            block_grads.push(grads);
            g = gx;
        }
        block_grads.reverse();

        g = match self.config.variant.activation() {
            Activation::Elu => elu_backward(&cache.stem_act_input, self.alpha(), &g)?,
            Activation::Relu => relu_backward(&cache.stem_act_input, &g)?,
        };
        let (g, stem_gamma, stem_beta) = batchnorm_backward(&cache.stem_bn, &self.stem_bn, &g)?;
        let stem = conv2d_backward(&cache.input, &self.stem, &g)?;

        let mut entries = Vec::new();
        entries.push(stem.grad_weights.into_vec());
        entries.push(stem_gamma);
        entries.push(stem_beta);
        for grads in block_grads {
            grads.push_into(&mut entries);
        }
        entries.push(fc.grad_weights.into_vec());
        entries.push(fc.grad_bias);
        Ok(Gradients { entries })
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// BN estimates.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        self.stem_bn.apply_running_update(&cache.stem_bn);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.apply_running_updates(bc);
        }
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let c0 = self.config.widths[0];
        let mut out = vec![
            ParamInfo::new("stem.conv.weight".into(), ParamKind::ConvWeight, self.stem.weights.dims()),
            ParamInfo::new("stem.bn.gamma".into(), ParamKind::BnGamma, [c0, 1, 1, 1]),
            ParamInfo::new("stem.bn.beta".into(), ParamKind::BnBeta, [c0, 1, 1, 1]),
        ];
        let n = self.config.n;
        for (i, block) in self.blocks.iter().enumerate() {
            block.param_infos(&format!("stage{}.block{}", i / n + 1, i % n + 1), &mut out);
        }
        out.push(ParamInfo::new("fc.weight".into(), ParamKind::FcWeight, self.fc_weights.dims()));
        out.push(ParamInfo::new(
            "fc.bias".into(),
            ParamKind::FcBias,
            [self.config.classes, 1, 1, 1],
        ));
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.stem.weights.data(), &self.stem_bn.gamma, &self.stem_bn.beta];
        for block in &self.blocks {
            block.params(&mut out);
        }
        out.push(self.fc_weights.data());
        out.push(&self.fc_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let Network {
            stem,
            stem_bn,
            blocks,
            fc_weights,
            fc_bias,
            ..
        } = self;
        let mut out: Vec<&mut [T]> = vec![stem.weights.data_mut(), &mut stem_bn.gamma, &mut stem_bn.beta];
        for block in blocks.iter_mut() {
            block.params_mut(&mut out);
        }
        out.push(fc_weights.data_mut());
        out.push(fc_bias);
        out
    }

    /// BN running means and variances, stem first, then blocks in order.
    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.stem_bn.running_mean, &self.stem_bn.running_var];
        for block in &self.blocks {
            block.buffers(&mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let Network { stem_bn, blocks, .. } = self;
        let mut out: Vec<&mut [T]> = vec![&mut stem_bn.running_mean, &mut stem_bn.running_var];
        for block in blocks.iter_mut() {
            block.buffers_mut(&mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.param_infos().iter().filter(|p| p.kind.is_weight()).count()
    }

    /// Sets every block convolution to zero. Test fixture for the
    /// identity-composition properties.
    pub fn zero_residual_branches(&mut self) {
        for block in &mut self.blocks {
            block.zero_branch();
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            weights: c.weights.cast(),
            bias: c.bias.as_ref().map(|b| cast_vec(b)),
            stride: c.stride,
            pad: c.pad,
        };
        let bn = |s: &BatchNormState<T>| BatchNormState {
            gamma: cast_vec(&s.gamma),
            beta: cast_vec(&s.beta),
            running_mean: cast_vec(&s.running_mean),
            running_var: cast_vec(&s.running_var),
            epsilon: s.epsilon,
            momentum: s.momentum,
            mode: s.mode,
        };
        Network {
            config: self.config.clone(),
            stem: conv(&self.stem),
            stem_bn: bn(&self.stem_bn),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    variant: b.variant,
                    in_ch: b.in_ch,
                    out_ch: b.out_ch,
                    stride: b.stride,
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                    bn1: b.bn1.as_ref().map(bn),
                    bn2: b.bn2.as_ref().map(bn),
                    elu: b.elu,
                })
                .collect(),
            fc_weights: self.fc_weights.cast(),
            fc_bias: cast_vec(&self.fc_bias),
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter()
        .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(n: usize, variant: BlockVariant) -> Network<f32> {
        build_network(&NetworkConfig::new(n, 10, variant), &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn depth_matches_registry() {
        for (n, depth) in [(1, 8), (3, 20), (5, 32)] {
            let net = net(n, BlockVariant::ConvEluConvBnNoEluAfterAdd);
            assert_eq!(net.weighted_layer_count(), depth);
            assert_eq!(net.config().depth(), depth);
        }
    }

    #[test]
    fn registry_views_agree() {
        for variant in BlockVariant::ALL {
            let mut net = net(1, variant);
            let infos = net.param_infos();
            let lens: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
            assert_eq!(infos.iter().map(|i| i.len()).collect::<Vec<_>>(), lens);
            let mut_lens: Vec<usize> = net.params_mut().iter().map(|p| p.len()).collect();
            assert_eq!(lens, mut_lens);
            let names: std::collections::HashSet<_> = infos.iter().map(|i| &i.name).collect();
            assert_eq!(names.len(), infos.len(), "names unique");
        }
    }

    #[test]
    fn forward_shapes_and_purity() {
        let net = net(1, BlockVariant::ConvEluConvBnNoEluAfterAdd);
        let x = Tensor4::randn([4, 3, 32, 32], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let (a, _) = net.forward(&x, Mode::Infer).unwrap();
        let (b, _) = net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.dims(), [4, 10, 1, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_rejects_infer_cache() {
        let net = net(1, BlockVariant::BaselineReluBn);
        let x = Tensor4::randn([2, 3, 8, 8], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let (logits, cache) = net.forward(&x, Mode::Infer).unwrap();
        assert!(net.backward(&cache, &logits).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_registry() {
        for variant in BlockVariant::ALL {
            let net = net(1, variant);
            let x = Tensor4::randn([2, 3, 8, 8], 0.0, 1.0, &mut Rng::new(2)).unwrap();
            let (logits, cache) = net.forward(&x, Mode::Train).unwrap();
            let grads = net.backward(&cache, &Tensor4::zeros(logits.dims()).unwrap()).unwrap();
            assert_eq!(grads.entries.len(), net.param_infos().len());
            assert!(grads.flatten().iter().all(|&v| v == 0.0), "{variant}");
        }
    }

    #[test]
    fn running_stats_commit_only_in_train_mode() {
        let mut net = net(1, BlockVariant::BaselineReluBn);
        let x = Tensor4::randn([2, 3, 8, 8], 1.0, 1.0, &mut Rng::new(3)).unwrap();
        let before = net.clone();
        let (_, cache) = net.forward(&x, Mode::Infer).unwrap();
        net.commit_running_stats(&cache);
        assert_eq!(net, before);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.commit_running_stats(&cache);
        assert_ne!(net.buffers(), before.buffers());
        assert_eq!(net.params(), before.params());
    }

    #[test]
    fn rejects_bad_config() {
        let mut rng = Rng::new(0);
        let mut cfg = NetworkConfig::new(0, 10, BlockVariant::BaselineReluBn);
        assert!(build_network::<f32>(&cfg, &mut rng).is_err());
        cfg.n = 1;
        cfg.alpha = 0.0;
        assert!(build_network::<f32>(&cfg, &mut rng).is_err());
        let cfg = NetworkConfig::new(1, 10, BlockVariant::BaselineReluBn).with_widths([16, 8, 4]);
        assert!(build_network::<f32>(&cfg, &mut rng).is_err());
    }
}
