use resnet_elu::model::checkpoint::{load_network_state, network_state};
use resnet_elu::model::*;
use resnet_elu::ops::Mode;
use resnet_elu::{Rng, Tensor4};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn weighted_layer_counts_follow_six_n_plus_two() {
    for (n, depth) in [(3, 20), (5, 32), (7, 44), (9, 56), (18, 110)] {
        for variant in BlockVariant::ALL {
            let net: Network<f32> = build_network(&NetworkConfig::new(n, 10, variant), &mut Rng::new(0)).unwrap();
            assert_eq!(net.weighted_layer_count(), depth, "{variant} n={n}");
            assert_eq!(net.blocks().len(), 3 * n);
        }
    }
}

#[test]
fn stage_shapes() {
    let net: Network<f32> =
        build_network(&NetworkConfig::new(3, 10, BlockVariant::ConvEluConvBnNoEluAfterAdd), &mut Rng::new(1)).unwrap();
    let x = Tensor4::randn([2, 3, 32, 32], 0.0, 1.0, &mut Rng::new(2)).unwrap();
    let mut shapes = Vec::new();
    net.forward_observed(&x, Mode::Train, &mut |_, out| shapes.push(out.dims())).unwrap();
    let expect: Vec<[usize; 4]> = [(16, 32), (32, 16), (64, 8)]
        .iter()
        .flat_map(|&(c, s)| std::iter::repeat([2, c, s, s]).take(3))
        .collect();
    assert_eq!(shapes, expect);
    assert_eq!(net.classifier().0.dims(), [10, 64, 1, 1]);
}

#[test]
fn zero_branches_reduce_variant_d_to_stem_and_head_bitwise() {
    for n in [1, 3] {
        let mut net: Network<f32> =
            build_network(&NetworkConfig::new(n, 10, BlockVariant::ConvEluConvBnNoEluAfterAdd), &mut Rng::new(n as u64))
                .unwrap();
        net.zero_residual_branches();
        let x = Tensor4::randn([3, 3, 32, 32], 0.0, 1.0, &mut Rng::new(9)).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let (full, _) = net.forward(&x, mode).unwrap();
            let composed = net.forward_shortcuts_only(&x, mode).unwrap();
            assert_eq!(
                full.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                composed.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn exploding_variants_outgrow_bn_terminated_branch() {
    let profile = |variant, seed| {
        let mut rng = Rng::new(seed);
        let net: Network<f32> = build_network(&NetworkConfig::new(18, 10, variant), &mut rng).unwrap();
        let x = gaussian_input(4, 32, &mut rng).unwrap();
        activation_moment_profile(&net, &x).unwrap().growth_ratio()
    };
    let med = |variant| median((0..5).map(|s| profile(variant, s)).collect());
    let d = med(BlockVariant::ConvEluConvBnNoEluAfterAdd);
    assert!(d.is_finite() && d > 0.0);
    for variant in [BlockVariant::ConvEluConvElu, BlockVariant::EluConvEluConv] {
        let r = med(variant);
        assert!(r >= 10.0 * d, "{variant}: {r:e} vs d {d:e}");
    }
}

#[test]
fn he_initialization_scale() {
    let net: Network<f64> =
        build_network(&NetworkConfig::new(1, 10, BlockVariant::BaselineReluBn), &mut Rng::new(4)).unwrap();
    let (stem, bn) = net.stem();
    assert!(stem.bias.is_none());
    assert!(bn.gamma.iter().all(|&g| g == 1.0) && bn.beta.iter().all(|&b| b == 0.0));
    // third-stage conv2: 3*3*64 fan-out, 36864 weights
    let w = &net.blocks()[2].conv2.weights;
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    let expect = 2.0 / (9.0 * 64.0);
    assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    assert!(net.classifier().1.iter().all(|&b| b == 0.0));
}

#[test]
fn biases_only_where_no_bn_follows() {
    let mut rng = Rng::new(0);
    for variant in BlockVariant::ALL {
        let net: Network<f32> = build_network(&NetworkConfig::new(1, 10, variant), &mut rng).unwrap();
        for b in net.blocks() {
            assert_eq!(b.conv1.bias.is_some(), !variant.has_bn1(), "{variant}");
            assert_eq!(b.conv2.bias.is_some(), !variant.has_bn2(), "{variant}");
        }
    }
}

#[test]
fn state_round_trip_is_bit_exact() {
    let mut rng = Rng::new(6);
    let cfg = NetworkConfig::new(1, 10, BlockVariant::ConvEluConvBnEluAfterAdd);
    let mut a: Network<f32> = build_network(&cfg, &mut rng).unwrap();
    let x = Tensor4::randn([4, 3, 16, 16], 0.5, 1.0, &mut rng).unwrap();
    let (_, cache) = a.forward(&x, Mode::Train).unwrap();
    a.commit_running_stats(&cache);
    let mut b: Network<f32> = build_network(&cfg, &mut Rng::new(99)).unwrap();
    load_network_state(&mut b, &network_state(&a)).unwrap();
    assert_eq!(a, b);
    assert!(load_network_state(&mut b, &[0.0; 3]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    let mut extra = Manifest::new();
    extra.set("seed", 6);
    save_checkpoint(&path, &a, &extra).unwrap();
    let (c, m) = load_checkpoint(&path).unwrap();
    assert_eq!(c, a);
    assert_eq!(m.get("seed"), Some("6"));
    assert_eq!(m.network_config().unwrap(), cfg);
}

#[test]
fn f64_and_f32_networks_agree() {
    let cfg = NetworkConfig::new(1, 10, BlockVariant::EluConvEluConv);
    let net: Network<f64> = build_network(&cfg, &mut Rng::new(3)).unwrap();
    let x = Tensor4::<f64>::randn([2, 3, 16, 16], 0.0, 1.0, &mut Rng::new(4)).unwrap();
    let (y64, _) = net.forward(&x, Mode::Train).unwrap();
    let (y32, _) = net.cast::<f32>().forward(&x.cast(), Mode::Train).unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-3 * a.abs().max(1.0));
    }
}
