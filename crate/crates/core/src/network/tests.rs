use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Dims;

fn random_tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_vec(
        shape,
        (0..shape.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_layer(c_in: usize, c_out: usize, k: usize, seed: u64) -> Conv3dLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..c_out * c_in * k * k * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let b = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    Conv3dLayer::new(c_in, c_out, k, w, b).unwrap()
}

/// Direct transcription of the same-padded convolution sum.
fn naive_conv(input: &Tensor4<f64>, layer: &Conv3dLayer<f64>) -> Tensor4<f64> {
    let dims = input.spatial();
    let r = (layer.k / 2) as isize;
    let mut out = Tensor4::zeros(Shape4::new(layer.c_out, dims));
    let (d, h, w) = (
        dims.depth as isize,
        dims.height as isize,
        dims.width as isize,
    );
    let vol = dims.len();
    for o in 0..layer.c_out {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.c_in {
                        for kz in 0..layer.k {
                            for ky in 0..layer.k {
                                for kx in 0..layer.k {
                                    let (sz, sy, sx) = (
                                        z + kz as isize - r,
                                        y + ky as isize - r,
                                        x + kx as isize - r,
                                    );
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d || sy >= h || sx >= w {
                                        continue;
                                    }
                                    acc += layer.weight(o, i, kz, ky, kx)
                                        * input.get(i, sz as usize, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[o * vol + dims.index(z as usize, y as usize, x as usize)] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn all_ones_kernel_counts_in_bounds_neighbours() {
    let x = Tensor4::full(Shape4::new(1, Dims::cube(3)), 1.0f64);
    let layer = Conv3dLayer::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
    let y = conv3d_forward(&x, &layer).unwrap();
    assert_eq!(y.get(0, 1, 1, 1), 27.0);
    assert_eq!(y.get(0, 0, 1, 1), 18.0);
    assert_eq!(y.get(0, 1, 1, 2), 18.0);
    assert_eq!(y.get(0, 0, 0, 1), 12.0);
    assert_eq!(y.get(0, 2, 1, 0), 12.0);
    assert_eq!(y.get(0, 0, 0, 0), 8.0);
    assert_eq!(y.get(0, 2, 2, 2), 8.0);
}

#[test]
fn pointwise_kernel_is_affine() {
    let x = random_tensor(Shape4::new(1, Dims::new(3, 4, 5)), 1);
    let layer = Conv3dLayer::new(1, 1, 1, vec![2.5], vec![-0.75]).unwrap();
    let y = conv3d_forward(&x, &layer).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 2.5 * b - 0.75);
    }
    let zero = Conv3dLayer::new(1, 2, 3, vec![0.0; 54], vec![0.5, -3.0]).unwrap();
    let y = conv3d_forward(&x, &zero).unwrap();
    assert!(y.channel(0).iter().all(|&v| v == 0.5));
    assert!(y.channel(1).iter().all(|&v| v == -3.0));
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = random_tensor(Shape4::new(2, Dims::cube(3)), 1);
    let layer = random_layer(3, 1, 3, 2);
    assert!(conv3d_forward(&x, &layer).is_err());
    assert!(Conv3dLayer::new(1, 1, 2, vec![0.0; 8], vec![0.0]).is_err());
    assert!(Conv3dLayer::<f64>::new(1, 1, 3, vec![0.0; 26], vec![0.0]).is_err());
}

#[test]
fn conv_matches_naive_reference() {
    for (seed, (c_in, c_out, k, dims)) in [
        (1, 1, 3, Dims::new(4, 5, 6)),
        (3, 2, 5, Dims::new(5, 3, 7)),
        (2, 4, 1, Dims::new(2, 2, 9)),
        (2, 3, 3, Dims::new(1, 1, 1)),
        (1, 1, 5, Dims::new(2, 3, 2)),
        (2, 2, 5, Dims::new(1, 2, 1)),
    ]
    .into_iter()
    .enumerate()
    {
        let x = random_tensor(Shape4::new(c_in, dims), seed as u64);
        let layer = random_layer(c_in, c_out, k, 100 + seed as u64);
        let fast = conv3d_forward(&x, &layer).unwrap();
        let slow = naive_conv(&x, &layer);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn relu_examples() {
    let t = Tensor4::from_vec(Shape4::new(1, Dims::new(1, 1, 3)), vec![-1.0f64, 2.0, 0.0]).unwrap();
    assert_eq!(relu(&t).data(), &[0.0, 2.0, 0.0]);
}

#[test]
fn zero_network_forward() {
    let x = random_tensor(Shape4::new(1, Dims::new(4, 5, 3)), 7);
    let cfg = NetworkConfig {
        depth: 4,
        channels: 3,
        kernel: 3,
        residual: true,
    };
    let net = Network::<f64>::zeros(cfg).unwrap();
    let (y, cache) = net.forward(&x).unwrap();
    assert_eq!(y, x);
    assert_eq!(net.predict(&x, None).unwrap(), x);
    assert_eq!(cache.inputs.len(), 4);
    for (l, z) in cache.pre_activations.iter().enumerate() {
        assert_eq!(z.shape(), Shape4::new(3, x.spatial()), "layer {l}");
    }

    let plain = Network::<f64>::zeros(NetworkConfig {
        residual: false,
        ..cfg
    })
    .unwrap();
    let (y, _) = plain.forward(&x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_unit_layers_pass_positive_input() {
    let cfg = NetworkConfig {
        depth: 2,
        channels: 1,
        kernel: 1,
        residual: false,
    };
    let layers = vec![
        Conv3dLayer::new(1, 1, 1, vec![1.0f64], vec![0.0]).unwrap(),
        Conv3dLayer::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap(),
    ];
    let net = Network::from_layers(cfg, layers).unwrap();
    let x = random_tensor(Shape4::new(1, Dims::cube(3)), 3).map(|v| v.abs() + 0.01);
    assert_eq!(net.forward(&x).unwrap().0, x);
}

#[test]
fn from_layers_enforces_channel_chain() {
    let cfg = NetworkConfig {
        depth: 2,
        channels: 2,
        kernel: 1,
        residual: true,
    };
    let good = vec![
        Conv3dLayer::<f32>::zeros(1, 2, 1),
        Conv3dLayer::zeros(2, 1, 1),
    ];
    assert!(Network::from_layers(cfg, good).is_ok());
    let bad = vec![
        Conv3dLayer::<f32>::zeros(1, 2, 1),
        Conv3dLayer::zeros(2, 2, 1),
    ];
    assert!(Network::from_layers(cfg, bad).is_err());
    assert!(Network::from_layers(cfg, vec![Conv3dLayer::<f32>::zeros(1, 2, 1)]).is_err());
}

#[test]
fn config_validation_names_keys() {
    let bad = |cfg: NetworkConfig| cfg.validate().unwrap_err().to_string();
    let d = NetworkConfig::default();
    assert!(bad(NetworkConfig { depth: 1, ..d }).contains("network.depth"));
    assert!(bad(NetworkConfig { channels: 0, ..d }).contains("network.channels"));
    assert!(bad(NetworkConfig { kernel: 4, ..d }).contains("network.kernel"));
    assert_eq!(
        d.channel_chain(),
        [1, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 1]
    );
    assert_eq!(d.receptive_radius(), 12);
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let cfg = NetworkConfig {
        depth: 3,
        channels: 2,
        kernel: 3,
        residual: true,
    };
    let net = Network::<f64>::init_gaussian(cfg, 4, 0.3).unwrap();
    let x = random_tensor(Shape4::new(1, Dims::cube(4)), 5);
    let (_, cache) = net.forward(&x).unwrap();
    let g = net.backward(&cache, &Tensor4::zeros(x.shape())).unwrap();
    assert_eq!(g.max_abs(), 0.0);
    assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_affine_layer_gradient_by_hand() {
    // depth-2 chain with the second layer fixed to the identity isolates the
    // first layer as the single affine layer under test
    let cfg = NetworkConfig {
        depth: 2,
        channels: 1,
        kernel: 1,
        residual: false,
    };
    let layers = vec![
        Conv3dLayer::new(1, 1, 1, vec![0.7f64], vec![5.0]).unwrap(),
        Conv3dLayer::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap(),
    ];
    let net = Network::from_layers(cfg, layers).unwrap();
    let x = random_tensor(Shape4::new(1, Dims::new(2, 3, 4)), 11);
    let d_y = random_tensor(x.shape(), 12);
    let (_, cache) = net.forward(&x).unwrap();
    assert!(cache.pre_activations[0].data().iter().all(|&v| v > 0.0));
    let g = net.backward(&cache, &d_y).unwrap();
    let dw: f64 = x.data().iter().zip(d_y.data()).map(|(a, b)| a * b).sum();
    let db: f64 = d_y.data().iter().sum();
    assert!((g.layers[0].weights[0] - dw).abs() < 1e-12);
    assert!((g.layers[0].bias[0] - db).abs() < 1e-12);
    for (gi, dy) in g.input.unwrap().data().iter().zip(d_y.data()) {
        assert!((gi - 0.7 * dy).abs() < 1e-12);
    }
}

#[test]
fn residual_head_routes_output_gradient_to_input() {
    let cfg = NetworkConfig {
        depth: 2,
        channels: 2,
        kernel: 3,
        residual: true,
    };
    let net = Network::<f64>::zeros(cfg).unwrap();
    let x = random_tensor(Shape4::new(1, Dims::cube(3)), 1);
    let d_y = random_tensor(x.shape(), 2);
    let (_, cache) = net.forward(&x).unwrap();
    assert_eq!(net.backward(&cache, &d_y).unwrap().input.unwrap(), d_y);
}

#[test]
fn backward_rejects_mismatched_gradient() {
    let net = Network::<f64>::zeros(NetworkConfig {
        depth: 2,
        channels: 1,
        kernel: 1,
        residual: true,
    })
    .unwrap();
    let x = random_tensor(Shape4::new(1, Dims::cube(3)), 1);
    let (_, cache) = net.forward(&x).unwrap();
    assert!(net
        .backward(&cache, &Tensor4::zeros(Shape4::new(1, Dims::cube(2))))
        .is_err());
}

#[test]
fn gaussian_init_statistics() {
    let cfg = NetworkConfig {
        depth: 2,
        channels: 3704,
        kernel: 3,
        residual: true,
    };
    let net = init_network(cfg, 42).unwrap();
    let w: Vec<f64> = net.layers()[0]
        .weights
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    assert!(w.len() >= 100_000);
    let w = &w[..100_000];
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
    assert!((std - INIT_STD).abs() <= 0.05 * INIT_STD, "std {std}");
    assert!(net
        .layers()
        .iter()
        .all(|l| l.bias.iter().all(|&b| b == 0.0)));
    assert_eq!(init_network(cfg, 42).unwrap(), net);
    assert_ne!(init_network(cfg, 43).unwrap(), net);
}

#[test]
fn cost_model_examples() {
    assert_eq!(cost_model(&NetworkConfig::default(), 25), 17_334_000_000);
    let tiny = NetworkConfig {
        depth: 2,
        channels: 1,
        kernel: 1,
        residual: true,
    };
    assert_eq!(cost_model(&tiny, 1), 2);
    let k3 = NetworkConfig {
        kernel: 3,
        ..NetworkConfig::default()
    };
    let k5 = NetworkConfig { kernel: 5, ..k3 };
    assert_eq!(cost_model(&k5, 7) * 27, cost_model(&k3, 7) * 125);
}

#[test]
fn mac_counter_matches_cost_model() {
    let cfg = NetworkConfig {
        depth: 12,
        channels: 4,
        kernel: 3,
        residual: true,
    };
    let net = Network::<f32>::zeros(cfg).unwrap();
    let counter = MacCounter::new();
    let mut h = Tensor4::zeros(Shape4::new(1, Dims::cube(5)));
    for layer in net.layers() {
        h = conv3d_forward_counted(&h, layer, Some(&counter)).unwrap();
    }
    assert_eq!(counter.total(), cost_model(&cfg, 5));
    assert!(counter.padded() > 0 && counter.computed() > 0);
    // the m=25 figure scales from m=5 by (25/5)³
    let full = NetworkConfig::default();
    assert_eq!(cost_model(&full, 5) * 125, 17_334_000_000);
}

#[test]
fn gradient_check_documented_examples_under_fixed_std() {
    let opts = GradCheckOptions {
        init: CheckInit::Std(0.1),
        ..GradCheckOptions::default()
    };
    for residual in [true, false] {
        let small = NetworkConfig {
            depth: 3,
            channels: 4,
            kernel: 3,
            residual,
        };
        let r = gradient_check_with(small, Dims::cube(5), 2, 1e-5, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let deep = NetworkConfig {
            depth: 12,
            channels: 8,
            ..small
        };
        let r = gradient_check_with(deep, Dims::cube(5), 2, 1e-5, &opts).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}

#[test]
fn gradient_check_small_configs() {
    for residual in [true, false] {
        let cfg = NetworkConfig {
            depth: 3,
            channels: 4,
            kernel: 3,
            residual,
        };
        let r = gradient_check(cfg, Dims::cube(5), 1, 1e-5).unwrap();
        assert!(r.checked >= 200, "{r:?}");
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }
}

#[test]
fn gradient_check_catches_relu_fault() {
    let cfg = NetworkConfig {
        depth: 3,
        channels: 4,
        kernel: 3,
        residual: true,
    };
    let opts = GradCheckOptions {
        fault: Some(BackwardFault::ReluSignFlip),
        ..GradCheckOptions::default()
    };
    let r = gradient_check_with(cfg, Dims::cube(5), 1, 1e-5, &opts).unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn predict_matches_forward_and_meters_memory() {
    let cfg = NetworkConfig {
        depth: 4,
        channels: 3,
        kernel: 3,
        residual: true,
    };
    let net = Network::<f32>::init_gaussian(cfg, 9, 0.2).unwrap();
    let x = random_tensor(Shape4::new(1, Dims::new(4, 6, 5)), 8).cast::<f32>();
    let meter = ActivationMeter::new();
    let y = net.predict(&x, Some(&meter)).unwrap();
    assert_eq!(y, net.forward(&x).unwrap().0);
    assert_eq!(meter.current_bytes(), 0);
    assert_eq!(
        meter.peak_bytes(),
        net.predict_footprint_bytes(x.spatial().len())
    );
}

#[test]
fn model_file_round_trip() {
    let cfg = NetworkConfig {
        depth: 3,
        channels: 5,
        kernel: 3,
        residual: false,
    };
    let net = Network::<f32>::init_gaussian(cfg, 77, 0.5).unwrap();
    let bytes = model_to_bytes(&net);
    assert_eq!(&bytes[..4], MODEL_MAGIC);
    assert_eq!(bytes.len(), 4 + 4 * 4 + 1 + 4 * cfg.param_count());
    let back = model_from_bytes(&bytes).unwrap();
    let bits = |n: &Network<f32>| {
        n.params()
            .flat_map(|p| p.iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(back.config(), net.config());
    assert_eq!(bits(&back), bits(&net));
    assert_eq!(model_to_bytes(&back), bytes);

    assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(model_from_bytes(&extra).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(model_from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 9;
    assert!(model_from_bytes(&bad_version).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relu_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let n = values.len();
        let t = Tensor4::from_vec(Shape4::new(1, Dims::new(1, 1, n)), values).unwrap();
        let once = relu(&t);
        prop_assert_eq!(relu(&once), once.clone());
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_padding_preserves_spatial_shape(
        d in 1usize..6, h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]), c in 1usize..3,
    ) {
        let dims = Dims::new(d, h, w);
        let x = random_tensor(Shape4::new(c, dims), 3);
        let y = conv3d_forward(&x, &random_layer(c, 2, k, 4)).unwrap();
        prop_assert_eq!(y.shape(), Shape4::new(2, dims));
    }

    #[test]
    fn zero_residual_network_is_identity(
        depth in 2usize..5, channels in 1usize..4, k in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>(),
    ) {
        let cfg = NetworkConfig { depth, channels, kernel: k, residual: true };
        let net = Network::<f32>::zeros(cfg).unwrap();
        let x = random_tensor(Shape4::new(1, Dims::new(3, 4, 2)), seed).cast::<f32>();
        let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&net.forward(&x).unwrap().0), bits(&x));
    }

    #[test]
    fn mac_counter_equals_cost_model(
        depth in 2usize..5, channels in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), m in 1usize..8,
    ) {
        let cfg = NetworkConfig { depth, channels, kernel: k, residual: true };
        let net = Network::<f32>::zeros(cfg).unwrap();
        let counter = MacCounter::new();
        let mut h = Tensor4::zeros(Shape4::new(1, Dims::cube(m)));
        for layer in net.layers() {
            h = conv3d_forward_counted(&h, layer, Some(&counter)).unwrap();
        }
        prop_assert_eq!(counter.total(), cost_model(&cfg, m));
    }
}
