use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splite::backbone::{dense_conv2d, relu_in_place, ConvMode, ConvSpec};
use splite::decoder::hand_template;
use splite::io::{quantize_store, set_activation_ranges};
use splite::lifting::CameraIntrinsics;
use splite::pipeline::{quantized_pipeline_delta, random_store, Model, ModelConfig};
use splite::preproc::{synth_sparse_input, FusedInput};
use splite::quant::{qconv2d, QConvSpec, QuantMode, QuantParams};
use splite::tensor::{dequantize, quantize_asymmetric, DenseTensor};

fn random_input(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> DenseTensor {
    DenseTensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..3.0)).collect()).unwrap()
}

#[test]
fn zero_input_gives_bias_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = QConvSpec::from_conv(&ConvSpec::random(&mut rng, 4, 6, 3, 1, ConvMode::Submanifold)).unwrap();
    let x = quantize_asymmetric(&DenseTensor::zeros(vec![4, 5, 5]), 0.1, 0).unwrap();
    let y = qconv2d(&x, &spec).unwrap();
    for o in 0..6 {
        assert!(y.data()[o * 25..(o + 1) * 25].iter().all(|v| *v == spec.bias()[o]));
    }
}

#[test]
fn qconv_stays_within_bound_on_random_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let (cin, cout) = (rng.random_range(1..12), rng.random_range(1..12));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let spec = ConvSpec::random(&mut rng, cin, cout, k, 1, ConvMode::Submanifold);
        let q = QConvSpec::from_conv(&spec).unwrap();
        let x = random_input(&mut rng, cin, 9, 7);
        let p = QuantParams::from_range(&x);
        let xq = quantize_asymmetric(&x, p.scales[0], p.zero_point).unwrap();
        let got = qconv2d(&xq, &q).unwrap();
        let oracle = dense_conv2d(&dequantize(&xq), &q.to_f32().unwrap()).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() <= q.error_bound(p.scales[0]));
    }
}

#[test]
fn quantizing_one_layer_is_bounded_by_propagated_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let l1 = ConvSpec::random(&mut rng, 3, 8, 3, 1, ConvMode::Submanifold);
        let l2 = ConvSpec::random(&mut rng, 8, 4, 3, 1, ConvMode::Submanifold);
        let q1 = QConvSpec::from_conv(&l1).unwrap();
        let x = random_input(&mut rng, 3, 10, 10);

        let run = |first: &ConvSpec| {
            let mut h = dense_conv2d(&x, first).unwrap();
            relu_in_place(h.data_mut());
            dense_conv2d(&h, &l2).unwrap()
        };
        let change = run(&q1.to_f32().unwrap()).max_abs_diff(&run(&l1)).unwrap();

        // weight rounding moves each first-layer output by at most
        // Σ|x| · s_w / 2; ReLU is 1-Lipschitz; the second layer scales an
        // elementwise perturbation by at most its largest absolute row sum
        let max_abs_x = x.max_abs();
        let taps = 9 * 3;
        let layer_bound = taps as f32 * max_abs_x * q1.weights().max_scale() / 2.0;
        let lipschitz = l2
            .weights()
            .chunks(8 * 9)
            .map(|row| row.iter().map(|w| w.abs()).sum::<f32>())
            .fold(0.0, f32::max);
        assert!(change <= layer_bound * lipschitz * 1.0001, "{change} > {}", layer_bound * lipschitz);
    }
}

#[test]
fn weight_and_activation_mode_runs_and_is_deterministic() {
    let topo = hand_template().topology;
    let config = ModelConfig::tiny();
    let mut store = random_store(&config, &topo, 4, true);
    let net = splite::backbone::Backbone::from_store(&store, &config.backbone).unwrap();
    let mut obs = splite::quant::RangeObserver::new();
    for seed in 0..3 {
        let x = FusedInput::from_edge_map(&synth_sparse_input(128, 128, 0.9, seed).unwrap()).unwrap();
        net.forward_observed(&x, &mut obs).unwrap();
    }
    set_activation_ranges(&mut store, obs.ranges());
    let q = quantize_store(&store).unwrap();
    let k = CameraIntrinsics::default();
    let x = FusedInput::from_edge_map(&synth_sparse_input(128, 128, 0.85, 9).unwrap()).unwrap();
    let model = Model::from_store(&q, &topo, &config, QuantMode::WeightsAndActivations).unwrap();
    let a = model.infer_fused(&x, &k, "a").unwrap().0;
    let b = model.clone().with_workers(3).infer_fused(&x, &k, "a").unwrap().0;
    assert_eq!(a.to_line().unwrap(), b.to_line().unwrap());

    let d = quantized_pipeline_delta(&[("a".into(), x)], &store, &q, &topo, &config, QuantMode::WeightsAndActivations, &k).unwrap();
    assert!(d[0].mean_joint_delta_mm <= 5.0, "{:?}", d[0]);
}

#[test]
fn activation_mode_without_ranges_names_the_missing_entry() {
    let topo = hand_template().topology;
    let config = ModelConfig::tiny();
    let q = quantize_store(&random_store(&config, &topo, 5, false)).unwrap();
    let err = Model::from_store(&q, &topo, &config, QuantMode::WeightsAndActivations).unwrap_err();
    assert!(err.to_string().contains("quant.act.input.range"), "{err}");
}
