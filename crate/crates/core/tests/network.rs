use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_core::nn::{Module, Tensor};
use refnet_core::refnet::{Ablation, Mode, Model, ModelConfig, Normalization};
use refnet_core::volume::{Modality, ScanVolume, Shape3, Spacing};

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        levels: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn random_input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|_| r.random()).collect())
}

fn param_values(m: &Model) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name, p.value.clone())));
    out
}

#[test]
fn output_shape_and_softmax() {
    let m = Model::build(small(1)).unwrap();
    let x = random_input(2, 20, 28, 3);
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), [2, 3, 20, 28]);
    let p = y.plane();
    for i in 0..2 {
        let img = y.image(i);
        for j in 0..p {
            let s: f32 = (0..3).map(|c| img[c * p + j]).sum();
            assert!((s - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn full_size_default_depth_shape() {
    let cfg = ModelConfig {
        base_channels: 2,
        ..ModelConfig::default()
    };
    let m = Model::build(cfg).unwrap();
    let y = m.predict(&random_input(1, 128, 128, 0)).unwrap();
    assert_eq!(y.shape(), [1, 3, 128, 128]);
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut m = Model::build(small(2)).unwrap();
    // Move running statistics away from their initial values first.
    m.set_mode(Mode::Train);
    m.forward(&random_input(4, 16, 16, 9)).unwrap();
    m.set_mode(Mode::Eval);
    let batch = random_input(8, 16, 16, 4);
    let all = m.predict(&batch).unwrap();
    for i in 0..8 {
        let one = m.predict(&batch.select(i)).unwrap();
        let d = one
            .data
            .iter()
            .zip(all.image(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(d <= 1e-5, "image {i}: {d}");
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Model::build(small(7)).unwrap();
    let b = Model::build(small(7)).unwrap();
    let c = Model::build(small(8)).unwrap();
    assert_eq!(param_values(&a), param_values(&b));
    assert_ne!(param_values(&a), param_values(&c));
}

#[test]
fn levels_set_encoder_and_decoder_depth() {
    let m = Model::build(ModelConfig {
        base_channels: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let names: Vec<String> = param_values(&m).into_iter().map(|p| p.0).collect();
    for l in 0..4 {
        assert!(names.iter().any(|n| n.starts_with(&format!("enc{l}."))));
        assert!(names.iter().any(|n| n.starts_with(&format!("dec{l}."))));
    }
    assert!(!names.iter().any(|n| n.starts_with("enc4.") || n.starts_with("dec4.")));
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        ModelConfig { num_classes: 0, ..small(0) },
        ModelConfig { levels: 0, ..small(0) },
        ModelConfig { multiscale_kernels: vec![2], ..small(0) },
    ] {
        assert!(Model::build(cfg).is_err());
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = Model::build(ModelConfig {
        normalization: Normalization::Batch,
        ..small(5)
    })
    .unwrap();
    m.set_mode(Mode::Train);
    m.forward(&random_input(2, 8, 8, 1)).unwrap();
    m.set_mode(Mode::Eval);
    m.save(&path).unwrap();
    let back = Model::load_expecting(&path, &m.config).unwrap();
    assert_eq!(param_values(&back), param_values(&m));
    let x = random_input(1, 12, 12, 2);
    assert_eq!(back.predict(&x).unwrap().data, m.predict(&x).unwrap().data);
    assert!(Model::load_expecting(&path, &small(6)).is_err());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn ablations_change_output() {
    let m = Model::build(small(3)).unwrap();
    let x = random_input(1, 16, 16, 5);
    let base = m.predict(&x).unwrap();
    for ab in [
        Ablation { zero_bottleneck: true, zero_skip: None },
        Ablation { zero_bottleneck: false, zero_skip: Some(0) },
    ] {
        let y = m.predict_with(&x, ab).unwrap();
        assert_ne!(y.data, base.data);
    }
}

#[test]
fn volume_prediction_matches_per_bscan() {
    let m = Model::build(small(4)).unwrap();
    let shape = Shape3::new(3, 12, 10);
    let mut v = ScanVolume::zeros(shape, Spacing::default(), Modality::Oct, "p");
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for x in &mut v.voxels {
        *x = r.random();
    }
    let pv = m.predict_volume(&v, 2).unwrap();
    pv.validate().unwrap();
    let one = m
        .predict(&Tensor::from_vec(1, 1, 12, 10, v.bscan(1).to_vec()))
        .unwrap();
    let p = shape.bscan_len();
    for j in 0..p {
        for c in 0..3 {
            let a = pv.probs[(p + j) * 3 + c];
            assert!((a - one.data[c * p + j]).abs() <= 1e-6);
        }
    }
}
