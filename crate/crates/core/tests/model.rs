use forest_structure::model::{
    build_model, checkpoint_bytes, checkpoint_from_bytes, network_grad_check, parameter_count, Ablation, Checkpoint,
    ForwardOptions, ModelConfig, OptimizerState, ShortcutSource,
};
use forest_structure::tensor::gradcheck::GradCheckOptions;
use forest_structure::{ErrorKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(b: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::from_fn(&[b, 12, h, w], |_| rng.random_range(-2.0..2.0)),
        Tensor::from_fn(&[b, 4, h, w], |_| rng.random_range(-2.0..2.0)),
    )
}

#[test]
fn desk_parameter_count_matches_hand_derivation() {
    // entries: optical 12->16 (1x1, no bias) + BN; SAR 4->16 (5x5) + BN
    let entries = (16 * 12 + 2 * 16) + (16 * 4 * 25 + 2 * 16);
    // stage 1, width 16: 32->16, grouped 3x3 16->16 (4 groups), 16->32
    let stage1 = (32 * 16 + 32) + (16 * 4 * 9 + 32) + (16 * 32 + 64);
    // stage 2, width 32: 32->32, grouped 3x3 32->32, 32->64, projection 32->64 with bias
    let stage2 = (32 * 32 + 64) + (32 * 8 * 9 + 64) + (32 * 64 + 128) + (32 * 64 + 64);
    // two heads on 64 + 16 raw channels
    let heads = 2 * (80 * 32 + 32 + 32 * 5 + 5);
    let expected = entries + stage1 + stage2 + heads;
    assert_eq!(expected, 16842);

    let config = ModelConfig::desk();
    assert_eq!(parameter_count(&config), expected);
    assert_eq!(build_model::<f32>(&config, 0).unwrap().store.numel(), expected);
}

#[test]
fn initialization_is_seeded() {
    let config = ModelConfig::desk();
    let a = build_model::<f32>(&config, 3).unwrap();
    let b = build_model::<f32>(&config, 3).unwrap();
    let c = build_model::<f32>(&config, 4).unwrap();
    let diff = |x: &forest_structure::model::ModelParameters<f32>, y: &forest_structure::model::ModelParameters<f32>| {
        x.store
            .iter()
            .zip(y.store.iter())
            .map(|((_, _, p), (_, _, q))| p.max_abs_diff(q))
            .fold(0.0f32, f32::max)
    };
    assert_eq!(diff(&a, &b), 0.0);
    assert!(diff(&a, &c) > 0.0);
}

#[test]
fn output_shapes_and_ranges() {
    let mut params = build_model::<f32>(&ModelConfig::desk(), 1).unwrap();
    let (o, s) = inputs(2, 15, 15, 2);
    let (m, v) = params.run(Some(o.clone()), Some(s.clone()), true).unwrap();
    assert_eq!(m.shape(), &[2, 5, 15, 15]);
    assert_eq!(v.shape(), &[2, 5, 15, 15]);
    let plane = 15 * 15;
    for b in 0..2 {
        for j in 0..5 {
            for &x in &m.data()[(b * 5 + j) * plane..(b * 5 + j + 1) * plane] {
                assert!(x > 0.0);
                if j >= 2 {
                    assert!(x < 1.0);
                }
            }
        }
    }
    let first = params.predict(Some(o.clone()), Some(s.clone())).unwrap();
    assert_eq!(first, params.predict(Some(o), Some(s)).unwrap());
}

#[test]
fn any_spatial_extent_is_preserved() {
    let mut params = build_model::<f32>(&ModelConfig::desk(), 1).unwrap();
    let (o, s) = inputs(1, 9, 13, 5);
    let (m, _) = params.run(Some(o), Some(s), true).unwrap();
    assert_eq!(m.shape(), &[1, 5, 9, 13]);
}

#[test]
fn ablations_drop_branches() {
    let desk = ModelConfig::desk();
    let mut s2 = build_model::<f32>(&desk.select_inputs(Ablation::S2), 0).unwrap();
    assert!(s2.store.iter().all(|(_, n, _)| !n.starts_with("entry.sar")));
    assert_eq!(s2.store.get(s2.store.id("entry.optical.conv.weight").unwrap()).shape()[0], 32);
    let s1 = build_model::<f32>(&desk.select_inputs(Ablation::S1), 0).unwrap();
    assert!(s1.store.iter().all(|(_, n, _)| !n.starts_with("entry.optical")));
    let rand = desk.select_inputs(Ablation::S1Rand);
    assert_eq!(rand.sar_channels, 2);
    assert_eq!(desk.raw_channels(), 16);
    assert!("S3".parse::<Ablation>().is_err());
    assert_eq!("S2 only".parse::<Ablation>().unwrap(), Ablation::S2);

    let (o, _) = inputs(1, 15, 15, 0);
    assert!(s2.run(Some(o.clone()), None, true).is_ok());
    assert_eq!(s1.predict(Some(o), None).unwrap_err().kind(), ErrorKind::BadInput);
}

#[test]
fn pixel_shortcut_is_live() {
    for shortcut in [ShortcutSource::Raw, ShortcutSource::EntryFeatures] {
        let config = ModelConfig {
            shortcut,
            ..ModelConfig::desk()
        };
        let mut params = build_model::<f32>(&config, 9).unwrap();
        let (o, s) = inputs(2, 15, 15, 9);
        params.run(Some(o.clone()), Some(s.clone()), true).unwrap();
        let live = params.predict(Some(o.clone()), Some(s.clone())).unwrap();
        let zeroed = params
            .predict_with(Some(o), Some(s), ForwardOptions { zero_shortcut: true })
            .unwrap();
        assert!(live.0.max_abs_diff(&zeroed.0) > 0.0, "{shortcut:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut params = build_model::<f32>(&ModelConfig::desk(), 11).unwrap();
    let (o, s) = inputs(2, 15, 15, 11);
    params.run(Some(o.clone()), Some(s.clone()), true).unwrap();
    params.input_norm.mean[3] = 0.25;
    let optimizer = OptimizerState {
        step: 17,
        lr: 1e-3,
        m: params.store.iter().map(|(_, _, t)| t.map(|x| 0.5 * x)).collect(),
        v: params.store.iter().map(|(_, _, t)| t.map(|x| x * x)).collect(),
    };
    let ck = Checkpoint {
        params: params.clone(),
        optimizer: Some(optimizer.clone()),
        extra: serde_json::json!({"member": 2}),
    };
    let bytes = checkpoint_bytes(&ck).unwrap();
    let back = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(back.optimizer.as_ref(), Some(&optimizer));
    assert_eq!(back.extra["member"], 2);
    assert_eq!(back.params.input_norm, params.input_norm);
    assert_eq!(
        back.params.predict(Some(o.clone()), Some(s.clone())).unwrap(),
        params.predict(Some(o), Some(s)).unwrap()
    );
    assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

    for cut in [4, 20, bytes.len() - 1] {
        let err = checkpoint_from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Format);
    }
    let mut bad = bytes.clone();
    bad.push(0);
    assert_eq!(checkpoint_from_bytes(&bad).unwrap_err().kind(), ErrorKind::Format);
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    let config = ModelConfig {
        n_blocks: vec![1, 1],
        n_channels: vec![8, 16],
        n_groups: 2,
        head_hidden_channels: 4,
        ..ModelConfig::desk()
    };
    let opts = GradCheckOptions {
        max_coords_per_param: Some(8),
        ..GradCheckOptions::default()
    };
    let report = network_grad_check(&config, 1, 2, 5, &opts).unwrap();
    assert!(report.passes(1e-4), "{:#?}", report);
}
