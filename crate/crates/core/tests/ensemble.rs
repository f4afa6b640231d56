mod common;

use forest_structure::ensemble::{
    aggregate, fuse_values, inverse_variance_fuse, mixture_density, mixture_density_at, tiled_inference,
    EnsemblePrediction, GaussianPrediction, Tiling,
};
use forest_structure::model::{build_model, ModelConfig, ModelParameters, LOG_VAR_CLAMP};
use forest_structure::synthetic::generate_scene;
use forest_structure::training::{cut_inputs, Acquisitions};
use forest_structure::{ErrorKind, SceneData, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::monte_carlo;

fn pred(means: Vec<f64>, vars: Vec<f64>) -> GaussianPrediction {
    let n = means.len();
    GaussianPrediction::new(
        Tensor::new(vec![1, 1, n], means).unwrap(),
        Tensor::new(vec![1, 1, n], vars).unwrap(),
    )
    .unwrap()
}

#[test]
fn single_member_is_returned_unchanged() {
    let p = pred(vec![0.5, -2.0, 7.0], vec![0.1, 3.0, 1e-3]);
    let e = aggregate(vec![p.clone()]).unwrap();
    assert_eq!(e.mean, p.means);
    assert_eq!(e.variance, p.variances);
}

#[test]
fn two_member_moments() {
    let e = aggregate(vec![pred(vec![1.0], vec![1.0]), pred(vec![3.0], vec![1.0])]).unwrap();
    assert_eq!(e.mean.data(), &[2.0]);
    assert_eq!(e.variance.data(), &[2.0]);
}

#[test]
fn aggregate_rejects_bad_members() {
    assert!(aggregate(vec![]).is_err());
    let err = aggregate(vec![pred(vec![1.0], vec![1.0]), pred(vec![1.0, 2.0], vec![1.0, 1.0])]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::BadInput);
    let bad = GaussianPrediction::new(Tensor::new(vec![1], vec![0.0]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap());
    assert!(bad.is_err());
}

#[test]
fn aggregate_is_order_free_and_bounded_below_by_mean_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let members: Vec<GaussianPrediction> = (0..5)
        .map(|_| {
            pred(
                (0..20).map(|_| rng.random_range(-3.0..3.0)).collect(),
                (0..20).map(|_| rng.random_range(0.1..2.0)).collect(),
            )
        })
        .collect();
    let a = aggregate(members.clone()).unwrap();
    let mut rev = members.clone();
    rev.reverse();
    let b = aggregate(rev).unwrap();
    assert!(a.mean.max_abs_diff(&b.mean) < 1e-12);
    assert!(a.variance.max_abs_diff(&b.variance) < 1e-12);
    for i in 0..20 {
        let mean_var: f64 = members.iter().map(|m| m.variances.data()[i]).sum::<f64>() / 5.0;
        assert!(a.variance.data()[i] >= mean_var);
    }
    let same = aggregate(vec![pred(vec![1.0], vec![0.5]), pred(vec![1.0], vec![1.5])]).unwrap();
    assert_eq!(same.variance.data(), &[1.0]);
}

#[test]
fn aggregate_matches_mixture_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let m = rng.random_range(1..=6);
        let comps: Vec<(f64, f64)> = (0..m)
            .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.05..4.0)))
            .collect();
        let e = aggregate(comps.iter().map(|&(mu, v)| pred(vec![mu], vec![v])).collect()).unwrap();
        let (mean, se_mean, var, se_var) = monte_carlo(&comps, 200_000, &mut rng);
        assert!((e.mean.data()[0] - mean).abs() < 3.0 * se_mean, "{comps:?}");
        assert!((e.variance.data()[0] - var).abs() < 3.0 * se_var, "{comps:?}");
    }
}

#[test]
fn mixture_density_closed_forms() {
    let v = 1.0 / (2.0 * std::f64::consts::PI);
    assert!((mixture_density_at(&[(3.0, v)], 3.0) - 1.0).abs() < 1e-15);

    let comps = [(-1.0, 0.5), (2.0, 0.5)];
    for d in [0.1, 0.7, 2.5] {
        let a = mixture_density_at(&comps, 0.5 - d);
        let b = mixture_density_at(&comps, 0.5 + d);
        assert!((a - b).abs() < 1e-15);
    }

    let comps = [(-2.0, 0.3), (1.0, 2.0), (4.0, 0.8)];
    let lo = -2.0 - 8.0 * 2f64.sqrt();
    let hi = 4.0 + 8.0 * 2f64.sqrt();
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let integral: f64 = (0..n).map(|i| mixture_density_at(&comps, lo + (i as f64 + 0.5) * h)).sum::<f64>() * h;
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");

    let members = vec![pred(vec![0.0, 1.0], vec![1.0, 2.0]), pred(vec![2.0, 1.0], vec![1.0, 0.5])];
    let y = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
    let d = mixture_density(&members, &y).unwrap();
    assert_eq!(d.data()[0], mixture_density_at(&[(0.0, 1.0), (2.0, 1.0)], 1.0));
    assert_eq!(d.data()[1], mixture_density_at(&[(1.0, 2.0), (1.0, 0.5)], 0.0));
}

#[test]
fn fusion_fixtures() {
    assert_eq!(fuse_values(&[0.0, 10.0], &[1.0, 4.0]).unwrap(), 2.0);
    assert!((fuse_values(&[1.0, 2.0, 6.0], &[0.7, 0.7, 0.7]).unwrap() - 3.0).abs() < 1e-15);
    assert_eq!(fuse_values(&[4.25], &[9.0]).unwrap(), 4.25);
    for bad in [0.0, -1.0, f64::NAN] {
        assert_eq!(fuse_values(&[1.0, 2.0], &[1.0, bad]).unwrap_err().kind(), ErrorKind::BadInput);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng| {
        aggregate(vec![pred(
            (0..50).map(|_| rng.random_range(-5.0..5.0)).collect(),
            (0..50).map(|_| rng.random_range(0.01..5.0)).collect(),
        )])
        .unwrap()
    };
    let preds: Vec<EnsemblePrediction> = (0..4).map(|_| mk(&mut rng)).collect();
    let refs: Vec<&EnsemblePrediction> = preds.iter().collect();
    let fused = inverse_variance_fuse(&refs).unwrap();
    for i in 0..50 {
        let lo = preds.iter().map(|p| p.mean.data()[i]).fold(f64::INFINITY, f64::min);
        let hi = preds.iter().map(|p| p.mean.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(fused.data()[i] >= lo - 1e-12 && fused.data()[i] <= hi + 1e-12);
    }
    assert_eq!(inverse_variance_fuse(&refs[..1]).unwrap(), preds[0].mean);
}

/// Empirical MSE of the inverse-variance and the unweighted mean over trials
/// with independent unbiased estimates of known variance.
fn fusion_trial(variances: &[f64], trials: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fused, mut plain) = (0.0, 0.0);
    for _ in 0..trials {
        let y: f64 = rng.random_range(-10.0..10.0);
        let est: Vec<f64> = variances
            .iter()
            .map(|&v| y + Normal::new(0.0, v.sqrt()).unwrap().sample(&mut rng))
            .collect();
        fused += (fuse_values(&est, variances).unwrap() - y).powi(2);
        plain += (est.iter().sum::<f64>() / est.len() as f64 - y).powi(2);
    }
    (fused / trials as f64, plain / trials as f64)
}

#[test]
fn inverse_variance_weighting_beats_the_plain_mean() {
    let (f, p) = fusion_trial(&[1.0, 4.0], 10_000, 1);
    // expectations: 0.8 vs 1.25
    assert!(f < p, "{f} {p}");
    let (f, p) = fusion_trial(&[0.5, 0.5, 0.5], 10_000, 2);
    assert!((f - p).abs() < 1e-12);
}

fn primed_member(seed: u64, scene: &SceneData) -> ModelParameters<f32> {
    let mut m = build_model::<f32>(&ModelConfig::desk(), seed).unwrap();
    let acq = Acquisitions::default();
    let (o, s) = cut_inputs(scene, forest_structure::model::Ablation::S2S1, acq, 0, 0, 15, 15);
    m.run(
        Some(Tensor::new(vec![1, 12, 15, 15], o.unwrap()).unwrap()),
        Some(Tensor::new(vec![1, 4, 15, 15], s.unwrap()).unwrap()),
        true,
    )
    .unwrap();
    m
}

/// Outputs of one member on the window at `(r, c)`, as f64 `[5, 15, 15]` planes.
fn window_output(m: &ModelParameters<f32>, scene: &SceneData, r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (o, s) = cut_inputs(scene, forest_structure::model::Ablation::S2S1, Acquisitions::default(), r, c, 15, 15);
    let (mu, lv) = m
        .predict(
            Some(Tensor::new(vec![1, 12, 15, 15], o.unwrap()).unwrap()),
            Some(Tensor::new(vec![1, 4, 15, 15], s.unwrap()).unwrap()),
        )
        .unwrap();
    (
        mu.data().iter().map(|&x| x as f64).collect(),
        lv.data().iter().map(|&x| (x as f64).clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp()).collect(),
    )
}

#[test]
fn fifteen_pixel_scene_geometry() {
    let scene = generate_scene(3, 15, 15).unwrap().data;
    let m = primed_member(1, &scene);
    let strict = Tiling {
        extend_edges: false,
        ..Tiling::default()
    };
    let p = tiled_inference(std::slice::from_ref(&m), &scene, Acquisitions::default(), &strict).unwrap();
    let cov = p.coverage.as_ref().unwrap();
    for r in 0..15 {
        for c in 0..15 {
            let inner = (2..13).contains(&r) && (2..13).contains(&c);
            assert_eq!(cov[r * 15 + c], inner as u32, "({r},{c})");
        }
    }
    let full = tiled_inference(std::slice::from_ref(&m), &scene, Acquisitions::default(), &Tiling::default()).unwrap();
    assert!(full.coverage.as_ref().unwrap().iter().all(|&c| c == 1));
    // a single window: every pixel is that window's forward pass
    let (mu, var) = window_output(&m, &scene, 0, 0);
    for i in 0..5 * 225 {
        assert!((full.mean.data()[i] - mu[i]).abs() < 1e-6);
        assert!((full.variance.data()[i] / var[i] - 1.0).abs() < 1e-5);
    }
    assert_eq!(
        tiled_inference(std::slice::from_ref(&m), &generate_scene(3, 20, 15).unwrap().data.crop_rows(0..14).unwrap(), Acquisitions::default(), &strict)
            .unwrap_err()
            .kind(),
        ErrorKind::BadInput
    );
}

#[test]
fn thirty_three_pixel_scene_averages_overlaps() {
    let scene = generate_scene(5, 33, 33).unwrap().data;
    let m = primed_member(2, &scene);
    let tiling = Tiling {
        extend_edges: false,
        ..Tiling::default()
    };
    let p = tiled_inference(std::slice::from_ref(&m), &scene, Acquisitions::default(), &tiling).unwrap();
    let cov = p.coverage.as_ref().unwrap();

    // windows start at 0, 9, 18 and keep offsets 2..13 of each
    let kept = |start: usize, x: usize| x >= start + 2 && x < start + 13;
    let starts = [0usize, 9, 18];
    let outputs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = starts
        .iter()
        .map(|&r| starts.iter().map(|&c| window_output(&m, &scene, r, c)).collect())
        .collect();
    for r in 0..33 {
        for c in 0..33 {
            let rows: Vec<usize> = (0..3).filter(|&i| kept(starts[i], r)).collect();
            let cols: Vec<usize> = (0..3).filter(|&j| kept(starts[j], c)).collect();
            let n = rows.len() * cols.len();
            assert_eq!(cov[r * 33 + c] as usize, n, "({r},{c})");
            let overlap_rows = [11, 12, 20, 21].contains(&r);
            assert_eq!(rows.len() == 2, overlap_rows);
            if n == 0 {
                continue;
            }
            for v in 0..5 {
                let (mut sm, mut sv) = (0.0, 0.0);
                for &i in &rows {
                    for &j in &cols {
                        let k = (v * 15 + r - starts[i]) * 15 + c - starts[j];
                        sm += outputs[i][j].0[k];
                        sv += outputs[i][j].1[k];
                    }
                }
                let cell = (v * 33 + r) * 33 + c;
                assert!((p.mean.data()[cell] - sm / n as f64).abs() < 1e-6);
                assert!((p.variance.data()[cell] / (sv / n as f64) - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn constant_scene_is_translation_invariant() {
    let mut scene = generate_scene(7, 33, 33).unwrap().data;
    for t in scene.optical.iter_mut() {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        *t = Tensor::from_fn(&[c, h, w], |i| 0.05 + 0.01 * (i / (h * w)) as f32);
    }
    for t in scene.sar_asc.iter_mut().chain(scene.sar_desc.iter_mut()) {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        *t = Tensor::from_fn(&[c, h, w], |i| -0.5 - 0.3 * (i / (h * w)) as f32);
    }
    let m = primed_member(0, &scene);
    // every window sees the same input, so every window predicts the same block
    let (mu0, var0) = window_output(&m, &scene, 0, 0);
    for (r, c) in [(9, 0), (18, 9), (18, 18), (0, 18)] {
        let (mu, var) = window_output(&m, &scene, r, c);
        assert_eq!(mu, mu0);
        assert_eq!(var, var0);
    }
    let tiling = Tiling {
        extend_edges: false,
        ..Tiling::default()
    };
    let p = tiled_inference(std::slice::from_ref(&m), &scene, Acquisitions::default(), &tiling).unwrap();
    // zero padding makes the block vary with the offset inside the window,
    // so the canvas repeats with the window stride
    for v in 0..5 {
        for r in 2..31 {
            for c in 2..31 {
                let off = |x: usize| if x < 11 { x } else if x < 20 { x - 9 } else { x - 18 };
                if [11, 12, 20, 21].contains(&r) || [11, 12, 20, 21].contains(&c) {
                    continue;
                }
                let k = (v * 15 + off(r)) * 15 + off(c);
                assert!((p.mean.data()[(v * 33 + r) * 33 + c] - mu0[k]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn mismatched_members_are_rejected() {
    let scene = generate_scene(3, 15, 15).unwrap().data;
    let a = primed_member(1, &scene);
    let b = build_model::<f32>(&ModelConfig::desk().select_inputs(forest_structure::model::Ablation::S2), 1).unwrap();
    assert!(tiled_inference(&[a, b], &scene, Acquisitions::default(), &Tiling::default()).is_err());
    assert!(tiled_inference(&[], &scene, Acquisitions::default(), &Tiling::default()).is_err());
}

#[test]
fn prediction_tile_round_trip() {
    let scene = generate_scene(3, 20, 17).unwrap().data;
    let m = primed_member(1, &scene);
    let tiling = Tiling {
        extend_edges: false,
        ..Tiling::default()
    };
    let p = tiled_inference(std::slice::from_ref(&m), &scene, Acquisitions::default(), &tiling).unwrap();
    let tile = p.to_tile(*scene.grid()).unwrap();
    let back = EnsemblePrediction::from_tile(&tile).unwrap();
    assert_eq!(back.coverage, p.coverage);
    for cell in 0..20 * 17 {
        if p.covered(cell) {
            for v in forest_structure::Variable::ALL {
                let (a, b) = (p.value(v, cell), back.value(v, cell));
                assert!((a.0 - b.0).abs() <= 1e-6 * a.0.abs().max(1.0));
                assert!((a.1 / b.1 - 1.0).abs() < 1e-6);
            }
        }
    }
}
