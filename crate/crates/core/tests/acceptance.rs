//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit status
//! if any fails. Integer arguments select criteria (`-- 4 5`); the training
//! experiment behind criteria 6–9 takes about 20 minutes on one core.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use forest_structure::als::compute_gini;
use forest_structure::ensemble::{aggregate, fuse_values, GaussianPrediction, Tiling};
use forest_structure::evaluation::{
    baseline_per_pixel, calibration_curve, compute_metrics, diagnose, split_samples, training_means, Diagnostics,
    Samples, CALIBRATION_BINS, CALIBRATION_TRIM,
};
use forest_structure::model::{network_grad_check, Ablation, ModelConfig, ModelParameters};
use forest_structure::synthetic::{generate_dataset, generate_truth, SceneConfig};
use forest_structure::tensor::gradcheck::{operation_suite, GradCheckOptions};
use forest_structure::training::{gaussian_nll_loss, train, PlateauScheduler, TrainConfig};
use forest_structure::{Dataset, Split, SplitSpec, Tensor, Variable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let opts = GradCheckOptions {
        seed: 1,
        ..GradCheckOptions::default()
    };
    let ops = operation_suite(1, &opts).expect("operation suite");
    let worst_op = ops.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = ops
        .iter()
        .filter(|(_, r)| !r.passes(1e-4))
        .map(|(n, _)| n.as_str())
        .collect();
    // every coordinate of every parameter of the desk network
    let net = network_grad_check(&ModelConfig::desk(), 1, 2, 5, &opts).expect("network check");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failing.is_empty() && net.passes(1e-4) && secs < 120.0,
        format!(
            "{} operations max rel {worst_op:.2e}, failing {failing:?}; network ({} tensors) max rel {:.2e}; {secs:.1}s",
            ops.len(),
            net.entries.len(),
            net.max_rel_error
        ),
    )
}

fn als_oracle() -> Outcome {
    let check = common::random_cloud_check(2024, 1000);
    let gini = compute_gini(&[2.0, 4.0]);
    outcome(
        check.mask_errors == 0 && check.worst_rel <= 1e-9 && gini == Some(1.0 / 6.0),
        format!(
            "{} clouds, {} cells, worst rel {:.1e}, mask errors {}; Gini{{2,4}} = {:?}",
            check.clouds, check.cells, check.worst_rel, check.mask_errors, gini
        ),
    )
}

fn point_round_trip() -> Outcome {
    let (truth, _) = generate_truth(&SceneConfig::default(), 17).expect("truth");
    let (within, err) = common::round_trip(&truth, 5.0, 1);
    outcome(
        within.iter().all(|&f| f >= 0.95),
        format!("fraction within 10% per variable {within:.3?}, mean rel error {err:.4}"),
    )
}

fn point(mean: f64, var: f64) -> GaussianPrediction {
    GaussianPrediction::new(Tensor::new(vec![1], vec![mean]).unwrap(), Tensor::new(vec![1], vec![var]).unwrap()).unwrap()
}

fn ensemble_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut misses = Vec::new();
    let mut worst = 0f64;
    for f in 0..100 {
        let m = rng.random_range(1..=6);
        let comps: Vec<(f64, f64)> = (0..m)
            .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.05..4.0)))
            .collect();
        let e = aggregate(comps.iter().map(|&(mu, v)| point(mu, v)).collect()).unwrap();
        let (mean, se_mean, var, se_var) = common::monte_carlo(&comps, 1_000_000, &mut rng);
        let z_mean = (e.mean.data()[0] - mean).abs() / se_mean;
        let z_var = (e.variance.data()[0] - var).abs() / se_var;
        worst = worst.max(z_mean).max(z_var);
        if z_mean > 3.0 || z_var > 3.0 {
            misses.push(f);
        }
    }
    let fixture = aggregate(vec![point(1.0, 1.0), point(3.0, 1.0)]).unwrap();
    let (mu, var) = (fixture.mean.data()[0], fixture.variance.data()[0]);
    outcome(
        misses.is_empty() && mu == 2.0 && var == 2.0,
        format!("100 fixtures x 1e6 draws, largest deviation {worst:.2} SE, outside 3 SE {misses:?}; {{1,3}}/{{1,1}} -> ({mu}, {var})"),
    )
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut fused, mut plain, mut n) = (0.0, 0.0, 0);
    let (mut fused_spread, mut plain_spread, mut n_spread) = (0.0, 0.0, 0);
    let mut analytic_ok = true;
    let mut worst_formula = 0f64;
    for _ in 0..10_000 {
        let t = rng.random_range(2..=5);
        let vars: Vec<f64> = (0..t).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let y: f64 = rng.random_range(-10.0..10.0);
        let est: Vec<f64> = vars
            .iter()
            .map(|&v| y + Normal::new(0.0, v.sqrt()).unwrap().sample(&mut rng))
            .collect();
        let f = fuse_values(&est, &vars).unwrap();
        let by_hand =
            est.iter().zip(&vars).map(|(x, v)| x / v).sum::<f64>() / vars.iter().map(|v| 1.0 / v).sum::<f64>();
        worst_formula = worst_formula.max((f - by_hand).abs() / by_hand.abs().max(1.0));
        let p = est.iter().sum::<f64>() / t as f64;
        let (ef, ep) = ((f - y).powi(2), (p - y).powi(2));
        fused += ef;
        plain += ep;
        n += 1;
        let ratio = vars.iter().copied().fold(0.0, f64::max) / vars.iter().copied().fold(f64::INFINITY, f64::min);
        // expected errors: 1/Σ(1/σ²) against Σσ²/T²
        let exp_fused = 1.0 / vars.iter().map(|v| 1.0 / v).sum::<f64>();
        let exp_plain = vars.iter().sum::<f64>() / (t * t) as f64;
        if ratio >= 4.0 {
            fused_spread += ef;
            plain_spread += ep;
            n_spread += 1;
            analytic_ok &= exp_fused < exp_plain;
        } else {
            analytic_ok &= exp_fused <= exp_plain * (1.0 + 1e-12);
        }
    }
    let (mf, mp) = (fused / n as f64, plain / n as f64);
    let (sf, sp) = (fused_spread / n_spread as f64, plain_spread / n_spread as f64);
    outcome(
        mf <= mp && sf < sp && analytic_ok && worst_formula < 1e-12,
        format!("1e4 trials: MSE {mf:.4} vs {mp:.4}; {n_spread} trials with >=4x spread: {sf:.4} vs {sp:.4}"),
    )
}

fn units() -> Outcome {
    let mut s = PlateauScheduler::new(1.0, 0.1, 15);
    s.update(1.0);
    let mut drops = Vec::new();
    for epoch in 1..=30 {
        if s.update(1.0) {
            drops.push(epoch);
        }
    }
    let shape = [1, 5, 1, 1];
    let nll = gaussian_nll_loss(
        &Tensor::<f64>::full(&shape, 3.0),
        &Tensor::full(&shape, 4f64.ln()),
        &Tensor::full(&shape, 1.0),
        &[true],
    )
    .unwrap();
    let err = (nll - (4f64.ln() + 1.0)).abs();
    outcome(
        drops == [15, 30] && (s.lr - 0.01).abs() < 1e-15 && err <= 1e-12,
        format!("lr drops after stagnant epochs {drops:?}; NLL(s=ln 4, d=2) off by {err:.1e}"),
    )
}

/// The shared training experiment behind criteria 6–9.
struct Experiment {
    dataset: Dataset,
    norm: [f64; 5],
    members: Vec<ModelParameters<f32>>,
    train_seconds: f64,
    samples: Samples,
    diag: Diagnostics,
}

fn member_config(k: usize, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        member: k,
        ablation,
        ..TrainConfig::default()
    }
}

fn run_experiment() -> Experiment {
    let (_, dataset) = generate_dataset(&SceneConfig::default(), 1, 4, SplitSpec::default()).expect("dataset");
    let norm = training_means(&dataset).unwrap();
    let t = Instant::now();
    let members: Vec<ModelParameters<f32>> = (0..3)
        .map(|k| {
            let out = train(&ModelConfig::desk(), &member_config(k, Ablation::S2S1), &dataset).expect("training");
            println!("  member {k}: best epoch {}, {:.0}s elapsed", out.best_epoch, t.elapsed().as_secs_f64());
            out.params
        })
        .collect();
    let train_seconds = t.elapsed().as_secs_f64();
    let samples = split_samples(&members, &dataset, Split::Test, &Tiling::default()).unwrap();
    let diag = diagnose(&samples, &norm, "test").unwrap();
    println!("{}", diag.metrics);
    Experiment {
        dataset,
        norm,
        members,
        train_seconds,
        samples,
        diag,
    }
}

fn learning(e: &Experiment) -> Outcome {
    let m = &e.diag.metrics.variables;
    let mae: Vec<f64> = m.iter().map(|v| v.mae_pct).collect();
    let mbe: Vec<f64> = m.iter().map(|v| v.mbe_pct).collect();
    outcome(
        mae.iter().all(|&x| x < 20.0) && mbe.iter().all(|x| x.abs() < 3.0) && e.train_seconds <= 1800.0,
        format!(
            "M={} trained in {:.0}s; test MAE% {mae:.2?}; MBE% {mbe:.2?}",
            e.members.len(),
            e.train_seconds
        ),
    )
}

fn calibration(e: &Experiment) -> Outcome {
    let ens: Vec<f64> = e.diag.calibration.iter().map(|c| c.mean_relative_gap()).collect();
    let members: Vec<f64> = (0..5)
        .map(|v| {
            let k = e.samples.member_means.len();
            (0..k)
                .map(|m| {
                    calibration_curve(
                        &e.samples.member_means[m][v],
                        &e.samples.member_variances[m][v],
                        &e.samples.refs[v],
                        CALIBRATION_BINS,
                        CALIBRATION_TRIM,
                    )
                    .unwrap()
                    .mean_relative_gap()
                })
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let (mu, var, y) = common::calibrated(100_000, 11);
    let oracle = calibration_curve(&mu, &var, &y, 20, 0.01).unwrap().mean_relative_gap();
    let pass = ens.iter().all(|&g| g < 0.25) && ens.iter().zip(&members).all(|(a, b)| a < b) && oracle < 0.1;
    outcome(
        pass,
        format!("ensemble gaps {ens:.3?}; member mean {members:.3?}; calibrated oracle {oracle:.4}"),
    )
}

fn retention(e: &Experiment) -> Outcome {
    let rho = &e.diag.retention_spearman;
    outcome(
        rho.iter().all(|&r| r >= 0.9),
        format!("Spearman(p, MAE%) per variable {rho:.3?}"),
    )
}

fn p95_mae(samples: &Samples, member: usize, norm: &[f64; 5]) -> f64 {
    let r = compute_metrics(
        &samples.member_means[member],
        &samples.refs,
        &vec![true; samples.len()],
        norm,
        "member",
    )
    .unwrap();
    r.get(Variable::P95).unwrap().mae
}

fn ablation(e: &Experiment) -> Outcome {
    let both = p95_mae(&e.samples, 0, &e.norm);
    let single = |ab: Ablation| {
        let out = train(&ModelConfig::desk(), &member_config(0, ab), &e.dataset).expect("training");
        let s = split_samples(&[out.params], &e.dataset, Split::Test, &Tiling::default()).unwrap();
        p95_mae(&s, 0, &e.norm)
    };
    let optical = single(Ablation::S2);
    let sar = single(Ablation::S1);
    outcome(
        both <= optical && optical <= sar,
        format!("P95 test MAE, one member each: S2+S1 {both:.3} m, S2 {optical:.3} m, S1 {sar:.3} m"),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |c: usize| selected.is_empty() || selected.contains(&c);
    let mut failed = Vec::new();
    let mut report = |c: usize, title: &str, o: Outcome| {
        println!("criterion {c:>2}: {}  {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(c);
        }
    };

    let quick: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "gradient verification", gradients),
        (2, "ALS oracle equivalence", als_oracle),
        (3, "point-cloud round trip", point_round_trip),
        (4, "ensemble moments", ensemble_math),
        (5, "inverse-variance fusion", fusion),
    ];
    for (c, title, f) in quick {
        if wanted(c) {
            report(c, title, f());
        }
    }
    if (6..=9).any(wanted) {
        println!("training the 3-member ensemble (4 scenes of 90x90, 100 epochs x 50 batches)");
        let e = run_experiment();
        if let Ok(ridge) = baseline_per_pixel(&e.dataset, Split::Test, true, true, 1e-3) {
            let cnn: Vec<f64> = e.diag.metrics.variables.iter().map(|v| v.mae_pct).collect();
            let base: Vec<f64> = ridge.variables.iter().map(|v| v.mae_pct).collect();
            println!("  per-pixel ridge baseline MAE% {base:.2?} vs ensemble {cnn:.2?}");
        }
        let staged: [(usize, &str, fn(&Experiment) -> Outcome); 4] = [
            (6, "end-to-end learning", learning),
            (7, "calibration", calibration),
            (8, "retention", retention),
            (9, "ablation ordering", ablation),
        ];
        for (c, title, f) in staged {
            if wanted(c) {
                report(c, title, f(&e));
            }
        }
    }
    if wanted(10) {
        report(10, "scheduler and loss units", units());
    }

    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
