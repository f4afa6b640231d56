//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use forest_structure::als::{rasterize_variables, GridSpec, PointCloud, StructureRaster, NODATA};
use forest_structure::synthetic::synthesize_scene_cloud;
use forest_structure::Variable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Per-cell variables straight from the definitions.
pub struct Oracle {
    pub p95: f64,
    pub meanh: f64,
    pub dens: f64,
    pub gini: f64,
    pub cover: f64,
}

/// Brute force over the returns of one 10 m cell with south-west corner
/// `(x_min, y_min)`; `None` without vegetation returns.
pub fn oracle(returns: &[(f64, f64, f64)], x_min: f64, y_min: f64) -> Option<Oracle> {
    let veg: Vec<&(f64, f64, f64)> = returns.iter().filter(|p| p.2 > 1.3).collect();
    if veg.is_empty() {
        return None;
    }
    let n = veg.len();
    let mut dz: Vec<f64> = veg.iter().map(|p| p.2).collect();
    let mean = dz.iter().sum::<f64>() / n as f64;
    let mut pairs = 0.0;
    for a in &dz {
        for b in &dz {
            pairs += (a - b).abs();
        }
    }
    let gini = pairs / (2.0 * (n * n) as f64 * mean);
    // order statistics around position 0.95·(n − 1), found by selection
    let h = 0.95 * (n - 1) as f64;
    let lo = h.floor() as usize;
    let (_, &mut x_lo, _) = dz.select_nth_unstable_by(lo, f64::total_cmp);
    let x_hi = if lo + 1 < n {
        *dz.select_nth_unstable_by(lo + 1, f64::total_cmp).1
    } else {
        x_lo
    };
    let p95 = x_lo + (h - lo as f64) * (x_hi - x_lo);
    let occupied: HashSet<(i64, i64)> = veg
        .iter()
        .map(|p| ((p.0 - x_min).floor() as i64, (p.1 - y_min).floor() as i64))
        .collect();
    Some(Oracle {
        p95,
        meanh: mean,
        dens: n as f64 / returns.len() as f64,
        gini,
        cover: occupied.len() as f64 / 100.0,
    })
}

pub fn random_dz(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..10) {
        0..=2 => rng.random_range(0.0..1.3),
        3 => 1.3,
        4 => (rng.random_range(2..30) as f64) * 0.5,
        _ => rng.random_range(1.3..40.0),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub struct CloudCheck {
    pub clouds: usize,
    /// Forested cells compared against the oracle.
    pub cells: usize,
    pub worst_rel: f64,
    /// Cells whose forested flag or no-data fill disagreed.
    pub mask_errors: usize,
}

/// Rasterize `clouds` random clouds of 1 to 10⁴ returns on a 3×3 grid of
/// 10 m cells and compare every cell with [`oracle`].
pub fn random_cloud_check(seed: u64, clouds: usize) -> CloudCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // north-west corner at (1000, 2030)
    let grid = GridSpec::new(1000.0, 2030.0, 10.0, 3, 3).unwrap();
    let mut out = CloudCheck {
        clouds,
        cells: 0,
        worst_rel: 0.0,
        mask_errors: 0,
    };
    for _ in 0..clouds {
        let n = (10f64.powf(rng.random_range(0.0..4.0)) as usize).clamp(1, 10_000);
        let pts: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                // some points land exactly on cell and sub-cell edges
                let x = if rng.random_bool(0.05) {
                    1000.0 + rng.random_range(0..30) as f64
                } else {
                    rng.random_range(1000.0..1030.0)
                };
                let y = rng.random_range(2000.0..2030.0);
                (x, y, random_dz(&mut rng))
            })
            .collect();
        let cloud = PointCloud::from_heights(pts.iter().copied()).unwrap();
        let raster = rasterize_variables(&cloud, &grid, None).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                let x_min = 1000.0 + 10.0 * col as f64;
                let y_min = 2030.0 - 10.0 * (row + 1) as f64;
                let here: Vec<(f64, f64, f64)> = pts
                    .iter()
                    .copied()
                    .filter(|p| p.0 >= x_min && p.0 < x_min + 10.0 && p.1 >= y_min && p.1 < y_min + 10.0)
                    .collect();
                let cell = row * 3 + col;
                match oracle(&here, x_min, y_min) {
                    None => {
                        if raster.forested[cell] || raster.bands.iter().any(|b| b[cell] != NODATA) {
                            out.mask_errors += 1;
                        }
                    }
                    Some(o) => {
                        if !raster.forested[cell] {
                            out.mask_errors += 1;
                            continue;
                        }
                        out.cells += 1;
                        let got = |v: Variable| raster.value(v, row, col);
                        for (v, want) in [
                            (Variable::P95, o.p95),
                            (Variable::MeanH, o.meanh),
                            (Variable::Dens, o.dens),
                            (Variable::Gini, o.gini),
                            (Variable::Cover, o.cover),
                        ] {
                            out.worst_rel = out.worst_rel.max(rel(got(v), want));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per variable, the fraction of forested cells recovered within 10%
/// relative after synthesizing a cloud and rasterizing it; plus the mean
/// relative error over all (cell, variable) pairs.
pub fn round_trip(t: &StructureRaster, density: f64, seed: u64) -> (Vec<f64>, f64) {
    let cloud = synthesize_scene_cloud(t, density, seed).unwrap();
    let r = rasterize_variables(&cloud, &t.grid, None).unwrap();
    assert_eq!(r.forested, t.forested);
    let cells: Vec<usize> = (0..t.grid.len()).filter(|&i| t.forested[i]).collect();
    let mut within = vec![0.0; 5];
    let mut err = 0.0;
    for &i in &cells {
        for v in 0..5 {
            let rel = (r.bands[v][i] - t.bands[v][i]).abs() / t.bands[v][i];
            err += rel;
            if rel <= 0.1 {
                within[v] += 1.0;
            }
        }
    }
    let n = cells.len() as f64;
    (within.iter().map(|w| w / n).collect(), err / (5.0 * n))
}

/// Mean and variance of draws from the equal-weight Gaussian mixture, with
/// their standard errors.
pub fn monte_carlo(components: &[(f64, f64)], n: usize, rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let normals: Vec<Normal<f64>> = components.iter().map(|&(m, v)| Normal::new(m, v.sqrt()).unwrap()).collect();
    let draws: Vec<f64> = (0..n)
        .map(|_| normals[rng.random_range(0..normals.len())].sample(rng))
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let m2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
    (mean, (m2 / n as f64).sqrt(), m2, ((m4 - m2 * m2) / n as f64).sqrt())
}

/// Calibrated generator: y ~ N(μ, σ²) with σ² spread over two decades.
pub fn calibrated(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let m: f64 = g.random_range(0.0..20.0);
        let v = 10f64.powf(g.random_range(-1.0..1.0));
        mu.push(m);
        var.push(v);
        y.push(m + Normal::new(0.0, v.sqrt()).unwrap().sample(&mut g));
    }
    (mu, var, y)
}
