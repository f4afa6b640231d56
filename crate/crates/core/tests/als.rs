mod common;

use forest_structure::als::{
    compute_gini, compute_meanh, compute_p95, normalize_heights, rasterize_variables, FlatGround, GridSpec,
    PointCloud, Return,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_cloud_check, random_dz};

#[test]
fn variables_match_brute_force_on_random_clouds() {
    let check = random_cloud_check(2024, 1000);
    assert_eq!(check.mask_errors, 0);
    assert!(check.cells > 5000);
    assert!(check.worst_rel <= 1e-9, "{}", check.worst_rel);
}

#[test]
fn gini_of_two_and_four_is_one_sixth() {
    assert_eq!(compute_gini(&[2.0, 4.0]), Some(1.0 / 6.0));
    assert_eq!(compute_gini(&[4.0, 2.0]), Some(1.0 / 6.0));
}

#[test]
fn normalization_then_classification() {
    let cloud = normalize_heights(&[(0.0, 0.0, 10.0), (1.0, 1.0, 9.0)], &FlatGround(8.0)).unwrap();
    let flags: Vec<bool> = cloud.points.iter().map(|p| p.is_vegetation).collect();
    assert_eq!(flags, [true, false]);
    assert_eq!(cloud.points[0].dz, 2.0);
    // exactly at the threshold is not vegetation
    let edge = normalize_heights(&[(2.0, 2.0, 1.3)], &FlatGround(0.0)).unwrap();
    assert!(!edge.points[0].is_vegetation);
}

proptest! {
    #[test]
    fn gini_is_scale_invariant(dz in prop::collection::vec(1.31f64..60.0, 1..200), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = dz.iter().map(|x| x * c).collect();
        let (a, b) = (compute_gini(&dz).unwrap(), compute_gini(&scaled).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        let n = dz.len() as f64;
        prop_assert!(a >= 0.0 && a <= 1.0 - 1.0 / n + 1e-12);
    }

    #[test]
    fn height_statistics_are_translation_equivariant(dz in prop::collection::vec(1.31f64..60.0, 1..200), c in 0.0f64..20.0) {
        let shifted: Vec<f64> = dz.iter().map(|x| x + c).collect();
        prop_assert!((compute_p95(&shifted).unwrap() - compute_p95(&dz).unwrap() - c).abs() < 1e-9);
        prop_assert!((compute_meanh(&shifted).unwrap() - compute_meanh(&dz).unwrap() - c).abs() < 1e-9);
        let max = dz.iter().copied().fold(f64::MIN, f64::max);
        let p95 = compute_p95(&dz).unwrap();
        prop_assert!(p95 <= max);
    }

    #[test]
    fn rasterization_ignores_point_order(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::new(0.0, 20.0, 10.0, 2, 2).unwrap();
        let mut pts: Vec<Return> = (0..300)
            .map(|_| Return::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), random_dz(&mut rng)))
            .collect();
        let a = rasterize_variables(&PointCloud { points: pts.clone() }, &grid, None).unwrap();
        pts.shuffle(&mut rng);
        let b = rasterize_variables(&PointCloud { points: pts }, &grid, None).unwrap();
        for (x, y) in a.bands.iter().zip(&b.bands) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }
        prop_assert_eq!(&a.forested, &b.forested);
        a.validate().unwrap();
    }
}
