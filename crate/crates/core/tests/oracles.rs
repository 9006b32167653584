mod common;

use mg_core::fields::{fields_one_vs_rest, Split};
use mg_core::qp::{solve_projection_qp, ProjectionProblem};
use mg_core::separability::{is_separable, max_margin, Separator};
use mg_core::sim::{separable_fraction, simulation_capacity};
use mg_core::svm::{fit_linear_svm, primal_objective};
use mg_core::SimConfig;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Projection by enumerating every active set: for each subset, solve the
/// equality-constrained problem and keep the candidate that satisfies all KKT
/// conditions.
fn projection_by_enumeration(t: &DVector<f64>, s: &DMatrix<f64>, kappa: f64) -> DVector<f64> {
    let m = s.ncols();
    let mut found: Option<DVector<f64>> = None;
    for mask in 0u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let mut v = t.clone();
        if !idx.is_empty() {
            let sa = s.select_columns(idx.iter());
            let g = sa.tr_mul(&sa);
            let rhs = (sa.tr_mul(t)).map(|x| kappa - x);
            let Some(lambda) = g.lu().solve(&rhs) else { continue };
            if lambda.iter().any(|&l| l < -1e-12) {
                continue;
            }
            v += sa * lambda;
        }
        let feasible = s.tr_mul(&v).iter().all(|&x| x >= kappa - 1e-10);
        if feasible {
            let better = match &found {
                None => true,
                Some(best) => (&v - t).norm() < (best - t).norm() - 1e-12,
            };
            if better {
                found = Some(v);
            }
        }
    }
    found.expect("some active set is optimal")
}

#[test]
fn projection_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        // positive last coordinate, as for manifold points in their own frame
        let mut s = common::gaussian(4, 5, &mut rng);
        for j in 0..5 {
            s[(3, j)] = 1.0 + 0.3 * s[(3, j)].abs();
        }
        let t = common::gaussian(4, 1, &mut rng).column(0).into_owned();
        let kappa = [0.0, 1e-8, 0.3][case % 3];
        let expected = projection_by_enumeration(&t, &s, kappa);
        let sol = solve_projection_qp(&t, &s, kappa).unwrap();
        assert!((&sol.v_star - &expected).norm() < 1e-9, "case {case}");
        assert!((sol.slack_norm - (&expected - &t).norm_squared()).abs() < 1e-9);
        let problem = ProjectionProblem::new(s.clone(), kappa).unwrap();
        assert!(problem.kkt_residual(&sol) < 1e-9);
    }
}

/// Labelling of `n` points given by the bits of `code`.
fn labelling(code: u32, n: usize) -> Vec<f64> {
    (0..n).map(|i| if code & (1 << i) != 0 { 1.0 } else { -1.0 }).collect()
}

fn count_separable(x: &DMatrix<f64>, sep: Separator) -> u64 {
    let n = x.ncols();
    (0..(1u32 << n))
        .filter(|&code| is_separable(x, &labelling(code, n), 0.0, sep).unwrap())
        .count() as u64
}

#[test]
fn separable_labellings_follow_cover_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        // homogeneous: 4 points in the plane, 6 points in 3-d
        assert_eq!(count_separable(&common::gaussian(2, 4, &mut rng), Separator::Homogeneous), 8);
        assert_eq!(common::cover_count(4, 2), 8);
        assert_eq!(count_separable(&common::gaussian(3, 6, &mut rng), Separator::Homogeneous), 32);
        assert_eq!(common::cover_count(6, 3), 32);
        // with an offset, points in the plane behave like points in 3-d
        assert_eq!(count_separable(&common::gaussian(2, 3, &mut rng), Separator::Affine), 8);
        assert_eq!(count_separable(&common::gaussian(2, 4, &mut rng), Separator::Affine), common::cover_count(4, 3) as u64);
    }
}

#[test]
fn max_margin_of_symmetric_pair() {
    // points at +-e1 scaled by 3, labelled by side: margin 3
    let x = DMatrix::from_column_slice(2, 2, &[3.0, 0.5, -3.0, 0.5]);
    let m = max_margin(&x, &[1.0, -1.0], Separator::Affine).unwrap();
    assert!((m - 3.0).abs() < 1e-9, "{m}");
}

#[test]
fn svm_objective_matches_dual_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..30 {
        let x = common::gaussian(2, 6, &mut rng);
        let y: Vec<f64> = (0..6).map(|i| if (i * 7 + case) % 5 < 2 { 1.0 } else { -1.0 }).collect();
        let c = [0.05, 0.5, 2.0, 20.0][case % 4];
        let fit = fit_linear_svm(&x, &y, c, 0).unwrap();
        let oracle = common::brute_force_svm_dual(&x, &y, c);
        assert!((fit.primal_objective - oracle).abs() < 1e-5, "case {case}: {} vs {oracle}", fit.primal_objective);
        assert!(fit.relative_gap() <= 1e-4);
        let recomputed = primal_objective(&x, &y, &fit.weights, fit.bias, c);
        assert!((recomputed - fit.primal_objective).abs() < 1e-12);
    }
}

#[test]
fn duplicated_data_with_half_c_gives_same_hyperplane() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = common::gaussian(3, 20, &mut rng);
    let y: Vec<f64> = (0..20).map(|i| if x[(0, i)] + 0.4 * x[(1, i)] > 0.2 { 1.0 } else { -1.0 }).collect();
    let mut x2 = DMatrix::zeros(3, 40);
    x2.columns_mut(0, 20).copy_from(&x);
    x2.columns_mut(20, 20).copy_from(&x);
    let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
    for c in [0.1, 1.0, 5.0] {
        let a = fit_linear_svm(&x, &y, c, 1).unwrap();
        let b = fit_linear_svm(&x2, &y2, c / 2.0, 2).unwrap();
        assert!((&a.weights - &b.weights).amax() < 1e-5, "C = {c}");
        assert!((a.bias - b.bias).abs() < 1e-5, "C = {c}: {} vs {}", a.bias, b.bias);
    }
}

#[test]
fn separable_clusters_have_zero_hinge_loss() {
    let ms = common::blobs(2, 15, 3, 0.2, 4.0, 5);
    let x = DMatrix::from_columns(
        &ms.manifolds()
            .iter()
            .flat_map(|m| m.points.column_iter().map(|c| c.into_owned()))
            .collect::<Vec<_>>(),
    );
    let y: Vec<f64> = (0..30).map(|i| if i < 15 { 1.0 } else { -1.0 }).collect();
    let fit = fit_linear_svm(&x, &y, 10.0, 0).unwrap();
    let out = x.tr_mul(&fit.weights);
    for (i, yi) in y.iter().enumerate() {
        assert!(yi * (out[i] + fit.bias) >= 1.0 - 1e-6);
    }
    assert!(fit.weights.norm() > 0.0);
}

#[test]
fn separable_fraction_grows_with_nested_projections() {
    let ms = common::synthetic(12, 8, 40, 3, 0.6, 0.0, 2);
    let cfg = SimConfig {
        seed: 77,
        ..SimConfig::default()
    };
    let fractions: Vec<f64> = (1..=40).map(|n| separable_fraction(&ms, n, &cfg).unwrap()).collect();
    assert!(fractions.windows(2).all(|w| w[1] >= w[0]), "{fractions:?}");
    assert_eq!(fractions[0], 0.0);
    assert_eq!(*fractions.last().unwrap(), 1.0);
}

#[test]
fn simulation_result_is_deterministic() {
    let ms = common::synthetic(10, 10, 60, 2, 0.5, 0.0, 4);
    let cfg = SimConfig {
        seed: 5,
        ..SimConfig::default()
    };
    assert_eq!(simulation_capacity(&ms, &cfg).unwrap(), simulation_capacity(&ms, &cfg).unwrap());
}

#[test]
fn more_training_data_does_not_lower_tpr() {
    let (mut big, mut small) = (0.0, 0.0);
    for seed in 0..20 {
        let ms = common::blobs(4, 30, 10, 1.6, 2.5, 300 + seed);
        big += fields_one_vs_rest(&ms, Split::EIGHTY_TWENTY, 1.0, seed).unwrap().tpr;
        small += fields_one_vs_rest(&ms, Split::TEN_NINETY, 1.0, seed).unwrap().tpr;
    }
    assert!(big >= small, "80/20 mean tpr {} < 10/90 mean tpr {}", big / 20.0, small / 20.0);
}
