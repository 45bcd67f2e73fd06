use super::*;
use crate::data::encode_design;
use crate::fixtures::{self, Row, TwoGender};
use crate::model::RandomTerm;

fn intercept_only() -> ModelSpec {
    ModelSpec::new("ri", &[], vec![RandomTerm::Intercept])
}

fn anova(ds: &crate::data::Dataset) -> (f64, f64) {
    // Closed-form balanced one-way estimators, straight from the records.
    let d = ds.n_areas();
    let mut groups = vec![Vec::new(); d];
    for r in ds.records() {
        groups[r.area].push(r.log_wage);
    }
    let n = groups[0].len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / d as f64;
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|y| (y - m).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let msw = ssw / (d as f64 * (n - 1.0));
    let msb = ssb / (d as f64 - 1.0);
    if msb >= msw {
        ((msb - msw) / n, msw)
    } else {
        (0.0, (ssw + ssb) / (d as f64 * n - 1.0))
    }
}

#[test]
fn balanced_one_way_matches_anova() {
    for seed in 0..10 {
        let ds = fixtures::one_way(8, 10, 2.0, 0.8, 1.0, seed);
        let design = encode_design(&ds, &intercept_only(), Gender::Men).unwrap();
        let fit = fit_reml(&design).unwrap();
        let (su, se) = anova(&ds);
        assert!(fit.converged, "seed {seed}");
        assert!((fit.vc.sigma_u[(0, 0)] - su).abs() < 1e-6, "seed {seed}: {} vs {su}", fit.vc.sigma_u[(0, 0)]);
        assert!((fit.vc.sigma_e2 - se).abs() < 1e-6, "seed {seed}: {} vs {se}", fit.vc.sigma_e2);
    }
}

#[test]
fn boundary_solution_reports_exact_zero() {
    // No area effect at all: MSB < MSW for some seed, REML sits at zero.
    let mut hit = false;
    for seed in 0..40 {
        let ds = fixtures::one_way(8, 10, 0.0, 0.0, 1.0, seed);
        let (su, se) = anova(&ds);
        if su > 0.0 {
            continue;
        }
        hit = true;
        let design = encode_design(&ds, &intercept_only(), Gender::Men).unwrap();
        let fit = fit_reml(&design).unwrap();
        assert_eq!(fit.vc.sigma_u[(0, 0)], 0.0);
        assert!((fit.vc.sigma_e2 - se).abs() < 1e-9);
        assert!(fit.u_hat.iter().all(|&u| u == 0.0));
    }
    assert!(hit);
}

#[test]
fn grid_search_never_beats_the_optimum() {
    let (tu, te) = (0.5f64, 1.0f64);
    let ds = fixtures::one_way(4, 5, 1.0, tu.sqrt(), te.sqrt(), 11);
    let design = encode_design(&ds, &intercept_only(), Gender::Men).unwrap();
    let problem = RemlProblem::new(&design).unwrap();
    let fit = problem.fit().unwrap();
    let best = problem
        .restricted_loglik(&[fit.vc.sigma_u[(0, 0)]], fit.vc.sigma_e2)
        .unwrap();
    assert!((best - fit.loglik_restricted).abs() < 1e-9);
    for i in 0..100 {
        for j in 1..=100 {
            let su = 4.0 * tu * i as f64 / 99.0;
            let se = 4.0 * te * j as f64 / 100.0;
            let ll = problem.restricted_loglik(&[su], se).unwrap();
            assert!(ll <= best + 1e-9, "grid point ({su}, {se}) beats optimum");
        }
    }
}

#[test]
fn exact_data_gives_zero_variances() {
    let rows: Vec<Row> = (0..12)
        .map(|i| {
            let x1 = i as f64 * 0.5;
            let x2 = (i % 3) as f64;
            Row::new(1.0 + 0.2 * x1 - 0.1 * x2, Gender::Men, &fixtures::area_code(i % 3), x1, x2)
        })
        .collect();
    let ds = fixtures::dataset(&rows);
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![RandomTerm::Intercept]);
    let design = encode_design(&ds, &spec, Gender::Men).unwrap();
    let fit = fit_reml(&design).unwrap();
    assert!(fit.vc.sigma_e2 < 1e-12);
    assert!(fit.vc.sigma_u[(0, 0)] < 1e-12);
    for (b, t) in fit.beta.iter().zip([1.0, 0.2, -0.1]) {
        assert!((b - t).abs() < 1e-8);
    }
}

fn regression_design(spec: &ModelSpec, seed: u64) -> DesignMatrices {
    let ds = fixtures::two_gender(&TwoGender::default(), seed);
    encode_design(&ds, spec, Gender::Men).unwrap()
}

fn slope_spec() -> ModelSpec {
    ModelSpec::new(
        "m",
        &["x1", "x2"],
        vec![RandomTerm::Intercept, RandomTerm::Slope("x1".into())],
    )
}

#[test]
fn gls_normal_equations_hold() {
    let design = regression_design(&slope_spec(), 3);
    let fit = fit_reml(&design).unwrap();
    let resid = &design.y - &design.x * &fit.beta;
    let mut score = DVector::zeros(design.p());
    for b in &design.blocks {
        let inv = fit.block_inverse(&design, b).unwrap();
        let vr = inv.apply(&design, b, &resid.as_slice()[b.range()]);
        score += design.x.rows(b.start, b.len).tr_mul(&vr);
    }
    assert!(score.amax() < 1e-8, "{score}");
}

#[test]
fn woodbury_block_inverse_matches_dense() {
    let design = regression_design(&slope_spec(), 4);
    let fit = fit_reml(&design).unwrap();
    let b = design.blocks[2];
    let v = fit.covariance_block(&design, &b);
    assert_eq!(v, v.transpose());
    let dense = v.clone().cholesky().unwrap();
    let probe = DVector::from_fn(b.len, |i, _| (i as f64 * 0.37).sin());
    let inv = fit.block_inverse(&design, &b).unwrap();
    let fast = inv.apply(&design, &b, probe.as_slice());
    assert!((fast - dense.solve(&probe)).amax() < 1e-10);
    assert!((inv.ln_det - ln_det_chol(&dense)).abs() < 1e-10);
}

#[test]
fn blup_is_evaluated_at_reml_components() {
    let design = regression_design(&slope_spec(), 5);
    let fit = fit_reml(&design).unwrap();
    for b in &design.blocks {
        let v = fit.covariance_block(&design, b);
        let r = (&design.y - &design.x * &fit.beta).rows(b.start, b.len).into_owned();
        let zs = design.z.rows(b.start, b.len);
        let u = &fit.vc.sigma_u * zs.transpose() * v.cholesky().unwrap().solve(&r);
        assert!((u - fit.random_effect(b.area)).amax() < 1e-10);
    }
}

#[test]
fn shifting_response_moves_only_the_intercept() {
    let design = regression_design(&slope_spec(), 6);
    let fit = fit_reml(&design).unwrap();
    let shifted = design.with_response(design.y.add_scalar(1.5));
    let fit2 = fit_reml(&shifted).unwrap();
    assert!((fit2.beta[0] - fit.beta[0] - 1.5).abs() < 1e-8);
    assert!((fit2.beta.rows(1, 2) - fit.beta.rows(1, 2)).amax() < 1e-8);
    assert!((fit2.vc.sigma_e2 - fit.vc.sigma_e2).abs() < 1e-8);
    assert!((&fit2.vc.sigma_u - &fit.vc.sigma_u).amax() < 1e-8);
}

#[test]
fn doubling_weights_doubles_residual_variance() {
    let design = regression_design(&slope_spec(), 7);
    let fit = fit_reml(&design).unwrap();
    let mut doubled = design.clone();
    doubled.w *= 2.0;
    let fit2 = fit_reml(&doubled).unwrap();
    assert!((fit2.vc.sigma_e2 - 2.0 * fit.vc.sigma_e2).abs() < 1e-8);
    assert!((&fit2.beta - &fit.beta).amax() < 1e-7);
    assert!((&fit2.u_hat - &fit.u_hat).amax() < 1e-7);
    assert!((&fit2.vc.sigma_u - &fit.vc.sigma_u).amax() < 1e-8);
}

#[test]
fn shrinkage_bound_for_random_intercept() {
    let spec = ModelSpec::new("m", &["x1"], vec![RandomTerm::Intercept]);
    let design = regression_design(&spec, 8);
    let fit = fit_reml(&design).unwrap();
    let su = fit.vc.sigma_u[(0, 0)];
    for b in &design.blocks {
        let r = &design.y - &design.x * &fit.beta;
        let mean_r: f64 = r.rows(b.start, b.len).mean();
        let n = b.len as f64;
        let factor = n * su / (n * su + fit.vc.sigma_e2);
        assert!(fit.u_hat[(b.area, 0)].abs() <= mean_r.abs() * factor + 1e-12);
    }
}

#[test]
fn rank_deficiency_names_columns() {
    let rows: Vec<Row> = (0..10)
        .map(|i| Row::new(i as f64, Gender::Men, "1", i as f64, 2.0 * i as f64))
        .collect();
    let ds = fixtures::dataset(&rows);
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![]);
    let design = encode_design(&ds, &spec, Gender::Men).unwrap();
    match fit_reml(&design) {
        Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["x2".to_string()]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn too_few_rows() {
    let rows = vec![Row::new(1.0, Gender::Men, "1", 0.0, 0.0)];
    let ds = fixtures::dataset(&rows);
    let design = encode_design(&ds, &ModelSpec::new("m", &["x1"], vec![]), Gender::Men).unwrap();
    assert!(matches!(fit_reml(&design), Err(Error::TooFewObservations { .. })));
}

fn hand_fit(design: &DesignMatrices) -> FittedLmm {
    let mut fit = fit_reml(design).unwrap();
    fit.beta = DVector::from_vec(vec![1.0, 0.5, -0.25]);
    fit.u_hat.fill(0.0);
    fit.u_hat[(0, 0)] = 0.2;
    fit.u_hat[(1, 0)] = -0.1;
    fit
}

#[test]
fn conditional_mean_arithmetic() {
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![RandomTerm::Intercept]);
    let design = regression_design(&spec, 9);
    let fit = hand_fit(&design);
    let xbar = DVector::from_vec(vec![1.0, 2.0, 4.0]);
    let one = DVector::from_vec(vec![1.0]);
    let zero = DVector::from_vec(vec![0.0]);
    // 1 + 0.5*2 - 0.25*4 = 1
    assert_eq!(fit.conditional_mean(&xbar, &zero, "1").unwrap(), 1.0);
    assert!((fit.conditional_mean(&xbar, &one, "1").unwrap() - 1.2).abs() < 1e-15);
    assert!((fit.conditional_mean(&xbar, &one, "2").unwrap() - 0.9).abs() < 1e-15);
    assert!(matches!(fit.conditional_mean(&xbar, &one, "99"), Err(Error::UnknownArea(_))));
    assert!(fit.conditional_mean(&one, &one, "1").is_err());
}

#[test]
fn unit_predictions_and_unseen_areas() {
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![RandomTerm::Intercept]);
    let design = regression_design(&spec, 10);
    let fit = hand_fit(&design);
    let pred = fit.predict_units(&design).unwrap();
    let i = design.blocks[0].start;
    let expected = 1.0 + 0.5 * design.x[(i, 1)] - 0.25 * design.x[(i, 2)] + 0.2;
    assert!((pred[i] - expected).abs() < 1e-14);

    let mut other = design.clone();
    other.areas = other.areas.iter().map(|a| format!("new-{a}")).collect();
    let pred = fit.predict_units(&other).unwrap();
    let fixed_only = &design.x * &fit.beta;
    assert!((pred - fixed_only).amax() < 1e-15);

    let wrong = encode_design(
        &fixtures::two_gender(&TwoGender::default(), 10),
        &ModelSpec::new("m", &["x1"], vec![RandomTerm::Intercept]),
        Gender::Men,
    )
    .unwrap();
    assert!(fit.predict_units(&wrong).is_err());
}

#[test]
fn simulation_degenerate_and_deterministic() {
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![RandomTerm::Intercept]);
    let design = regression_design(&spec, 12);
    let mut fit = fit_reml(&design).unwrap();
    let a = fit.simulate_response(&design, 5).unwrap();
    assert_eq!(a, fit.simulate_response(&design, 5).unwrap());
    assert_ne!(a, fit.simulate_response(&design, 6).unwrap());
    fit.vc.sigma_e2 = 0.0;
    fit.vc.sigma_u.fill(0.0);
    assert_eq!(fit.simulate_response(&design, 5).unwrap(), &design.x * &fit.beta);
}

#[test]
fn simulated_area_effects_match_sigma_u() {
    let spec = ModelSpec::new("m", &["x1"], vec![RandomTerm::Intercept, RandomTerm::Slope("x2".into())]);
    let design = regression_design(&spec, 13);
    let mut fit = fit_reml(&design).unwrap();
    fit.vc.sigma_e2 = 0.0;
    fit.vc.sigma_u = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.05]));
    let reps = 10_000;
    let d = design.blocks.len();
    let mut sums = vec![[0.0f64; 2]; d];
    let mut sq = vec![[0.0f64; 2]; d];
    for r in 0..reps {
        let y = fit.simulate_response(&design, r as u64).unwrap();
        let resid = &y - &design.x * &fit.beta;
        for (k, b) in design.blocks.iter().enumerate() {
            // Solve the 2x2 system from the first two rows of the block.
            let (i, j) = (b.start, b.start + 1);
            let (z1, z2) = (design.z[(i, 1)], design.z[(j, 1)]);
            let slope = (resid[i] - resid[j]) / (z1 - z2);
            let intercept = resid[i] - slope * z1;
            for (c, v) in [intercept, slope].into_iter().enumerate() {
                sums[k][c] += v;
                sq[k][c] += v * v;
            }
        }
    }
    let n = reps as f64;
    for k in 0..d {
        for (c, truth) in [0.3, 0.05].into_iter().enumerate() {
            let mean = sums[k][c] / n;
            let var = (sq[k][c] - n * mean * mean) / (n - 1.0);
            let se = truth * (2.0 / (n - 1.0)).sqrt();
            assert!((var - truth).abs() < 3.0 * se, "area {k} term {c}: {var} vs {truth}");
        }
    }
}

#[test]
fn summary_serializes_names() {
    let design = regression_design(&slope_spec(), 14);
    let fit = fit_reml(&design).unwrap();
    let json = serde_json::to_value(FitSummary::from(&fit)).unwrap();
    assert_eq!(json["beta"][1]["name"], "x1");
    assert_eq!(json["sigma_u2"][1]["name"], "u:x1");
    assert_eq!(json["random_effects"].as_array().unwrap().len(), 6);
}

#[test]
fn fixed_effect_model_is_weighted_least_squares() {
    let spec = ModelSpec::new("m", &["x1", "x2"], vec![]);
    let design = regression_design(&spec, 15);
    let fit = fit_reml(&design).unwrap();
    let xtx = design.x.tr_mul(&design.x);
    let beta = xtx.cholesky().unwrap().solve(&design.x.tr_mul(&design.y));
    assert!((&fit.beta - beta).amax() < 1e-10);
    let rss = (&design.y - &design.x * &fit.beta).norm_squared();
    assert!((fit.vc.sigma_e2 - rss / (design.n() - design.p()) as f64).abs() < 1e-12);
}
