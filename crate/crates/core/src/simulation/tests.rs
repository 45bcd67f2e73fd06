use super::*;
use crate::decomposition::GpgEstimate;

const BETA: [f64; 8] = [2.3, 0.01, 0.05, 0.2, -0.1, -0.2, -0.3, -0.4];

fn marginals(experience_mean: f64, higher: f64) -> Marginals {
    Marginals {
        experience_mean,
        education: [0.7 - higher, 0.3, higher],
        occupation_given_education: [[0.2; 5]; 3],
    }
}

fn cell(n: usize, sigma2: f64, beta: [f64; 8], covariates: Marginals) -> GenderCell {
    GenderCell {
        n,
        sigma2,
        beta,
        covariates,
    }
}

fn config(areas: Vec<(GenderCell, GenderCell)>) -> GeneratorConfig {
    GeneratorConfig {
        seed: 11,
        areas: areas
            .into_iter()
            .enumerate()
            .map(|(d, (men, women))| AreaCell {
                code: (d + 1).to_string(),
                sector: format!("S{}", d % 2),
                men,
                women,
            })
            .collect(),
        sampler: Sampler::Marginals,
    }
}

fn unit(ds: &Dataset, r: &crate::data::UnitRecord) -> Unit {
    unit_of(ds, r).unwrap()
}

#[test]
fn vanishing_noise_reproduces_linear_predictor() {
    let cfg = config(vec![(
        cell(200, 1e-24, BETA, marginals(15.0, 0.3)),
        cell(150, 1e-24, BETA, marginals(12.0, 0.4)),
    )]);
    let ds = generate(&cfg, 0).unwrap();
    assert_eq!(ds.len(), 350);
    for r in ds.records() {
        assert!((r.log_wage - unit(&ds, r).linear_predictor(&BETA)).abs() < 1e-5);
    }
}

#[test]
fn generation_is_deterministic_per_replicate() {
    let cfg = GeneratorConfig::desk();
    let a = generate(&cfg, 3).unwrap();
    assert_eq!(a, generate(&cfg, 3).unwrap());
    assert_ne!(a, generate(&cfg, 4).unwrap());
}

#[test]
fn noise_variance_matches_configuration() {
    let cfg = config(vec![(cell(10_000, 0.1, BETA, marginals(15.0, 0.3)), cell(1, 0.1, BETA, marginals(15.0, 0.3)))]);
    let ds = generate(&cfg, 0).unwrap();
    let res: Vec<f64> = ds
        .records()
        .iter()
        .filter(|r| r.gender == Gender::Men)
        .map(|r| r.log_wage - unit(&ds, r).linear_predictor(&BETA))
        .collect();
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    let var = res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = 0.1 * (2.0 / (n - 1.0)).sqrt();
    assert!((var - 0.1).abs() < 3.0 * se, "variance {var}");
}

#[test]
fn generated_data_round_trips_through_csv() {
    let cfg = GeneratorConfig::desk();
    let ds = generate(&cfg, 0).unwrap();
    let mut buf = Vec::new();
    ds.write_csv_to(&mut buf).unwrap();
    let back = crate::data::read_dataset(&buf[..], &cfg.schema()).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.areas(), ds.areas());
    for (a, b) in back.records().iter().zip(ds.records()) {
        assert_eq!(a.covariates.len(), b.covariates.len());
        assert!((a.log_wage - b.log_wage).abs() < 1e-12);
    }
}

#[test]
fn template_sampler_draws_template_rows() {
    let cfg = config(vec![
        (cell(40, 0.1, BETA, marginals(15.0, 0.3)), cell(30, 0.1, BETA, marginals(10.0, 0.5))),
        (cell(40, 0.1, BETA, marginals(20.0, 0.1)), cell(30, 0.1, BETA, marginals(8.0, 0.2))),
    ]);
    let template = generate(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("template.csv");
    template.write_csv(&path).unwrap();

    let mut tcfg = cfg.clone();
    tcfg.sampler = Sampler::Template { path };
    let ds = generate(&tcfg, 5).unwrap();
    assert_eq!(ds.len(), template.len());
    for r in ds.records() {
        let u = unit(&ds, r);
        let found = template.records().iter().any(|t| {
            t.gender == r.gender && t.area == r.area && unit(&template, t) == u
        });
        assert!(found, "unit {u:?} is not a template row of its cell");
    }
}

#[test]
fn validation_lists_every_problem() {
    let mut bad = cell(0, -1.0, BETA, marginals(-2.0, 0.3));
    bad.covariates.education = [0.0; 3];
    let cfg = config(vec![(bad.clone(), bad)]);
    let Err(Error::Config(problems)) = cfg.validate() else {
        panic!("expected config error");
    };
    assert_eq!(problems.len(), 8);
}

#[test]
fn bundled_candidates_cover_the_grid() {
    let set = candidates();
    let labels = estimator_labels(&set, true);
    assert_eq!(labels.len(), 10);
    assert_eq!(labels[0], "OB");
    assert_eq!(labels[9], SELECTED_LABEL);
    assert!(set.baseline().is_fixed_only());
    let ms4 = set.get("MS4").unwrap().without(&["education".into()]);
    assert_eq!(ms4.random, vec![crate::model::RandomTerm::Intercept]);
    assert_eq!(estimator_labels(&set, false), vec!["OB", SELECTED_LABEL]);
}

#[test]
fn truth_requires_a_large_population() {
    assert!(matches!(
        compute_truth(&GeneratorConfig::desk(), 1000, 1),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn symmetric_population_has_no_gap() {
    let m = cell(1, 0.1, BETA, marginals(15.0, 0.3));
    let cfg = config(vec![(m.clone(), m)]);
    let t = compute_truth(&cfg, 100_000, 3).unwrap();
    let r = &t.rows[0];
    assert!(r.gpg.abs() < 4.0 * r.se_gpg, "gpg {} se {}", r.gpg, r.se_gpg);
    // identical coefficients: the unexplained part is exactly zero
    assert_eq!(r.u, 0.0);
    assert!(r.q.abs() < 0.01);
}

#[test]
fn equal_coefficients_leave_nothing_unexplained() {
    let cfg = config(vec![(
        cell(1, 0.1, BETA, marginals(20.0, 0.5)),
        cell(1, 0.1, BETA, marginals(10.0, 0.1)),
    )]);
    let r = compute_truth(&cfg, 100_000, 4).unwrap().rows.remove(0);
    assert!(r.gpg_u.abs() <= 3.0 * r.se_gpg_u);
    assert!(r.gpg > 0.1);
    assert!((r.gpg_q + r.gpg_u - r.gpg).abs() < 1e-10);
    // expected gap in log means: 10 years × 0.01 + 0.4 × 0.2 − 0.0 (secondary equal)
    assert!((r.q - 0.18).abs() < 0.01, "q {}", r.q);
}

#[test]
fn truth_is_additive_and_stable_in_population_size() {
    let cfg = GeneratorConfig::desk();
    let mut one = cfg.clone();
    one.areas.truncate(1);
    let a = compute_truth(&one, 100_000, 5).unwrap();
    let b = compute_truth(&one, 200_000, 6).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.gpg_q + x.gpg_u - x.gpg).abs() < 1e-10);
        assert!((x.delta - x.q - x.u).abs() < 1e-12);
        let close = |p: f64, q: f64, sp: f64, sq: f64| (p - q).abs() < 2.0 * (sp * sp + sq * sq).sqrt();
        assert!(close(x.gpg, y.gpg, x.se_gpg, y.se_gpg));
        assert!(close(x.gpg_q, y.gpg_q, x.se_gpg_q, y.se_gpg_q));
        assert!(close(x.gpg_u, y.gpg_u, x.se_gpg_u, y.se_gpg_u));
    }
}

fn truth_table(values: &[(f64, f64)]) -> TruthTable {
    TruthTable {
        population_size: 100_000,
        rows: values
            .iter()
            .enumerate()
            .map(|(i, &(q, u))| TruthRow {
                area: (i + 1).to_string(),
                ew_m: 10.0,
                ew_w: 8.0,
                delta: 0.2,
                q: 0.0,
                u: 0.0,
                gpg: q + u,
                gpg_q: q,
                gpg_u: u,
                se_gpg: 0.0,
                se_gpg_q: 0.0,
                se_gpg_u: 0.0,
            })
            .collect(),
    }
}

fn estimates(values: &[(f64, f64)], halfwidth: f64) -> Decomposition {
    let estimates = values
        .iter()
        .enumerate()
        .map(|(i, &(q, u))| GpgEstimate {
            area: (i + 1).to_string(),
            n_m: 10,
            n_w: 10,
            gpg: q + u,
            gpg_q: Some(q),
            gpg_u: Some(u),
            ci_q: Some((q - halfwidth, q + halfwidth)),
            ci_u: Some((u - halfwidth, u + halfwidth)),
            bias: 0.0,
            iterations_used: 1,
            unstable: false,
        })
        .collect();
    Decomposition {
        label: "m".into(),
        components: Vec::new(),
        estimates,
        global: None,
        excluded: Vec::new(),
        attempts: 1,
        trace: Vec::new(),
    }
}

const TRUTH: [(f64, f64); 4] = [(0.05, 0.1), (0.02, 0.2), (-0.01, 0.15), (0.0, 0.3)];

#[test]
fn oracle_estimator_scores_perfectly() {
    let t = truth_table(&TRUTH);
    let mut acc = Accumulator::default();
    for _ in 0..3 {
        acc.add_decomposition(&estimates(&TRUTH, 0.0), &t);
    }
    assert_eq!(acc.emse(), (0.0, 0.0));
    assert_eq!(acc.coverage(), (100.0, 100.0));
    assert_eq!(acc.cells(), 12);
}

#[test]
fn constant_offset_gives_squared_offset() {
    let t = truth_table(&TRUTH);
    let shifted: Vec<(f64, f64)> = TRUTH.iter().map(|(q, u)| (q + 0.05, u + 0.05)).collect();
    let mut acc = Accumulator::default();
    acc.add_decomposition(&estimates(&shifted, 0.0), &t);
    let (q, u) = acc.emse();
    assert!((q - 0.0025).abs() < 1e-12 && (u - 0.0025).abs() < 1e-12);
    // zero-width intervals centred off the truth never cover
    assert_eq!(acc.coverage(), (0.0, 0.0));

    let mut wide = Accumulator::default();
    wide.add_decomposition(&estimates(&shifted, 0.06), &t);
    assert_eq!(wide.coverage(), (100.0, 100.0));
}

#[test]
fn emse_ignores_area_order() {
    let est = [(0.04, 0.12), (0.0, 0.25), (0.01, 0.1), (0.03, 0.31)];
    let mut a = Accumulator::default();
    a.add_decomposition(&estimates(&est, 0.01), &truth_table(&TRUTH));
    let perm = [2, 0, 3, 1];
    let mut b = Accumulator::default();
    // relabel areas by permuting both sides consistently
    let t: Vec<_> = perm.iter().map(|&i| TRUTH[i]).collect();
    let e: Vec<_> = perm.iter().map(|&i| est[i]).collect();
    b.add_decomposition(&estimates(&e, 0.01), &truth_table(&t));
    let (qa, ua) = a.emse();
    let (qb, ub) = b.emse();
    assert!((qa - qb).abs() < 1e-15 && (ua - ub).abs() < 1e-15);
    assert_eq!(a.coverage(), b.coverage());
}

#[test]
fn unstable_areas_are_counted_as_missing() {
    let t = truth_table(&TRUTH);
    let mut d = estimates(&TRUTH, 0.0);
    d.estimates[1].gpg_u = None;
    d.estimates[1].gpg_q = None;
    let mut acc = Accumulator::default();
    acc.add_decomposition(&d, &t);
    assert_eq!(acc.missing, 1);
    assert_eq!(acc.cells(), 3);
}

fn small_config() -> GeneratorConfig {
    let mut cfg = GeneratorConfig::desk();
    cfg.areas.truncate(4);
    for a in &mut cfg.areas {
        a.men.n = 60;
        a.women.n = 45;
    }
    cfg
}

#[test]
fn small_experiment_produces_table_shapes() {
    let cfg = small_config();
    let mut opts = ExperimentOptions::new(9);
    opts.replicates = 2;
    opts.iterations = 10;
    opts.reps = 50;
    let res = run_experiment(&cfg, &candidates(), &opts, None).unwrap();
    assert_eq!(res.full.rows.len(), 10);
    assert_eq!(res.dropped.as_ref().unwrap().rows.len(), 10);
    assert_eq!(res.full.selections.values().sum::<usize>(), 2);
    for row in &res.full.rows {
        assert!(row.emse_q.is_finite() && row.emse_u.is_finite(), "{row:?}");
        assert!((0.0..=100.0).contains(&row.coverage_u));
    }
    // XG duplicates the winning candidate's row
    let winner = res.full.selections.keys().next().unwrap();
    if res.full.selections.len() == 1 {
        let xg = res.full.row(SELECTED_LABEL).unwrap();
        let w = res.full.row(winner).unwrap();
        assert_eq!((xg.emse_q, xg.emse_u), (w.emse_q, w.emse_u));
    }

    let mut emse = Vec::new();
    res.write_emse(&mut emse).unwrap();
    let text = String::from_utf8(emse).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert_eq!(text.lines().next().unwrap(), "estimator,gpg_q,gpg_u,gpg_q_without,gpg_u_without");

    let again = run_experiment(&cfg, &candidates(), &opts, None).unwrap();
    assert_eq!(res, again);
}
