//! xGAIC model selection: quasi-loglikelihood plus a bootstrap estimate of
//! the generalized degrees of freedom.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_design, Dataset, DesignMatrices, Gender};
use crate::error::{Error, Result};
use crate::lmm::{fit_reml, FittedLmm, RemlProblem};
use crate::model::ModelSpec;
use crate::seed::{self, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const DEFAULT_REPS: usize = 300;

/// `−½·D·log 2π − ½ log|V| − ½ (Y − μ̂)'V⁻¹(Y − μ̂)`, with `D` the number of
/// areas in the design and `μ̂` the conditional means at `(β̂, û)`.
pub fn quasi_loglikelihood(fit: &FittedLmm, design: &DesignMatrices) -> Result<f64> {
    let mu = fit.predict_units(design)?;
    let resid = &design.y - mu;
    let mut ln_det = 0.0;
    let mut quad = 0.0;
    for b in &design.blocks {
        let inv = fit.block_inverse(design, b)?;
        let r = &resid.as_slice()[b.range()];
        ln_det += inv.ln_det;
        quad += inv.apply(design, b, r).dot(&DVector::from_column_slice(r));
    }
    Ok(-0.5 * design.blocks.len() as f64 * LN_2PI - 0.5 * ln_det - 0.5 * quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XgdfEstimate {
    pub value: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Parametric-bootstrap estimate of `Σ_d Σ_ij V⁻¹_dij Cov(μ̂_di, Y_dj)`.
///
/// Replicate `b` draws from the fitted model with seed
/// `derive(seed, Bootstrap, b)`, refits the same specification and records
/// the conditional means. Covariances use the `B − 1` divisor and stay
/// within areas.
pub fn estimate_xgdf(fit: &FittedLmm, design: &DesignMatrices, reps: usize, seed: u64) -> Result<XgdfEstimate> {
    if reps < 50 {
        return Err(Error::InvalidArgument(format!("xGDF needs at least 50 bootstrap replicates, got {reps}")));
    }
    let inverses = design
        .blocks
        .iter()
        .map(|b| fit.block_inverse(design, b))
        .collect::<Result<Vec<_>>>()?;
    let problem = RemlProblem::new(design)?;

    let draws: Vec<Option<(DVector<f64>, DVector<f64>)>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let y = fit.simulate_response(design, seed::derive(seed, Stream::Bootstrap, b as u64)).ok()?;
            let refit = problem.fit_response(&y).ok()?;
            if !refit.converged {
                return None;
            }
            let mu = refit.predict_units(design).ok()?;
            Some((mu, y))
        })
        .collect();

    let kept: Vec<&(DVector<f64>, DVector<f64>)> = draws.iter().flatten().collect();
    let failed = reps - kept.len();
    if failed * 10 > reps {
        return Err(Error::TooManyFailures {
            what: "bootstrap refits".into(),
            failed,
            attempted: reps,
        });
    }
    let used = kept.len();
    let n = design.n();
    let mut mu_bar = DVector::zeros(n);
    let mut y_bar = DVector::zeros(n);
    for (mu, y) in &kept {
        mu_bar += mu;
        y_bar += y;
    }
    mu_bar /= used as f64;
    y_bar /= used as f64;

    let mut total = 0.0;
    for (mu, y) in &kept {
        let dm = mu - &mu_bar;
        let dy = y - &y_bar;
        for (b, inv) in design.blocks.iter().zip(&inverses) {
            let v = inv.apply(design, b, &dy.as_slice()[b.range()]);
            total += dm.rows(b.start, b.len).dot(&v);
        }
    }
    Ok(XgdfEstimate {
        value: total / (used as f64 - 1.0),
        replicates_used: used,
        replicates_failed: failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub label: String,
    pub p: usize,
    pub q: usize,
    pub quasi_loglik: f64,
    pub xgdf: f64,
    pub xgaic: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub gender: Gender,
    /// Scored candidates in input order.
    pub candidates: Vec<CandidateScore>,
    pub failures: Vec<CandidateFailure>,
    pub winner: String,
    pub bootstrap_reps: usize,
    pub seed: u64,
}

impl SelectionResult {
    /// Candidates sorted by the winner rule: xGAIC, then size, then label.
    pub fn ranked(&self) -> Vec<&CandidateScore> {
        let mut out: Vec<&CandidateScore> = self.candidates.iter().collect();
        out.sort_by(|a, b| rank_order(a, b));
        out
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>14} {:>10} {:>14}\n", "model", "-2logl", "xGDF", "xGAIC");
        for c in self.ranked() {
            s += &format!(
                "{:<12} {:>14.4} {:>10.4} {:>14.4}{}\n",
                c.label,
                -2.0 * c.quasi_loglik,
                c.xgdf,
                c.xgaic,
                if c.label == self.winner { "  *" } else { "" }
            );
        }
        for f in &self.failures {
            s += &format!("{:<12} failed: {}\n", f.label, f.error);
        }
        s
    }
}

fn rank_order(a: &CandidateScore, b: &CandidateScore) -> std::cmp::Ordering {
    a.xgaic
        .total_cmp(&b.xgaic)
        .then((a.p + a.q).cmp(&(b.p + b.q)))
        .then(a.label.cmp(&b.label))
}

/// Scores one candidate on an already-encoded design.
pub fn score_candidate(design: &DesignMatrices, reps: usize, seed: u64) -> Result<CandidateScore> {
    let fit = fit_reml(design)?;
    let ql = quasi_loglikelihood(&fit, design)?;
    let x = estimate_xgdf(&fit, design, reps, seed)?;
    Ok(CandidateScore {
        label: design.spec.label.clone(),
        p: fit.p(),
        q: fit.q(),
        quasi_loglik: ql,
        xgdf: x.value,
        xgaic: -2.0 * ql + x.value,
        replicates_used: x.replicates_used,
        replicates_failed: x.replicates_failed,
    })
}

/// Fits every candidate on the larger gender subset and picks the xGAIC
/// minimizer. Every candidate sees the same bootstrap seed.
pub fn select_model(ds: &Dataset, candidates: &[ModelSpec], reps: usize, seed: u64) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate models".into()));
    }
    let gender = ds.larger_gender();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for spec in candidates {
        let scored = encode_design(ds, spec, gender).and_then(|d| score_candidate(&d, reps, seed));
        match scored {
            Ok(s) => scores.push(s),
            Err(e @ (Error::InvalidArgument(_) | Error::UnknownVariable(_) | Error::ModelSpec { .. })) => {
                return Err(e)
            }
            Err(e) => failures.push(CandidateFailure {
                label: spec.label.clone(),
                error: e.to_string(),
            }),
        }
    }
    let winner = scores
        .iter()
        .min_by(|a, b| rank_order(a, b))
        .map(|s| s.label.clone())
        .ok_or_else(|| Error::TooManyFailures {
            what: "candidate fits".into(),
            failed: failures.len(),
            attempted: candidates.len(),
        })?;
    Ok(SelectionResult {
        gender,
        candidates: scores,
        failures,
        winner,
        bootstrap_reps: reps,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AreaBlock;
    use crate::fixtures::{self, TwoGender};
    use crate::lmm::VarianceComponents;
    use crate::model::RandomTerm;
    use nalgebra::DMatrix;

    fn fixed(label: &str, vars: &[&str]) -> ModelSpec {
        ModelSpec::new(label, vars, vec![])
    }

    /// A design/fit pair with hand-set pieces and `V_d = σ² I` blocks.
    fn manual(y: &[f64], areas: &[usize], sigma2: f64) -> (FittedLmm, DesignMatrices) {
        let ds = fixtures::one_way(2, 3, 0.0, 0.0, 1.0, 1);
        let spec = fixed("m", &[]);
        let mut design = encode_design(&ds, &spec, Gender::Men).unwrap();
        let mut fit = fit_reml(&design).unwrap();
        let n = y.len();
        design.x = DMatrix::zeros(n, 1);
        design.z = DMatrix::zeros(n, 0);
        design.y = DVector::from_column_slice(y);
        design.w = DVector::from_element(n, 1.0);
        design.blocks = Vec::new();
        let mut start = 0;
        for (a, &len) in areas.iter().enumerate() {
            design.blocks.push(AreaBlock { area: a, start, len });
            start += len;
        }
        design.areas = (0..areas.len()).map(fixtures::area_code).collect();
        fit.areas = design.areas.clone();
        fit.u_hat = DMatrix::zeros(areas.len(), 0);
        fit.beta = DVector::from_element(1, 0.0);
        fit.vc = VarianceComponents {
            sigma_u: DMatrix::zeros(0, 0),
            sigma_e2: sigma2,
        };
        (fit, design)
    }

    #[test]
    fn zero_residual_identity_blocks() {
        let (fit, design) = manual(&[0.0, 0.0, 0.0], &[2, 1], 1.0);
        let ql = quasi_loglikelihood(&fit, &design).unwrap();
        assert!((ql + LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn scalar_case() {
        let (v, r) = (2.5, 0.7);
        let (fit, design) = manual(&[r], &[1], v);
        let ql = quasi_loglikelihood(&fit, &design).unwrap();
        let expected = -0.5 * LN_2PI - 0.5 * v.ln() - r * r / (2.0 * v);
        assert!((ql - expected).abs() < 1e-14);
    }

    #[test]
    fn quadratic_term_scales_by_four() {
        let y = [0.3, -1.2, 0.5, 2.0];
        let (fit, design) = manual(&y, &[2, 2], 1.7);
        let (_, zero) = manual(&[0.0; 4], &[2, 2], 1.7);
        let base = quasi_loglikelihood(&fit, &zero).unwrap();
        let q1 = base - quasi_loglikelihood(&fit, &design).unwrap();
        let doubled = design.with_response(design.y.scale(2.0));
        let q2 = base - quasi_loglikelihood(&fit, &doubled).unwrap();
        assert!((q2 - 4.0 * q1).abs() < 1e-12);
    }

    #[test]
    fn nested_fixed_models_order_quasi_loglik() {
        // Common σ² imposed so both models share V.
        let ds = fixtures::two_gender(&TwoGender::default(), 2);
        let small = encode_design(&ds, &fixed("s", &["x1"]), Gender::Men).unwrap();
        let large = encode_design(&ds, &fixed("l", &["x1", "x2", "group"]), Gender::Men).unwrap();
        let mut fs = fit_reml(&small).unwrap();
        let mut fl = fit_reml(&large).unwrap();
        fs.vc.sigma_e2 = 0.2;
        fl.vc.sigma_e2 = 0.2;
        assert!(quasi_loglikelihood(&fl, &large).unwrap() >= quasi_loglikelihood(&fs, &small).unwrap());
    }

    #[test]
    fn xgdf_of_intercept_model_is_one() {
        let ds = fixtures::two_gender(&TwoGender::default(), 3);
        let design = encode_design(&ds, &fixed("i", &[]), Gender::Men).unwrap();
        let fit = fit_reml(&design).unwrap();
        let x = estimate_xgdf(&fit, &design, 500, 9).unwrap();
        assert!((x.value - 1.0).abs() < 0.2, "{}", x.value);
        assert_eq!(x.replicates_used, 500);
    }

    #[test]
    fn xgdf_is_deterministic_and_needs_fifty_reps() {
        let ds = fixtures::two_gender(&TwoGender::default(), 4);
        let spec = ModelSpec::new("m", &["x1"], vec![RandomTerm::Intercept]);
        let design = encode_design(&ds, &spec, Gender::Men).unwrap();
        let fit = fit_reml(&design).unwrap();
        let a = estimate_xgdf(&fit, &design, 60, 1).unwrap();
        assert_eq!(a, estimate_xgdf(&fit, &design, 60, 1).unwrap());
        assert!(estimate_xgdf(&fit, &design, 49, 1).is_err());
    }

    #[test]
    fn xgdf_ignores_area_labels() {
        let ds = fixtures::two_gender(&TwoGender::default(), 5);
        let spec = ModelSpec::new("m", &["x1"], vec![RandomTerm::Intercept]);
        let design = encode_design(&ds, &spec, Gender::Men).unwrap();
        let fit = fit_reml(&design).unwrap();
        let mut relabeled = design.clone();
        relabeled.areas = design.areas.iter().map(|a| format!("z{a}")).collect();
        let mut fit2 = fit.clone();
        fit2.areas = relabeled.areas.clone();
        let a = estimate_xgdf(&fit, &design, 100, 3).unwrap();
        let b = estimate_xgdf(&fit2, &relabeled, 100, 3).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn single_candidate_wins_and_identity_holds() {
        let ds = fixtures::two_gender(&TwoGender::default(), 6);
        let res = select_model(&ds, &[fixed("only", &["x1"])], 50, 1).unwrap();
        assert_eq!(res.winner, "only");
        assert_eq!(res.gender, Gender::Men);
        for c in &res.candidates {
            assert!((c.xgaic - (-2.0 * c.quasi_loglik + c.xgdf)).abs() < 1e-10);
        }
        assert!(res.table().contains("only"));
    }

    #[test]
    fn ties_go_to_smaller_then_label() {
        let mk = |label: &str, p, xgaic| CandidateScore {
            label: label.into(),
            p,
            q: 0,
            quasi_loglik: 0.0,
            xgdf: 0.0,
            xgaic,
            replicates_used: 50,
            replicates_failed: 0,
        };
        let res = SelectionResult {
            gender: Gender::Men,
            candidates: vec![mk("b", 2, 1.0), mk("c", 3, 1.0), mk("a", 2, 1.0), mk("d", 1, 2.0)],
            failures: vec![],
            winner: String::new(),
            bootstrap_reps: 50,
            seed: 0,
        };
        let order: Vec<&str> = res.ranked().iter().map(|c| c.label.as_str()).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn failed_candidate_is_reported_not_fatal() {
        let ds = fixtures::two_gender(&TwoGender::default(), 7);
        let collinear = fixed("bad", &["x1", "x1"]);
        let res = select_model(&ds, &[collinear, fixed("ok", &["x1"])], 50, 1).unwrap();
        assert_eq!(res.winner, "ok");
        assert_eq!(res.failures.len(), 1);
    }
}
