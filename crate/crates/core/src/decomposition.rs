//! Gap decompositions: classic Oaxaca–Blinder, the per-area mixed-model
//! version, the half-sample bias term and Monte Carlo intervals.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{encode_design, CellMeans, Dataset, DesignMatrices, Gender, GroupMeans};
use crate::error::{Error, Result};
use crate::lmm::{fit_reml, FittedLmm};
use crate::model::ModelSpec;
use crate::seed::{self, Stream};

/// Areas whose estimated log-gap is smaller than this report no ratios.
pub const UNSTABLE_DELTA: f64 = 1e-6;
pub const DEFAULT_ITERATIONS: usize = 200;
pub const GLOBAL_AREA: &str = "global";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObDecomposition {
    pub delta: f64,
    pub q: f64,
    pub u: f64,
}

fn check_columns(men: &FittedLmm, women: &FittedLmm) -> Result<()> {
    if men.x_names != women.x_names || men.z_names != women.z_names {
        return Err(Error::DimensionMismatch(format!(
            "men and women fits use different columns ({} vs {})",
            men.x_names.join(","),
            women.x_names.join(",")
        )));
    }
    Ok(())
}

/// Classic decomposition with men's coefficients as reference:
/// `Q = (x̄_m − x̄_w)β_m`, `U = x̄_w(β_m − β_w)`.
pub fn ob_decompose(
    men: &FittedLmm,
    women: &FittedLmm,
    xbar_m: &DVector<f64>,
    xbar_w: &DVector<f64>,
) -> Result<ObDecomposition> {
    check_columns(men, women)?;
    if xbar_m.len() != men.p() || xbar_w.len() != women.p() {
        return Err(Error::DimensionMismatch("mean vectors do not match the fits".into()));
    }
    let q = (xbar_m - xbar_w).dot(&men.beta);
    let u = xbar_w.dot(&(&men.beta - &women.beta));
    Ok(ObDecomposition {
        delta: xbar_m.dot(&men.beta) - xbar_w.dot(&women.beta),
        q,
        u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaDecomposition {
    pub area: String,
    pub n_m: usize,
    pub n_w: usize,
    pub delta: f64,
    pub q_raw: f64,
    pub u_raw: f64,
    pub bias: f64,
    pub q_corrected: f64,
    pub u_corrected: f64,
}

impl AreaDecomposition {
    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self.q_corrected = self.q_raw + bias;
        self.u_corrected = self.delta - self.q_corrected;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaComponents {
    pub rows: Vec<AreaDecomposition>,
    /// Dataset area index of each row.
    pub index: Vec<usize>,
    /// Areas without data or random effects for one of the genders.
    pub excluded: Vec<String>,
}

/// Raw per-area components (bias 0): `Δ̂ = μ̂_m − μ̂_w`,
/// `Q̂ = (x̄_m − x̄_w)β̂_m + (z̄_m − z̄_w)û_m`, `Û = Δ̂ − Q̂`.
pub fn area_components(men: &FittedLmm, women: &FittedLmm, means: &GroupMeans) -> Result<AreaComponents> {
    check_columns(men, women)?;
    if men.areas != means.areas || women.areas != means.areas {
        return Err(Error::DimensionMismatch("fits and means cover different areas".into()));
    }
    let mut out = AreaComponents {
        rows: Vec::new(),
        index: Vec::new(),
        excluded: Vec::new(),
    };
    for (d, code) in means.areas.iter().enumerate() {
        let (Some(m), Some(w)) = (means.get(d, Gender::Men), means.get(d, Gender::Women)) else {
            out.excluded.push(code.clone());
            continue;
        };
        if !men.area_seen[d] || !women.area_seen[d] {
            out.excluded.push(code.clone());
            continue;
        }
        let mu_m = men.cell_mean(m, d)?;
        let mu_w = women.cell_mean(w, d)?;
        let mut q = (&m.xbar - &w.xbar).dot(&men.beta);
        if men.q() > 0 {
            q += (&m.zbar - &w.zbar).dot(&men.random_effect(d));
        }
        let delta = mu_m - mu_w;
        out.rows.push(AreaDecomposition {
            area: code.clone(),
            n_m: m.n,
            n_w: w.n,
            delta,
            q_raw: q,
            u_raw: delta - q,
            bias: 0.0,
            q_corrected: q,
            u_corrected: delta - q,
        });
        out.index.push(d);
    }
    Ok(out)
}

/// Mean of `exp(Ŷ)` over the sampled units of every area; `None` for areas
/// without units.
pub fn expected_wages(fit: &FittedLmm, design: &DesignMatrices) -> Result<Vec<Option<f64>>> {
    let yhat = fit.predict_units(design)?;
    let mut out = vec![None; design.n_areas()];
    for b in &design.blocks {
        let s: f64 = b.range().map(|i| yhat[i].exp()).sum();
        out[b.area] = Some(s / b.len as f64);
    }
    Ok(out)
}

pub fn expected_wage(fit: &FittedLmm, design: &DesignMatrices, area: &str) -> Result<f64> {
    let d = design
        .areas
        .iter()
        .position(|a| a == area)
        .ok_or_else(|| Error::UnknownArea(area.to_string()))?;
    expected_wages(fit, design)?[d].ok_or_else(|| Error::EmptyGroup(format!("{} in area {area}", design.gender)))
}

/// `(E W_m − E W_w) / E W_m`.
pub fn gpg(ew_m: f64, ew_w: f64) -> Result<f64> {
    if !(ew_m > 0.0) {
        return Err(Error::InvalidArgument(format!("men's expected wage must be positive, got {ew_m}")));
    }
    Ok((ew_m - ew_w) / ew_m)
}

/// Both genders fitted on one sample.
struct SampleFit {
    men_design: DesignMatrices,
    women_design: DesignMatrices,
    men: FittedLmm,
    women: FittedLmm,
}

impl SampleFit {
    fn new(ds: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let men_design = encode_design(ds, spec, Gender::Men)?;
        let women_design = encode_design(ds, spec, Gender::Women)?;
        let men = fit_reml(&men_design)?;
        let women = fit_reml(&women_design)?;
        Ok(SampleFit {
            men_design,
            women_design,
            men,
            women,
        })
    }

    fn means(&self) -> GroupMeans {
        GroupMeans::from_designs(&self.men_design, &self.women_design)
    }

    /// GPG per dataset area, where both genders have units.
    fn gpgs(&self) -> Result<Vec<Option<f64>>> {
        let m = expected_wages(&self.men, &self.men_design)?;
        let w = expected_wages(&self.women, &self.women_design)?;
        m.into_iter()
            .zip(w)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => gpg(a, b).map(Some),
                _ => Ok(None),
            })
            .collect()
    }
}

/// Everything one half-sample split contributes, per decomposed area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub attempt: usize,
    pub q1: Vec<f64>,
    pub delta1: Vec<f64>,
    pub gpg1: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `(x̄_1 − x̄_2)β̂_1 + (z̄_1 − z̄_2)û_1d` from men's half-sample means.
pub fn bias_term(men1: &FittedLmm, half1: &CellMeans, half2: &CellMeans, area: usize) -> f64 {
    let mut b = (&half1.xbar - &half2.xbar).dot(&men1.beta);
    if men1.q() > 0 {
        b += (&half1.zbar - &half2.zbar).dot(&men1.random_effect(area));
    }
    b
}

/// One random split; `None` when the split has to be discarded.
fn split_once(ds: &Dataset, spec: &ModelSpec, areas: &[usize], attempt: usize, seed: u64) -> Option<SplitRecord> {
    let mut rng = seed::stream_rng(seed, Stream::Split, attempt as u64);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let n1 = ds.len().div_ceil(2);
    let (a, b) = idx.split_at_mut(n1);
    a.sort_unstable();
    b.sort_unstable();
    let s1 = ds.subset(a);
    let s2 = ds.subset(b);
    let usable = areas
        .iter()
        .all(|&d| s1.count(d, Gender::Men) > 0 && s1.count(d, Gender::Women) > 0 && s2.count(d, Gender::Men) > 0);
    if !usable {
        return None;
    }
    let fit = SampleFit::new(&s1, spec).ok()?;
    let comps = area_components(&fit.men, &fit.women, &fit.means()).ok()?;
    let gpgs = fit.gpgs().ok()?;
    let men2 = encode_design(&s2, spec, Gender::Men).ok()?.cell_means();
    let men1 = fit.men_design.cell_means();

    let mut rec = SplitRecord {
        attempt,
        q1: Vec::with_capacity(areas.len()),
        delta1: Vec::with_capacity(areas.len()),
        gpg1: Vec::with_capacity(areas.len()),
        bias: Vec::with_capacity(areas.len()),
    };
    for &d in areas {
        let k = comps.index.iter().position(|&i| i == d)?;
        let bias = bias_term(&fit.men, men1[d].as_ref()?, men2[d].as_ref()?, d);
        rec.q1.push(comps.rows[k].q_raw);
        rec.delta1.push(comps.rows[k].delta);
        rec.gpg1.push(gpgs[d]?);
        rec.bias.push(bias);
    }
    Some(rec)
}

/// Splits until `iterations` usable ones are collected, in attempt order.
/// Attempts are capped at five times the target.
fn run_splits(
    ds: &Dataset,
    spec: &ModelSpec,
    areas: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<(Vec<SplitRecord>, usize)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    for &d in areas {
        if ds.count(d, Gender::Men) < 2 {
            return Err(Error::SparseData(format!(
                "area {} has fewer than 2 men; it cannot appear in both halves",
                ds.areas()[d]
            )));
        }
    }
    let cap = 5 * iterations;
    let mut records = Vec::with_capacity(iterations);
    let mut attempts = 0;
    while records.len() < iterations && attempts < cap {
        let batch = (iterations - records.len()).min(cap - attempts);
        let found: Vec<Option<SplitRecord>> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|a| split_once(ds, spec, areas, a, seed))
            .collect();
        records.extend(found.into_iter().flatten());
        attempts += batch;
    }
    if records.len() < iterations || 2 * records.len() < attempts {
        return Err(Error::SparseData(format!(
            "only {} of {} attempted splits were usable ({} needed)",
            records.len(),
            attempts,
            iterations
        )));
    }
    Ok((records, attempts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub areas: Vec<String>,
    /// Mean of the per-split bias terms.
    pub bias: Vec<f64>,
    /// Monte Carlo standard error of `bias`.
    pub se: Vec<f64>,
    pub attempts: usize,
    pub records: Vec<SplitRecord>,
}

fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn bias_from_records(names: Vec<String>, records: Vec<SplitRecord>, attempts: usize) -> BiasEstimate {
    let (bias, se) = (0..names.len())
        .map(|k| mean_se(records.iter().map(move |r| r.bias[k])))
        .unzip();
    BiasEstimate {
        areas: names,
        bias,
        se,
        attempts,
        records,
    }
}

/// Areas where both genders have data in `ds`.
fn decomposable_areas(ds: &Dataset) -> Vec<usize> {
    (0..ds.n_areas())
        .filter(|&d| ds.count(d, Gender::Men) > 0 && ds.count(d, Gender::Women) > 0)
        .collect()
}

/// Half-sample bias terms `B̂_d` for every area with both genders.
pub fn estimate_bias(ds: &Dataset, spec: &ModelSpec, iterations: usize, seed: u64) -> Result<BiasEstimate> {
    let areas = decomposable_areas(ds);
    let (records, attempts) = run_splits(ds, spec, &areas, iterations, seed)?;
    let names = areas.iter().map(|&d| ds.areas()[d].clone()).collect();
    Ok(bias_from_records(names, records, attempts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Add the half-sample bias term to Q̂ (off reproduces plain splits).
    pub bias_correction: bool,
    /// Also decompose the whole region as a single area.
    pub include_global: bool,
}

impl DecomposeOptions {
    pub fn new(seed: u64) -> Self {
        DecomposeOptions {
            iterations: DEFAULT_ITERATIONS,
            alpha: 0.05,
            seed,
            bias_correction: true,
            include_global: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpgEstimate {
    pub area: String,
    pub n_m: usize,
    pub n_w: usize,
    pub gpg: f64,
    pub gpg_q: Option<f64>,
    pub gpg_u: Option<f64>,
    pub ci_q: Option<(f64, f64)>,
    pub ci_u: Option<(f64, f64)>,
    pub bias: f64,
    /// Splits that contributed to the interval.
    pub iterations_used: usize,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub label: String,
    pub components: Vec<AreaDecomposition>,
    pub estimates: Vec<GpgEstimate>,
    pub global: Option<(AreaDecomposition, GpgEstimate)>,
    pub excluded: Vec<String>,
    pub attempts: usize,
    pub trace: Vec<SplitRecord>,
}

pub fn z_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Interval `point ± z·√V`, `V` the mean squared deviation (divisor `I`).
pub fn interval(point: f64, draws: &[f64], z: f64) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let v = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let half = z * v.sqrt();
    (point - half, point + half)
}

fn estimate_area(
    raw: &AreaDecomposition,
    gpg_d: f64,
    records: &[SplitRecord],
    k: usize,
    bias: f64,
    z: f64,
) -> (AreaDecomposition, GpgEstimate) {
    let row = raw.clone().with_bias(bias);
    let unstable = row.delta.abs() < UNSTABLE_DELTA;
    let mut draws_q = Vec::with_capacity(records.len());
    let mut draws_u = Vec::with_capacity(records.len());
    for r in records {
        let d1 = r.delta1[k];
        if d1.abs() < UNSTABLE_DELTA {
            continue;
        }
        let qb = r.q1[k] + bias;
        draws_q.push(r.gpg1[k] * qb / d1);
        draws_u.push(r.gpg1[k] * (d1 - qb) / d1);
    }
    let (gpg_q, gpg_u, ci_q, ci_u) = if unstable {
        (None, None, None, None)
    } else {
        let q = gpg_d * row.q_corrected / row.delta;
        let u = gpg_d * row.u_corrected / row.delta;
        let ci = |p: f64, d: &[f64]| (!d.is_empty()).then(|| interval(p, d, z));
        (Some(q), Some(u), ci(q, &draws_q), ci(u, &draws_u))
    };
    let est = GpgEstimate {
        area: row.area.clone(),
        n_m: row.n_m,
        n_w: row.n_w,
        gpg: gpg_d,
        gpg_q,
        gpg_u,
        ci_q,
        ci_u,
        bias,
        iterations_used: draws_q.len(),
        unstable,
    };
    (row, est)
}

struct Stage {
    components: Vec<AreaDecomposition>,
    estimates: Vec<GpgEstimate>,
    excluded: Vec<String>,
    attempts: usize,
    trace: Vec<SplitRecord>,
}

fn decompose_stage(ds: &Dataset, spec: &ModelSpec, opts: &DecomposeOptions) -> Result<Stage> {
    let full = SampleFit::new(ds, spec)?;
    let comps = area_components(&full.men, &full.women, &full.means())?;
    let gpgs = full.gpgs()?;
    let (records, attempts) = run_splits(ds, spec, &comps.index, opts.iterations, opts.seed)?;
    let z = z_quantile(opts.alpha);
    let mut components = Vec::with_capacity(comps.rows.len());
    let mut estimates = Vec::with_capacity(comps.rows.len());
    for (k, (raw, &d)) in comps.rows.iter().zip(&comps.index).enumerate() {
        let bias = if opts.bias_correction {
            records.iter().map(|r| r.bias[k]).sum::<f64>() / records.len() as f64
        } else {
            0.0
        };
        let gpg_d = gpgs[d].expect("decomposed areas have both genders");
        let (row, est) = estimate_area(raw, gpg_d, &records, k, bias, z);
        components.push(row);
        estimates.push(est);
    }
    Ok(Stage {
        components,
        estimates,
        excluded: comps.excluded,
        attempts,
        trace: records,
    })
}

/// Full pipeline: full-sample components, half-sample bias correction,
/// corrected GPG split and intervals, per area and optionally globally.
pub fn decompose_gpg(ds: &Dataset, spec: &ModelSpec, opts: &DecomposeOptions) -> Result<Decomposition> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let stage = decompose_stage(ds, spec, opts)?;
    let global = if opts.include_global {
        let whole = ds.collapse_areas(GLOBAL_AREA);
        let g = decompose_stage(&whole, spec, opts)?;
        g.components.into_iter().zip(g.estimates).next()
    } else {
        None
    };
    Ok(Decomposition {
        label: spec.label.clone(),
        components: stage.components,
        estimates: stage.estimates,
        global,
        excluded: stage.excluded,
        attempts: stage.attempts,
        trace: stage.trace,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Decomposition {
    pub const CSV_HEADER: [&'static str; 12] = [
        "area", "n_m", "n_w", "gpg", "gpg_q", "gpg_q_lo", "gpg_q_hi", "gpg_u", "gpg_u_lo", "gpg_u_hi", "bias",
        "unstable",
    ];

    /// One row per area, then the global row if present.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for e in self.estimates.iter().chain(self.global.as_ref().map(|g| &g.1)) {
            w.write_record([
                e.area.clone(),
                e.n_m.to_string(),
                e.n_w.to_string(),
                e.gpg.to_string(),
                opt(e.gpg_q),
                opt(e.ci_q.map(|c| c.0)),
                opt(e.ci_q.map(|c| c.1)),
                opt(e.gpg_u),
                opt(e.ci_u.map(|c| c.0)),
                opt(e.ci_u.map(|c| c.1)),
                e.bias.to_string(),
                e.unstable.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
