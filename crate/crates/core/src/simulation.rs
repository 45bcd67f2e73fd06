//! Simulation harness: a synthetic wage population with area- and
//! gender-specific coefficients, its true gap decomposition, and the
//! replicate loop that scores every estimator against that truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Covariate, Dataset, Gender, RecordInput, Role, Variable, VariableSchema};
use crate::decomposition::{decompose_gpg, DecomposeOptions, Decomposition};
use crate::error::{Error, Result};
use crate::model::{CandidateSet, ModelSpec};
use crate::selection::select_model;
use crate::seed::{self, Stream};

pub const EDUCATION: [&str; 3] = ["Primary", "Secondary", "Higher"];
pub const OCCUPATION: [&str; 5] = ["Professionals", "Technicians", "Operators", "Services", "Unskilled"];
/// Order of the coefficient vector of every cell.
pub const COEFFICIENTS: [&str; 8] = [
    "(Intercept)",
    "experience",
    "education:Secondary",
    "education:Higher",
    "occupation:Technicians",
    "occupation:Operators",
    "occupation:Services",
    "occupation:Unskilled",
];

const BUNDLED_D10: &str = include_str!("../data/generator_d10.json");
const BUNDLED_D30: &str = include_str!("../data/generator_d30.json");
const BUNDLED_CANDIDATES: &str = include_str!("../data/candidates.json");

/// Covariate distribution of one area-gender cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    /// Mean years of experience (gamma distributed, shape 2).
    pub experience_mean: f64,
    pub education: [f64; 3],
    /// Occupation probabilities given each education level.
    pub occupation_given_education: [[f64; 5]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderCell {
    pub n: usize,
    pub sigma2: f64,
    /// Coefficients in [`COEFFICIENTS`] order.
    pub beta: [f64; 8],
    pub covariates: Marginals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaCell {
    pub code: String,
    pub sector: String,
    pub men: GenderCell,
    pub women: GenderCell,
}

impl AreaCell {
    pub fn cell(&self, g: Gender) -> &GenderCell {
        match g {
            Gender::Men => &self.men,
            Gender::Women => &self.women,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Independent draws from each cell's [`Marginals`].
    Marginals,
    /// Rows resampled with replacement from a dataset with the simulation
    /// schema, within gender and (when present) area.
    Template { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub areas: Vec<AreaCell>,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
}

fn default_sampler() -> Sampler {
    Sampler::Marginals
}

impl GeneratorConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The frozen ten-area generator.
    pub fn desk() -> Self {
        Self::from_json(BUNDLED_D10).expect("bundled generator is valid")
    }

    /// The frozen thirty-area generator.
    pub fn full() -> Self {
        Self::from_json(BUNDLED_D30).expect("bundled generator is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.areas.is_empty() {
            problems.push("generator has no areas".to_string());
        }
        let mut codes: Vec<&str> = self.areas.iter().map(|a| a.code.as_str()).collect();
        codes.sort_unstable();
        if codes.windows(2).any(|w| w[0] == w[1]) {
            problems.push("duplicate area codes".to_string());
        }
        for a in &self.areas {
            for g in Gender::BOTH {
                let c = a.cell(g);
                let at = format!("area {} ({g})", a.code);
                if c.n == 0 {
                    problems.push(format!("{at}: sample size must be at least 1"));
                }
                if !(c.sigma2 > 0.0) {
                    problems.push(format!("{at}: noise variance must be positive"));
                }
                if c.beta.iter().any(|b| !b.is_finite()) {
                    problems.push(format!("{at}: non-finite coefficient"));
                }
                let m = &c.covariates;
                if !(m.experience_mean > 0.0) {
                    problems.push(format!("{at}: experience mean must be positive"));
                }
                let probs = std::iter::once(&m.education[..]).chain(m.occupation_given_education.iter().map(|r| &r[..]));
                for p in probs {
                    if p.iter().any(|v| !(*v >= 0.0)) || !(p.iter().sum::<f64>() > 0.0) {
                        problems.push(format!("{at}: probabilities must be non-negative with positive sum"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn sectors(&self) -> Vec<String> {
        let mut s: Vec<String> = self.areas.iter().map(|a| a.sector.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn schema(&self) -> VariableSchema {
        schema(&self.sectors())
    }
}

/// Schema of generated data: wage, gender, area, experience, education,
/// occupation and the sector each area belongs to.
pub fn schema(sectors: &[String]) -> VariableSchema {
    let sectors: Vec<&str> = sectors.iter().map(String::as_str).collect();
    let mut vars = vec![
        Variable::with_role("wage", Role::Response),
        Variable {
            categories: vec!["men".into(), "women".into()],
            ..Variable::with_role("gender", Role::Gender)
        },
        Variable::with_role("area", Role::Area),
        Variable::continuous("experience"),
        Variable::categorical("education", &EDUCATION, EDUCATION[0]),
        Variable::categorical("occupation", &OCCUPATION, OCCUPATION[0]),
    ];
    if sectors.len() >= 2 {
        vars.push(Variable::categorical("sector", &sectors, sectors[0]));
    }
    VariableSchema::new(vars).expect("simulation schema is valid")
}

/// Bundled MS1–MS8 candidate grid plus the OB baseline.
pub fn candidates() -> CandidateSet {
    let set = CandidateSet::from_json(BUNDLED_CANDIDATES).expect("bundled candidates are valid");
    set.validate().expect("bundled candidates are valid");
    set
}

/// One unit's covariates: experience, education level, occupation level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub experience: f64,
    pub education: usize,
    pub occupation: usize,
}

impl Unit {
    pub fn design_row(&self) -> [f64; 8] {
        let mut x = [0.0; 8];
        x[0] = 1.0;
        x[1] = self.experience;
        if self.education > 0 {
            x[1 + self.education] = 1.0;
        }
        if self.occupation > 0 {
            x[3 + self.occupation] = 1.0;
        }
        x
    }

    pub fn linear_predictor(&self, beta: &[f64; 8]) -> f64 {
        self.design_row().iter().zip(beta).map(|(x, b)| x * b).sum()
    }
}

struct CellSampler {
    experience: Gamma<f64>,
    education: WeightedIndex<f64>,
    occupation: Vec<WeightedIndex<f64>>,
}

impl CellSampler {
    fn new(m: &Marginals) -> Self {
        CellSampler {
            experience: Gamma::new(2.0, m.experience_mean / 2.0).expect("validated mean"),
            education: WeightedIndex::new(m.education).expect("validated probabilities"),
            occupation: m
                .occupation_given_education
                .iter()
                .map(|p| WeightedIndex::new(p).expect("validated probabilities"))
                .collect(),
        }
    }

    fn draw(&self, rng: &mut seed::Rng) -> Unit {
        let education = self.education.sample(rng);
        Unit {
            experience: self.experience.sample(rng),
            education,
            occupation: self.occupation[education].sample(rng),
        }
    }
}

enum Source {
    Marginals(CellSampler),
    Pool(Vec<Unit>),
}

impl Source {
    fn draw(&self, rng: &mut seed::Rng) -> Unit {
        match self {
            Source::Marginals(s) => s.draw(rng),
            Source::Pool(units) => units[rng.random_range(0..units.len())],
        }
    }
}

/// A validated generator with its covariate sources prepared.
pub struct Generator {
    cfg: GeneratorConfig,
    schema: VariableSchema,
    /// `[area][gender]`
    sources: Vec<[Source; 2]>,
}

fn unit_of(ds: &Dataset, r: &crate::data::UnitRecord) -> Result<Unit> {
    let schema = ds.schema();
    let idx = |name: &str| {
        schema
            .explanatory_index(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    };
    let get = |name: &str| -> Result<Covariate> { Ok(r.covariates[idx(name)?]) };
    match (get("experience")?, get("education")?, get("occupation")?) {
        (Covariate::Real(e), Covariate::Level(ed), Covariate::Level(oc)) => Ok(Unit {
            experience: e,
            education: ed,
            occupation: oc,
        }),
        _ => Err(Error::Schema("template covariates have unexpected kinds".into())),
    }
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = cfg.schema();
        let sources = match &cfg.sampler {
            Sampler::Marginals => cfg
                .areas
                .iter()
                .map(|a| {
                    [
                        Source::Marginals(CellSampler::new(&a.men.covariates)),
                        Source::Marginals(CellSampler::new(&a.women.covariates)),
                    ]
                })
                .collect(),
            Sampler::Template { path } => {
                let template_schema = schema_without_sector(&schema);
                let ds = load_dataset(path, &template_schema)?;
                let mut by_gender: [Vec<Unit>; 2] = [Vec::new(), Vec::new()];
                let mut by_cell: BTreeMap<(String, usize), Vec<Unit>> = BTreeMap::new();
                for r in ds.records() {
                    let u = unit_of(&ds, r)?;
                    by_gender[r.gender.index()].push(u);
                    by_cell
                        .entry((ds.areas()[r.area].clone(), r.gender.index()))
                        .or_default()
                        .push(u);
                }
                if by_gender.iter().any(|v| v.is_empty()) {
                    return Err(Error::SparseData("template needs rows for both genders".into()));
                }
                cfg.areas
                    .iter()
                    .map(|a| {
                        let pick = |g: usize| {
                            let units = by_cell
                                .get(&(a.code.clone(), g))
                                .cloned()
                                .unwrap_or_else(|| by_gender[g].clone());
                            Source::Pool(units)
                        };
                        [pick(0), pick(1)]
                    })
                    .collect()
            }
        };
        Ok(Generator {
            cfg: cfg.clone(),
            schema,
            sources,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    fn record(&self, area: &AreaCell, g: Gender, u: Unit, y: f64) -> RecordInput {
        let mut covariates = vec![
            Covariate::Real(u.experience),
            Covariate::Level(u.education),
            Covariate::Level(u.occupation),
        ];
        if self.schema.explanatory_index("sector").is_some() {
            let sectors = self.cfg.sectors();
            covariates.push(Covariate::Level(sectors.iter().position(|s| *s == area.sector).unwrap()));
        }
        RecordInput {
            wage_per_hour: y.exp(),
            gender: g,
            area: area.code.clone(),
            covariates,
            sampling_weight: 1.0,
        }
    }

    /// Sample `replicate`: every cell draws its `n` units and noise.
    pub fn generate(&self, replicate: u64) -> Result<Dataset> {
        let mut inputs = Vec::new();
        for (a, area) in self.cfg.areas.iter().enumerate() {
            for g in Gender::BOTH {
                let cell = area.cell(g);
                let index = (replicate << 16) | ((a as u64) << 1) | g.index() as u64;
                let mut rng = seed::stream_rng(self.cfg.seed, Stream::Generate, index);
                let sd = cell.sigma2.sqrt();
                for _ in 0..cell.n {
                    let u = self.sources[a][g.index()].draw(&mut rng);
                    let e: f64 = rng.sample(StandardNormal);
                    inputs.push(self.record(area, g, u, u.linear_predictor(&cell.beta) + sd * e));
                }
            }
        }
        Dataset::from_inputs(self.schema.clone(), inputs)
    }
}

fn schema_without_sector(s: &VariableSchema) -> VariableSchema {
    VariableSchema::new(s.variables.iter().filter(|v| v.name != "sector").cloned().collect())
        .expect("subset of a valid schema")
}

pub fn generate(cfg: &GeneratorConfig, replicate: u64) -> Result<Dataset> {
    Generator::new(cfg)?.generate(replicate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub area: String,
    pub ew_m: f64,
    pub ew_w: f64,
    pub delta: f64,
    pub q: f64,
    pub u: f64,
    pub gpg: f64,
    pub gpg_q: f64,
    pub gpg_u: f64,
    /// Monte Carlo standard errors from ten population batches.
    pub se_gpg: f64,
    pub se_gpg_q: f64,
    pub se_gpg_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub population_size: usize,
    pub rows: Vec<TruthRow>,
}

impl TruthTable {
    pub fn get(&self, area: &str) -> Option<&TruthRow> {
        self.rows.iter().find(|r| r.area == area)
    }
}

const BATCHES: usize = 10;

struct CellTotals {
    x: [f64; 8],
    wage: f64,
    n: usize,
}

fn population_totals(source: &Source, cell: &GenderCell, size: usize, rng: &mut seed::Rng) -> Vec<CellTotals> {
    let sd = cell.sigma2.sqrt();
    let per = size.div_ceil(BATCHES);
    (0..BATCHES)
        .map(|_| {
            let mut t = CellTotals {
                x: [0.0; 8],
                wage: 0.0,
                n: per,
            };
            for _ in 0..per {
                let u = source.draw(rng);
                let row = u.design_row();
                for (acc, v) in t.x.iter_mut().zip(row) {
                    *acc += v;
                }
                let e: f64 = rng.sample(StandardNormal);
                t.wage += (u.linear_predictor(&cell.beta) + sd * e).exp();
            }
            t
        })
        .collect()
}

fn truth_parts(m: &[&CellTotals], w: &[&CellTotals], bm: &[f64; 8], bw: &[f64; 8]) -> (f64, f64, f64, f64, f64, f64) {
    let mean = |ts: &[&CellTotals]| {
        let n: usize = ts.iter().map(|t| t.n).sum();
        let mut x = [0.0; 8];
        let mut wage = 0.0;
        for t in ts {
            for j in 0..8 {
                x[j] += t.x[j];
            }
            wage += t.wage;
        }
        (x.map(|v| v / n as f64), wage / n as f64)
    };
    let (xm, ew_m) = mean(m);
    let (xw, ew_w) = mean(w);
    let q: f64 = (0..8).map(|j| (xm[j] - xw[j]) * bm[j]).sum();
    let u: f64 = (0..8).map(|j| xw[j] * (bm[j] - bw[j])).sum();
    let delta = q + u;
    let gpg = (ew_m - ew_w) / ew_m;
    (ew_m, ew_w, q, u, delta, gpg)
}

/// True per-area gap and split from a simulated population of
/// `population_size` units per area-gender cell, using the true
/// coefficients of each cell.
pub fn compute_truth(cfg: &GeneratorConfig, population_size: usize, seed: u64) -> Result<TruthTable> {
    if population_size < 100_000 {
        return Err(Error::InvalidArgument(format!(
            "truth needs at least 100000 units per cell, got {population_size}"
        )));
    }
    let generator = Generator::new(cfg)?;
    let rows = cfg
        .areas
        .par_iter()
        .enumerate()
        .map(|(a, area)| {
            let mut rng_m = seed::stream_rng(seed, Stream::Truth, 2 * a as u64);
            let mut rng_w = seed::stream_rng(seed, Stream::Truth, 2 * a as u64 + 1);
            let tm = population_totals(&generator.sources[a][0], &area.men, population_size, &mut rng_m);
            let tw = population_totals(&generator.sources[a][1], &area.women, population_size, &mut rng_w);
            let all_m: Vec<&CellTotals> = tm.iter().collect();
            let all_w: Vec<&CellTotals> = tw.iter().collect();
            let (ew_m, ew_w, q, u, delta, gpg) = truth_parts(&all_m, &all_w, &area.men.beta, &area.women.beta);
            let ratio = |part: f64| gpg * part / delta;
            let batches: Vec<(f64, f64, f64)> = (0..BATCHES)
                .map(|b| {
                    let (_, _, q, u, d, g) = truth_parts(&[&tm[b]], &[&tw[b]], &area.men.beta, &area.women.beta);
                    (g, g * q / d, g * u / d)
                })
                .collect();
            // batch-means standard error of the full-population estimate
            let se = |f: fn(&(f64, f64, f64)) -> f64| {
                let v: Vec<f64> = batches.iter().map(f).collect();
                let m = v.iter().sum::<f64>() / BATCHES as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (BATCHES as f64 - 1.0);
                (var / BATCHES as f64).sqrt()
            };
            TruthRow {
                area: area.code.clone(),
                ew_m,
                ew_w,
                delta,
                q,
                u,
                gpg,
                gpg_q: ratio(q),
                gpg_u: gpg - ratio(q),
                se_gpg: se(|b| b.0),
                se_gpg_q: se(|b| b.1),
                se_gpg_u: se(|b| b.2),
            }
        })
        .collect();
    Ok(TruthTable {
        population_size: population_size.div_ceil(BATCHES) * BATCHES,
        rows,
    })
}

/// Running squared errors and interval hits for one estimator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Accumulator {
    /// per area: (Σ err_q², Σ err_u², hits_q, hits_u, count)
    areas: BTreeMap<String, (f64, f64, usize, usize, usize)>,
    pub missing: usize,
}

fn covers(ci: Option<(f64, f64)>, truth: f64) -> bool {
    ci.is_some_and(|(lo, hi)| lo <= truth && truth <= hi)
}

impl Accumulator {
    pub fn add(
        &mut self,
        area: &str,
        estimate: (f64, f64),
        ci: (Option<(f64, f64)>, Option<(f64, f64)>),
        truth: (f64, f64),
    ) {
        let e = self.areas.entry(area.to_string()).or_default();
        e.0 += (estimate.0 - truth.0).powi(2);
        e.1 += (estimate.1 - truth.1).powi(2);
        e.2 += covers(ci.0, truth.0) as usize;
        e.3 += covers(ci.1, truth.1) as usize;
        e.4 += 1;
    }

    pub fn add_decomposition(&mut self, d: &Decomposition, truth: &TruthTable) {
        for e in &d.estimates {
            let (Some(t), Some(q), Some(u)) = (truth.get(&e.area), e.gpg_q, e.gpg_u) else {
                self.missing += 1;
                continue;
            };
            self.add(&e.area, (q, u), (e.ci_q, e.ci_u), (t.gpg_q, t.gpg_u));
        }
    }

    /// Mean over areas of the per-area EMSE, for Q and U.
    pub fn emse(&self) -> (f64, f64) {
        let n = self.areas.len() as f64;
        let (q, u) = self
            .areas
            .values()
            .fold((0.0, 0.0), |acc, v| (acc.0 + v.0 / v.4 as f64, acc.1 + v.1 / v.4 as f64));
        (q / n, u / n)
    }

    /// Percentage of area-replicate intervals containing the truth.
    pub fn coverage(&self) -> (f64, f64) {
        let total: usize = self.areas.values().map(|v| v.4).sum();
        let hq: usize = self.areas.values().map(|v| v.2).sum();
        let hu: usize = self.areas.values().map(|v| v.3).sum();
        (100.0 * hq as f64 / total as f64, 100.0 * hu as f64 / total as f64)
    }

    pub fn cells(&self) -> usize {
        self.areas.values().map(|v| v.4).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub replicates: usize,
    /// Split iterations per decomposition.
    pub iterations: usize,
    /// Bootstrap replicates per candidate in selection.
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Covariates removed from every working model in the second scenario.
    pub drop: Vec<String>,
    pub population_size: usize,
    /// Decompose with every candidate, not only the baseline and the
    /// selected model.
    pub decompose_all: bool,
}

impl ExperimentOptions {
    pub fn new(seed: u64) -> Self {
        ExperimentOptions {
            replicates: 100,
            iterations: 200,
            reps: 300,
            alpha: 0.05,
            seed,
            drop: vec!["education".into()],
            population_size: 100_000,
            decompose_all: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub label: String,
    pub emse_q: f64,
    pub emse_u: f64,
    pub coverage_q: f64,
    pub coverage_u: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub dropped: Vec<String>,
    pub rows: Vec<EstimatorRow>,
    /// Winner counts of the xGAIC selection.
    pub selections: BTreeMap<String, usize>,
    pub failed_replicates: usize,
    pub failures: Vec<String>,
}

impl ScenarioResult {
    pub fn row(&self, label: &str) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub truth: TruthTable,
    pub replicates: usize,
    pub full: ScenarioResult,
    pub dropped: Option<ScenarioResult>,
}

pub const SELECTED_LABEL: &str = "XG";

/// Estimator labels in table order: baseline, candidates (when all are
/// decomposed), XG.
pub fn estimator_labels(set: &CandidateSet, decompose_all: bool) -> Vec<String> {
    let models = set.models.iter().filter(|_| decompose_all).map(|m| m.label.clone());
    std::iter::once(set.baseline().label)
        .chain(models)
        .chain(std::iter::once(SELECTED_LABEL.to_string()))
        .collect()
}

struct ScenarioOutcome {
    decompositions: Vec<Decomposition>,
    winner: String,
}

fn run_scenario(
    ds: &Dataset,
    baseline: &ModelSpec,
    models: &[ModelSpec],
    opts: &ExperimentOptions,
    replicate: u64,
) -> Result<ScenarioOutcome> {
    let dopts = DecomposeOptions {
        iterations: opts.iterations,
        alpha: opts.alpha,
        seed: seed::derive(opts.seed, Stream::Decompose, replicate),
        bias_correction: true,
        include_global: false,
    };
    let mut decompositions = Vec::with_capacity(models.len() + 2);
    decompositions.push(decompose_gpg(
        ds,
        baseline,
        &DecomposeOptions {
            bias_correction: false,
            ..dopts
        },
    )?);
    if opts.decompose_all {
        for m in models {
            decompositions.push(decompose_gpg(ds, m, &dopts)?);
        }
    }
    let sel = select_model(ds, models, opts.reps, seed::derive(opts.seed, Stream::Selection, replicate))?;
    let w = models.iter().position(|m| m.label == sel.winner).expect("winner is a candidate");
    let selected = if opts.decompose_all {
        decompositions[w + 1].clone()
    } else {
        decompose_gpg(ds, &models[w], &dopts)?
    };
    decompositions.push(selected);
    Ok(ScenarioOutcome {
        decompositions,
        winner: sel.winner,
    })
}

fn summarize(
    labels: &[String],
    outcomes: &[std::result::Result<ScenarioOutcome, String>],
    truth: &TruthTable,
    dropped: Vec<String>,
) -> Result<ScenarioResult> {
    let mut acc = vec![Accumulator::default(); labels.len()];
    let mut selections = BTreeMap::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.iter().enumerate() {
        match o {
            Ok(o) => {
                for (a, d) in acc.iter_mut().zip(&o.decompositions) {
                    a.add_decomposition(d, truth);
                }
                *selections.entry(o.winner.clone()).or_insert(0) += 1;
            }
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    if failures.len() * 10 > outcomes.len() {
        return Err(Error::TooManyFailures {
            what: "simulation replicates".into(),
            failed: failures.len(),
            attempted: outcomes.len(),
        });
    }
    let rows = labels
        .iter()
        .zip(&acc)
        .map(|(l, a)| {
            let (eq, eu) = a.emse();
            let (cq, cu) = a.coverage();
            EstimatorRow {
                label: l.clone(),
                emse_q: eq,
                emse_u: eu,
                coverage_q: cq,
                coverage_u: cu,
                cells: a.cells(),
            }
        })
        .collect();
    Ok(ScenarioResult {
        dropped,
        rows,
        selections,
        failed_replicates: failures.len(),
        failures,
    })
}

/// Progress callback: (replicates finished, total).
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Runs every estimator on `replicates` generated samples and scores them
/// against the population truth, with and without the dropped covariates.
pub fn run_experiment(
    cfg: &GeneratorConfig,
    set: &CandidateSet,
    opts: &ExperimentOptions,
    progress: Option<Progress>,
) -> Result<ExperimentResult> {
    set.validate()?;
    if opts.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be at least 1".into()));
    }
    // the experiment seed decides the samples; the population stays fixed
    let sampled = GeneratorConfig {
        seed: seed::derive(opts.seed, Stream::Replicate, cfg.seed),
        ..cfg.clone()
    };
    let generator = Generator::new(&sampled)?;
    let truth = compute_truth(cfg, opts.population_size, seed::derive(opts.seed, Stream::Truth, 0))?;
    let labels = estimator_labels(set, opts.decompose_all);
    let baseline = set.baseline();
    let dropped_models: Vec<ModelSpec> = set.models.iter().map(|m| m.without(&opts.drop)).collect();
    let dropped_baseline = baseline.without(&opts.drop);
    let done = std::sync::atomic::AtomicUsize::new(0);

    type Pair = (
        std::result::Result<ScenarioOutcome, String>,
        Option<std::result::Result<ScenarioOutcome, String>>,
    );
    let outcomes: Vec<Pair> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let r = r as u64;
            let ds = generator.generate(r);
            let full = ds
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|ds| run_scenario(ds, &baseline, &set.models, opts, r).map_err(|e| e.to_string()));
            let dropped = (!opts.drop.is_empty()).then(|| {
                ds.as_ref().map_err(|e| e.to_string()).and_then(|ds| {
                    run_scenario(ds, &dropped_baseline, &dropped_models, opts, r).map_err(|e| e.to_string())
                })
            });
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if let Some(p) = progress {
                p(n, opts.replicates);
            }
            (full, dropped)
        })
        .collect();
    let (full, dropped): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let full = summarize(&labels, &full, &truth, Vec::new())?;
    let dropped = if opts.drop.is_empty() {
        None
    } else {
        let d: Vec<_> = dropped.into_iter().map(|d| d.expect("scenario ran")).collect();
        Some(summarize(&labels, &d, &truth, opts.drop.clone())?)
    };
    Ok(ExperimentResult {
        truth,
        replicates: opts.replicates,
        full,
        dropped,
    })
}

fn num(v: f64) -> String {
    v.to_string()
}

impl ExperimentResult {
    fn table<W: std::io::Write>(&self, out: W, pick: fn(&EstimatorRow) -> (f64, f64)) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["estimator".to_string(), "gpg_q".into(), "gpg_u".into()];
        if self.dropped.is_some() {
            header.push("gpg_q_without".into());
            header.push("gpg_u_without".into());
        }
        w.write_record(&header)?;
        for (i, row) in self.full.rows.iter().enumerate() {
            let (q, u) = pick(row);
            let mut rec = vec![row.label.clone(), num(q), num(u)];
            if let Some(d) = &self.dropped {
                let (q, u) = pick(&d.rows[i]);
                rec.push(num(q));
                rec.push(num(u));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// EMSE table: one row per estimator, GPG_Q/GPG_U with and without the
    /// dropped covariates.
    pub fn write_emse<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.table(out, |r| (r.emse_q, r.emse_u))
    }

    /// Coverage table (percent), same layout as the EMSE table.
    pub fn write_coverage<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.table(out, |r| (r.coverage_q, r.coverage_u))
    }

    pub fn write_selection<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "model", "count"])?;
        let scenarios = std::iter::once(("full", &self.full)).chain(self.dropped.as_ref().map(|d| ("without", d)));
        for (name, s) in scenarios {
            for (m, c) in &s.selections {
                w.write_record([name, m.as_str(), &c.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_truth<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["area", "gpg", "gpg_q", "gpg_u", "delta", "q", "u"])?;
        for r in &self.truth.rows {
            w.write_record([
                r.area.clone(),
                num(r.gpg),
                num(r.gpg_q),
                num(r.gpg_u),
                num(r.delta),
                num(r.q),
                num(r.u),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
