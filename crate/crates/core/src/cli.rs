//! Command-line front end: argument parsing, validation, artifact writing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{encode_design, load_dataset, Dataset, Gender, VariableSchema};
use crate::decomposition::{decompose_gpg, DecomposeOptions, DEFAULT_ITERATIONS};
use crate::error::{Error, ErrorClass, Result};
use crate::lmm::{fit_reml, FitSummary};
use crate::model::{CandidateSet, ModelSpec};
use crate::selection::{select_model, SelectionResult, DEFAULT_REPS};
use crate::simulation::{self, ExperimentOptions, GeneratorConfig};

#[derive(Debug, Parser)]
#[command(name = "sae-gpg", version, about = "Small-area gender pay gap decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit candidate models by REML on both genders.
    Fit(FitArgs),
    /// Rank candidates by xGAIC on the larger gender sample.
    Select(SelectArgs),
    /// Decompose every area's pay gap with bias correction and intervals.
    Decompose(DecomposeArgs),
    /// Run the simulation study against a synthetic population.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Inputs {
    /// Unit-level CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Variable schema JSON.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Candidate model JSON.
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    /// Fit only this candidate.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long = "drop", value_name = "VARIABLE")]
    pub drop: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "drop", value_name = "VARIABLE")]
    pub drop: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    /// Candidate to use; without it the xGAIC winner is used.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Bootstrap replicates for selection when no model is given.
    #[arg(long, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the split-sample bias correction.
    #[arg(long)]
    pub no_bias_correction: bool,
    /// Keep per-split records in the JSON output.
    #[arg(long)]
    pub trace: bool,
    #[arg(long = "drop", value_name = "VARIABLE")]
    pub drop: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Generator JSON; defaults to the bundled thirty-area generator.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Candidate model JSON; defaults to the bundled grid.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Units per area-gender cell in the truth population.
    #[arg(long, default_value_t = 100_000)]
    pub population: usize,
    /// Decompose only with the baseline and the selected model.
    #[arg(long)]
    pub selected_only: bool,
    #[arg(long = "drop", value_name = "VARIABLE")]
    pub drop: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Select(_) => "select",
            Command::Decompose(_) => "decompose",
            Command::Simulate(_) => "simulate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Fit(a) => &a.common,
            Command::Select(a) => &a.common,
            Command::Decompose(a) => &a.common,
            Command::Simulate(a) => &a.common,
        }
    }

    fn config_json(&self) -> serde_json::Value {
        let v = match self {
            Command::Fit(a) => serde_json::to_value(a),
            Command::Select(a) => serde_json::to_value(a),
            Command::Decompose(a) => serde_json::to_value(a),
            Command::Simulate(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }
}

fn check_file(problems: &mut Vec<String>, flag: &str, path: &Option<PathBuf>, required: bool) {
    match path {
        None if required => problems.push(format!("--{flag} is required")),
        Some(p) if !p.is_file() => problems.push(format!("--{flag}: no such file `{}`", p.display())),
        _ => {}
    }
}

fn check_inputs(problems: &mut Vec<String>, i: &Inputs) {
    check_file(problems, "data", &i.data, true);
    check_file(problems, "schema", &i.schema, true);
    check_file(problems, "models", &i.models, true);
}

fn check_seed(problems: &mut Vec<String>, seed: Option<u64>) {
    if seed.is_none() {
        problems.push("--seed is required for reproducibility".into());
    }
}

fn check_reps(problems: &mut Vec<String>, reps: usize) {
    if reps < 50 {
        problems.push(format!("--reps must be at least 50, got {reps}"));
    }
}

fn check_alpha(problems: &mut Vec<String>, alpha: f64) {
    if !(alpha > 0.0 && alpha < 1.0) {
        problems.push(format!("--alpha must lie in (0, 1), got {alpha}"));
    }
}

fn check_iterations(problems: &mut Vec<String>, iterations: usize) {
    if iterations < 2 {
        problems.push(format!("--iterations must be at least 2, got {iterations}"));
    }
}

/// Every problem with the arguments, not just the first.
pub fn validate(cmd: &Command) -> Result<()> {
    let mut p = Vec::new();
    let common = cmd.common();
    if common.out.is_none() {
        p.push("--out is required".into());
    }
    if common.threads == Some(0) {
        p.push("--threads must be at least 1".into());
    }
    match cmd {
        Command::Fit(a) => check_inputs(&mut p, &a.inputs),
        Command::Select(a) => {
            check_inputs(&mut p, &a.inputs);
            check_seed(&mut p, a.seed);
            check_reps(&mut p, a.reps);
        }
        Command::Decompose(a) => {
            check_inputs(&mut p, &a.inputs);
            check_seed(&mut p, a.seed);
            check_iterations(&mut p, a.iterations);
            check_alpha(&mut p, a.alpha);
            if a.model.is_none() {
                check_reps(&mut p, a.reps);
            }
        }
        Command::Simulate(a) => {
            check_file(&mut p, "generator", &a.generator, false);
            check_file(&mut p, "models", &a.models, false);
            check_seed(&mut p, a.seed);
            check_iterations(&mut p, a.iterations);
            check_reps(&mut p, a.reps);
            check_alpha(&mut p, a.alpha);
            if a.replicates == 0 {
                p.push("--replicates must be at least 1".into());
            }
            if a.population < 100_000 {
                p.push(format!("--population must be at least 100000, got {}", a.population));
            }
        }
    }
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Collects artifacts and writes them with a manifest at the end.
struct Artifacts {
    dir: PathBuf,
    written: Vec<FileDigest>,
    inputs: Vec<FileDigest>,
    failures: serde_json::Map<String, serde_json::Value>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
            failures: serde_json::Map::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn failure(&mut self, key: &str, count: usize) {
        self.failures.insert(key.into(), count.into());
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: serde_json::Value,
    config_sha256: String,
    seed: Option<u64>,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    failures: &'a serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    threads: usize,
}

fn load_inputs(i: &Inputs, art: &mut Artifacts) -> Result<(Dataset, CandidateSet)> {
    let (data, schema, models) = (
        i.data.as_deref().expect("validated"),
        i.schema.as_deref().expect("validated"),
        i.models.as_deref().expect("validated"),
    );
    for p in [data, schema, models] {
        art.input(p)?;
    }
    let schema = VariableSchema::from_path(schema)?;
    let set = CandidateSet::from_path(models)?;
    eprintln!("reading {}", data.display());
    let ds = load_dataset(data, &schema)?;
    Ok((ds, set))
}

fn pick(set: &CandidateSet, label: &Option<String>, drop: &[String]) -> Result<Vec<ModelSpec>> {
    let models = match label {
        Some(l) => vec![set
            .get(l)
            .cloned()
            .ok_or_else(|| Error::Config(vec![format!("--model: no candidate labelled `{l}`")]))?],
        None => set.models.clone(),
    };
    Ok(models.into_iter().map(|m| m.without(drop)).collect())
}

#[derive(Serialize)]
struct FitRecord {
    label: String,
    men: FitSummary,
    women: FitSummary,
}

fn run_fit(a: &FitArgs, art: &mut Artifacts) -> Result<()> {
    let (ds, set) = load_inputs(&a.inputs, art)?;
    let mut out = Vec::new();
    for m in pick(&set, &a.model, &a.drop)? {
        eprintln!("fitting {}", m.label);
        let fit = |g| -> Result<FitSummary> { Ok(FitSummary::from(&fit_reml(&encode_design(&ds, &m, g)?)?)) };
        out.push(FitRecord {
            label: m.label.clone(),
            men: fit(Gender::Men)?,
            women: fit(Gender::Women)?,
        });
    }
    art.json("fit.json", &out)
}

fn run_selection(ds: &Dataset, models: &[ModelSpec], reps: usize, seed: u64, art: &mut Artifacts) -> Result<SelectionResult> {
    eprintln!("scoring {} candidates with {reps} bootstrap replicates", models.len());
    let sel = select_model(ds, models, reps, seed)?;
    art.failure("selection_candidates", sel.failures.len());
    art.failure(
        "xgdf_replicates",
        sel.candidates.iter().map(|c| c.replicates_failed).sum(),
    );
    art.json("selection.json", &sel)?;
    art.write("selection.txt", sel.table().as_bytes())?;
    Ok(sel)
}

fn run_select(a: &SelectArgs, art: &mut Artifacts) -> Result<()> {
    let (ds, set) = load_inputs(&a.inputs, art)?;
    let models = pick(&set, &None, &a.drop)?;
    let sel = run_selection(&ds, &models, a.reps, a.seed.expect("validated"), art)?;
    print!("{}", sel.table());
    Ok(())
}

fn run_decompose(a: &DecomposeArgs, art: &mut Artifacts) -> Result<()> {
    let (ds, set) = load_inputs(&a.inputs, art)?;
    let seed = a.seed.expect("validated");
    let spec = match &a.model {
        Some(_) => pick(&set, &a.model, &a.drop)?.remove(0),
        None => {
            let models = pick(&set, &None, &a.drop)?;
            let sel = run_selection(&ds, &models, a.reps, crate::seed::derive(seed, crate::seed::Stream::Selection, 0), art)?;
            models.into_iter().find(|m| m.label == sel.winner).expect("winner is a candidate")
        }
    };
    eprintln!("decomposing with {} over {} splits", spec.label, a.iterations);
    let opts = DecomposeOptions {
        iterations: a.iterations,
        alpha: a.alpha,
        seed,
        bias_correction: !a.no_bias_correction,
        include_global: true,
    };
    let mut d = decompose_gpg(&ds, &spec, &opts)?;
    art.failure("discarded_splits", d.attempts - d.trace.len());
    art.failure("excluded_areas", d.excluded.len());
    art.failure("unstable_areas", d.estimates.iter().filter(|e| e.unstable).count());
    art.csv("decomposition.csv", |b| d.write_csv(b))?;
    if !a.trace {
        d.trace.clear();
    }
    art.json("decomposition.json", &d)
}

fn run_simulate(a: &SimulateArgs, art: &mut Artifacts) -> Result<()> {
    let cfg = match &a.generator {
        Some(p) => {
            art.input(p)?;
            GeneratorConfig::from_path(p)?
        }
        None => GeneratorConfig::full(),
    };
    let set = match &a.models {
        Some(p) => {
            art.input(p)?;
            CandidateSet::from_path(p)?
        }
        None => simulation::candidates(),
    };
    let opts = ExperimentOptions {
        replicates: a.replicates,
        iterations: a.iterations,
        reps: a.reps,
        alpha: a.alpha,
        seed: a.seed.expect("validated"),
        drop: a.drop.clone(),
        population_size: a.population,
        decompose_all: !a.selected_only,
    };
    eprintln!("simulating {} replicates over {} areas", a.replicates, cfg.areas.len());
    let progress = |done: usize, total: usize| eprint!("\rreplicate {done}/{total}");
    let res = simulation::run_experiment(&cfg, &set, &opts, Some(&progress))?;
    eprintln!();
    art.failure("replicates_full", res.full.failed_replicates);
    if let Some(d) = &res.dropped {
        art.failure("replicates_dropped", d.failed_replicates);
    }
    art.csv("emse.csv", |b| res.write_emse(b))?;
    art.csv("coverage.csv", |b| res.write_coverage(b))?;
    art.csv("selection.csv", |b| res.write_selection(b))?;
    art.csv("truth.csv", |b| res.write_truth(b))?;
    art.json("simulation.json", &res)
}

/// Runs one command and writes its artifacts, manifest and timing.
pub fn run(cmd: &Command) -> Result<()> {
    validate(cmd)?;
    let common = cmd.common();
    let threads = common.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} worker threads: {e}")))?;
    let mut art = Artifacts::new(common.out.as_deref().expect("validated"))?;
    let start = Instant::now();
    pool.install(|| match cmd {
        Command::Fit(a) => run_fit(a, &mut art),
        Command::Select(a) => run_select(a, &mut art),
        Command::Decompose(a) => run_decompose(a, &mut art),
        Command::Simulate(a) => run_simulate(a, &mut art),
    })?;
    let wall = start.elapsed().as_secs_f64();

    let config = cmd.config_json();
    let seed = config.get("seed").and_then(|s| s.as_u64());
    let canonical = serde_json::to_string(&serde_json::json!({ "command": cmd.name(), "config": config }))?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: cmd.name(),
        config_sha256: sha256_hex(canonical.as_bytes()),
        config,
        seed,
        inputs: &art.inputs,
        outputs: &art.written,
        failures: &art.failures,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let dir = art.dir.clone();
    std::fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    let timing = serde_json::to_string_pretty(&Timing {
        wall_seconds: wall,
        threads,
    })? + "\n";
    std::fs::write(dir.join("timing.json"), timing).map_err(|e| Error::io(dir.join("timing.json"), e))?;
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

/// Machine-readable error report.
pub fn error_report(e: &Error) -> serde_json::Value {
    let class = match e.class() {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    };
    let problems = match e {
        Error::Config(p) => p.clone(),
        other => vec![other.to_string()],
    };
    serde_json::json!({ "error": class, "exit_code": exit_code(e), "problems": problems })
}
