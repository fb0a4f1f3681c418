//! Command-line front end. `main` only parses arguments and reports errors;
//! everything else lives here so it can be driven from tests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{cross_validate_lambda, eier, lambda_max, roc_curve};
use crate::experiment::{run_benchmark, BenchmarkConfig};
use crate::io::{
    fmt_f64, graphml, load_matrix_csv, read_json, save_adjacency_csv, save_matrix_csv, to_adjacency, write_atomic,
    write_json, EstimateFile, RunManifest,
};
use crate::kernel::{KernelSpec, Ridge};
use crate::model::{Dataset, ScoreRule, SolverConfig, SolverKind};
use crate::par::Execution;
use crate::solve::Method;
use crate::synth::{generate_dataset, reference_seed_matrix, Generator, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "netsem", version, about = "Sparse nonlinear network topology inference")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "NETSEM_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic instance: Y.csv, X.csv, A.csv, meta.json.
    Simulate(SimulateArgs),
    /// Estimate the network from Y and X; writes estimate.json.
    Infer(InferArgs),
    /// Edge identification error rate of an estimate against the truth.
    Eval(EvalArgs),
    /// ROC curve of edge scores against the truth.
    Roc(RocArgs),
    /// k-fold cross-validation over a lambda grid.
    Cv(CvArgs),
    /// EIER versus measurement ratio over repeated synthetic runs.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// `paper` (the built-in 4x4 seed) or a CSV file holding a square 0/1 seed matrix.
    #[arg(long, default_value = "paper")]
    pub seed_matrix: String,
    #[arg(long, default_value_t = 3)]
    pub kron_power: u32,
    /// Edge probability multiplying each Kronecker entry.
    #[arg(long, default_value_t = 0.3)]
    pub edge_prob: f64,
    /// `gauss:S2` or `poly:P` (kernel model), or `polysem:P` (polynomial model).
    #[arg(long, default_value = "gauss:0.01")]
    pub generator: String,
    #[arg(long, default_value_t = -0.2, allow_negative_numbers = true)]
    pub coeff_min: f64,
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    pub coeff_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_std: f64,
    /// Smallest allowed |b_jj|.
    #[arg(long, default_value_t = 0.05)]
    pub b_min: f64,
}

impl SynthArgs {
    pub fn to_config(&self, samples: usize, rng_seed: u64) -> Result<SynthConfig> {
        let s0 = if self.seed_matrix == "paper" {
            reference_seed_matrix()
        } else {
            let p = Path::new(&self.seed_matrix);
            to_adjacency(&load_matrix_csv(p, None)?.data, p)?
        };
        let cfg = SynthConfig {
            seed_matrix: s0.row_iter().map(|r| r.iter().copied().collect()).collect(),
            kron_power: self.kron_power,
            edge_prob_scale: self.edge_prob,
            samples,
            generator: parse_generator(&self.generator)?,
            coeff_range: (self.coeff_min, self.coeff_max),
            noise_std: self.noise_std,
            b_min: self.b_min,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_generator(s: &str) -> Result<Generator> {
    match s.strip_prefix("polysem:") {
        Some(p) => Ok(Generator::Polynomial {
            order: p
                .parse()
                .map_err(|_| Error::Config(format!("bad polynomial order `{p}`")))?,
        }),
        None => Ok(Generator::Kernel {
            kernel: KernelSpec::parse(s)?,
        }),
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// ADMM penalty parameter.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    /// Edge threshold on the scores.
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    /// `native` or `kernel_weighted`.
    #[arg(long, default_value = "native")]
    pub score_rule: String,
    /// Gram diagonal loading, relative to trace/M unless --ridge-absolute.
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
    #[arg(long)]
    pub ridge_absolute: bool,
    /// Keep per-iteration objective values in the output meta.
    #[arg(long)]
    pub trace: bool,
}

impl SolverArgs {
    fn to_config(&self, rng_seed: u64, execution: Execution) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            lambda: self.lambda,
            rho: self.rho,
            tau: self.threshold,
            max_iters: self.max_iters,
            tol: self.tol,
            ridge: if self.ridge_absolute {
                Ridge::Absolute(self.ridge)
            } else {
                Ridge::Relative(self.ridge)
            },
            score_rule: self.score_rule.parse::<ScoreRule>()?,
            rng_seed,
            execution,
            record_trace: self.trace,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Endogenous measurements, samples by nodes.
    #[arg(long)]
    pub y: PathBuf,
    /// Exogenous inputs, same shape as Y.
    #[arg(long)]
    pub x: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let y = load_matrix_csv(&self.y, None)?;
        let x = load_matrix_csv(&self.x, Some(y.data.shape()))?;
        let ds = Dataset::new(y.data, x.data)?;
        match y.labels {
            Some(l) => ds.with_labels(l),
            None => Ok(ds),
        }
    }

    fn record(&self, manifest: &mut RunManifest) -> Result<()> {
        manifest.add_input(&self.y)?;
        manifest.add_input(&self.x)
    }
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// admm, pg, apg, poly or linear.
    #[arg(long, default_value = "apg")]
    pub solver: String,
    /// Kernel for admm/pg/apg: `poly:P` or `gauss:S2`.
    #[arg(long, default_value = "poly:2")]
    pub kernel: String,
    /// Polynomial order for `poly`.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
}

impl MethodArgs {
    fn method(&self) -> Result<Method> {
        let solver: SolverKind = self.solver.parse()?;
        Ok(match solver {
            SolverKind::Linear => Method::linear(),
            SolverKind::Poly => {
                if self.order == 0 {
                    return Err(Error::Config("polynomial order must be at least 1".into()));
                }
                Method::poly(self.order)
            }
            _ => Method::kernel(solver, KernelSpec::parse(&self.kernel)?),
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Estimate file to write.
    #[arg(long, default_value = "estimate.json")]
    pub out: PathBuf,
    /// Also export the directed graph as GraphML.
    #[arg(long)]
    pub graphml: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// True adjacency CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// estimate.json or an adjacency CSV.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Metric table to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RocArgs {
    #[arg(long)]
    pub truth: PathBuf,
    /// estimate.json or a scores CSV.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "roc.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Explicit lambda values.
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        conflicts_with = "grid_size"
    )]
    pub grid: Vec<f64>,
    /// Number of log-spaced values between 1e-3 and 1 times lambda_max.
    #[arg(long, default_value_t = 8)]
    pub grid_size: usize,
    /// Fold assignment seed.
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    #[arg(long, default_value = "cv.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    /// Full configuration as JSON; replaces every other benchmark flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Method labels such as `apg[gauss:0.01]`, `poly[2]`, `linear`.
    #[arg(long, value_delimiter = ',', default_value = "apg[gauss:0.01],linear")]
    pub methods: Vec<String>,
    /// lambda grid as fractions of each instance's lambda_max.
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03,0.1,0.3")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("output".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn finish_manifest(mut manifest: RunManifest, path: &Path, start: Instant) -> Result<()> {
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(path, &manifest)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let args: Vec<String> = std::iter::once("netsem".to_string())
        .chain(std::env::args().skip(1))
        .collect();
    match &cli.command {
        Command::Simulate(a) => simulate(a, args, out),
        Command::Infer(a) => infer(a, exec, args, out),
        Command::Eval(a) => evaluate(a, out),
        Command::Roc(a) => roc(a, out),
        Command::Cv(a) => cv(a, exec, args, out),
        Command::Benchmark(a) => benchmark(a, exec, args, out),
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn simulate(a: &SimulateArgs, args: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let cfg = a.synth.to_config(a.samples, a.rng_seed)?;
    let (ds, truth) = generate_dataset(&cfg)?;
    create_dir(&a.out)?;
    save_matrix_csv(&a.out.join("Y.csv"), ds.y(), None)?;
    save_matrix_csv(&a.out.join("X.csv"), ds.x(), None)?;
    save_adjacency_csv(&a.out.join("A.csv"), &truth.adjacency)?;
    let meta = json!({
        "nodes": ds.nodes(),
        "samples": ds.samples(),
        "edges": truth.adjacency.iter().filter(|&&v| v == 1).count(),
        "b_diag": truth.b_diag.iter().copied().collect::<Vec<_>>(),
        "config": cfg,
        "manifest": "manifest.json",
    });
    write_json(&a.out.join("meta.json"), &meta)?;

    let mut manifest = RunManifest::new("simulate", to_value(&cfg)?, cfg.rng_seed);
    manifest.args = args;
    manifest.outputs = ["Y.csv", "X.csv", "A.csv", "meta.json"].map(String::from).to_vec();
    let path = a.out.join("manifest.json");
    finish_manifest(manifest, &path, start)?;
    say(out, path.display().to_string())
}

pub fn infer(a: &InferArgs, exec: Execution, args: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let ds = a.data.load()?;
    let method = a.method.method()?;
    let cfg = a.solver.to_config(a.rng_seed, exec)?;
    let est = method.solve(&ds, &cfg)?;

    let manifest_path = sibling_manifest(&a.out);
    let file = EstimateFile::from_estimate(&est, ds.labels(), &file_name(&manifest_path));
    write_json(&a.out, &file)?;
    let mut outputs = vec![file_name(&a.out)];
    if let Some(g) = &a.graphml {
        write_atomic(g, graphml(&est.adjacency, &est.scores, ds.labels()).as_bytes())?;
        outputs.push(g.display().to_string());
    }

    let mut manifest = RunManifest::new("infer", json!({ "method": method, "solver": cfg }), cfg.rng_seed);
    manifest.args = args;
    a.data.record(&mut manifest)?;
    manifest.outputs = outputs;
    manifest.convergence = Some(json!({
        "iterations": est.meta.iterations,
        "objective": est.meta.objective,
        "converged": est.meta.converged,
    }));
    finish_manifest(manifest, &manifest_path, start)?;
    say(
        out,
        format!(
            "{}: {} edges, objective {}, {} iterations{}",
            a.out.display(),
            est.edge_count(),
            fmt_f64(est.meta.objective),
            est.meta.iterations,
            if est.meta.converged { "" } else { " (not converged)" }
        ),
    )
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn load_truth(p: &Path) -> Result<DMatrix<u8>> {
    to_adjacency(&load_matrix_csv(p, None)?.data, p)
}

pub fn evaluate(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let truth = load_truth(&a.truth)?;
    let est = if is_json(&a.estimate) {
        EstimateFile::load(&a.estimate)?.adjacency_matrix()?
    } else {
        load_truth(&a.estimate)?
    };
    let e = eier(&truth, &est)?;
    let off = |m: &DMatrix<u8>, i: usize, j: usize| i != j && m[(i, j)] == 1;
    let n = truth.nrows();
    let (mut fa, mut miss) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            match (off(&truth, i, j), off(&est, i, j)) {
                (false, true) => fa += 1,
                (true, false) => miss += 1,
                _ => {}
            }
        }
    }
    if let Some(p) = &a.out {
        let table = format!(
            "metric,value\neier,{}\nfalse_alarms,{fa}\nmisses,{miss}\ntrue_edges,{}\nestimated_edges,{}\n",
            fmt_f64(e),
            truth.iter().filter(|&&v| v == 1).count(),
            est.iter().filter(|&&v| v == 1).count(),
        );
        write_atomic(p, table.as_bytes())?;
    }
    say(out, format!("eier={}", fmt_f64(e)))
}

pub fn roc(a: &RocArgs, out: &mut dyn Write) -> Result<()> {
    let truth = load_truth(&a.truth)?;
    let scores = if is_json(&a.scores) {
        EstimateFile::load(&a.scores)?.scores_matrix()?
    } else {
        load_matrix_csv(&a.scores, Some(truth.shape()))?.data
    };
    let curve = roc_curve(&scores, &truth)?;
    let mut table = String::from("p_fa,p_d,threshold\n");
    for p in &curve.points {
        table.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.p_fa),
            fmt_f64(p.p_d),
            fmt_f64(p.threshold)
        ));
    }
    write_atomic(&a.out, table.as_bytes())?;
    say(out, format!("auc={}", fmt_f64(curve.auc)))
}

/// `count` log-spaced values from `1e-3 * top` to `top`.
fn log_grid(top: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![top],
        _ => (0..count)
            .map(|k| top * 10f64.powf(-3.0 * (1.0 - k as f64 / (count - 1) as f64)))
            .collect(),
    }
}

pub fn cv(a: &CvArgs, exec: Execution, args: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let ds = a.data.load()?;
    let method = a.method.method()?;
    let cfg = a.solver.to_config(a.rng_seed, exec)?;
    let grid = if a.grid.is_empty() {
        let prepared = method.prepare(&ds, &cfg)?;
        log_grid(lambda_max(&ds, &prepared), a.grid_size)
    } else {
        a.grid.clone()
    };
    let res = cross_validate_lambda(&ds, &method, &grid, a.folds, &cfg)?;

    let folds = res.fold_scores.first().map_or(0, Vec::len);
    let mut table = String::from("lambda");
    for f in 0..folds {
        table.push_str(&format!(",fold_{f}"));
    }
    table.push_str(",mean\n");
    for (l, lambda) in res.lambdas.iter().enumerate() {
        table.push_str(&fmt_f64(*lambda));
        for s in &res.fold_scores[l] {
            table.push(',');
            table.push_str(&fmt_f64(*s));
        }
        table.push(',');
        table.push_str(&fmt_f64(res.mean[l]));
        table.push('\n');
    }
    write_atomic(&a.out, table.as_bytes())?;

    let mut manifest = RunManifest::new(
        "cv",
        json!({ "method": method, "solver": cfg, "folds": a.folds, "grid": res.lambdas }),
        cfg.rng_seed,
    );
    manifest.args = args;
    a.data.record(&mut manifest)?;
    manifest.outputs = vec![file_name(&a.out)];
    manifest.convergence = Some(json!({ "best_lambda": res.best_lambda }));
    finish_manifest(manifest, &sibling_manifest(&a.out), start)?;
    say(out, format!("best_lambda={}", fmt_f64(res.best_lambda)))
}

pub fn benchmark(a: &BenchmarkArgs, exec: Execution, args: Vec<String>, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig {
            synth: a.synth.to_config(2, 0)?,
            ratios: a.ratios.clone(),
            runs: a.runs,
            methods: a.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?,
            lambda_fractions: a.fractions.clone(),
            solver: a.solver.to_config(0, exec)?,
            seed: a.seed,
        },
    };
    cfg.solver.execution = exec;
    let report = run_benchmark(&cfg)?;
    create_dir(&a.out)?;

    let mut summary = String::from("ratio,samples,method,mean_eier,sd_eier,completed,failures,lambda_fraction,tau\n");
    for arm in &report.arms {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(arm.ratio),
            arm.samples,
            arm.method,
            fmt_f64(arm.mean_eier),
            fmt_f64(arm.sd_eier),
            arm.completed,
            arm.failures,
            fmt_f64(arm.lambda_fraction),
            fmt_f64(arm.tau)
        ));
    }
    write_atomic(&a.out.join("eier.csv"), summary.as_bytes())?;

    let mut runs = String::from("ratio,method,run,eier\n");
    for arm in &report.arms {
        for (r, v) in arm.per_run.iter().enumerate() {
            let cell = v.map_or_else(String::new, fmt_f64);
            runs.push_str(&format!("{},{},{r},{cell}\n", fmt_f64(arm.ratio), arm.method));
        }
    }
    write_atomic(&a.out.join("runs.csv"), runs.as_bytes())?;

    let mut failures = String::from("ratio,method,run,message\n");
    for (ratio, method, run, msg) in &report.failures {
        let msg = msg.replace('"', "\"\"");
        failures.push_str(&format!("{},{method},{run},\"{msg}\"\n", fmt_f64(*ratio)));
    }
    write_atomic(&a.out.join("failures.csv"), failures.as_bytes())?;
    write_json(&a.out.join("report.json"), &report)?;

    let mut manifest = RunManifest::new("benchmark", to_value(&cfg)?, cfg.seed);
    manifest.args = args;
    if let Some(p) = &a.config {
        manifest.add_input(p)?;
    }
    manifest.outputs = ["eier.csv", "runs.csv", "failures.csv", "report.json"]
        .map(String::from)
        .to_vec();
    manifest.convergence = Some(json!({ "failed_runs": report.failures.len(), "tuning": report.tuning }));
    let path = a.out.join("manifest.json");
    finish_manifest(manifest, &path, start)?;
    say(out, path.display().to_string())
}
