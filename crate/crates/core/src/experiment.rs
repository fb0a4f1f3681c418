//! EIER-versus-measurement-ratio benchmark over synthetic instances.
//!
//! Every method sees the same instances (paired design), and run `r` uses the
//! same graph and loadings at every ratio. `lambda` is swept as a fraction of
//! each instance's `lambda_max`; the fraction and threshold are then chosen per
//! (ratio, method) to minimize mean EIER against the truth. That tuning uses
//! the true graph, so reported numbers are oracle-tuned.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{eier, lambda_max, lambda_path, mean_sd, select_lambda, tune_threshold};
use crate::model::{edges_from_scores, SolverConfig};
use crate::par;
use crate::solve::Method;
use crate::synth::{generate_dataset, kronecker_power, SynthConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    /// Measurement ratios `M / N`.
    pub ratios: Vec<f64>,
    pub runs: usize,
    pub methods: Vec<Method>,
    /// `lambda` grid as fractions of each instance's `lambda_max`.
    pub lambda_fractions: Vec<f64>,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.solver.validate()?;
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("ratios must be positive".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods given".into()));
        }
        if self.lambda_fractions.is_empty() || self.lambda_fractions.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::Config("lambda fractions must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub ratio: f64,
    pub samples: usize,
    pub method: String,
    pub mean_eier: f64,
    pub sd_eier: f64,
    pub completed: usize,
    pub failures: usize,
    pub lambda_fraction: f64,
    pub tau: f64,
    /// EIER per run at the tuned setting; `None` for failed runs.
    pub per_run: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub nodes: usize,
    pub tuning: &'static str,
    pub arms: Vec<ArmSummary>,
    /// `(ratio, method, run, message)` for every failed run.
    pub failures: Vec<(f64, String, usize, String)>,
}

impl BenchmarkReport {
    pub fn arm(&self, ratio: f64, method: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.ratio == ratio && a.method == method)
    }
}

/// Seed of run `run` under `base` (SplitMix64 finalizer).
pub fn instance_seed(base: u64, run: usize) -> u64 {
    let mut z = base.wrapping_add((run as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn samples_for_ratio(ratio: f64, nodes: usize) -> usize {
    ((ratio * nodes as f64).round() as usize).max(2)
}

type PathScores = std::result::Result<Vec<DMatrix<f64>>, String>;

struct Cell {
    truth: DMatrix<u8>,
    per_method: Vec<PathScores>,
}

fn solve_cell(cfg: &BenchmarkConfig, samples: usize, run: usize) -> Result<Cell> {
    let synth = SynthConfig {
        samples,
        rng_seed: instance_seed(cfg.seed, run),
        ..cfg.synth.clone()
    };
    let (dataset, truth) = generate_dataset(&synth)?;
    let per_method = cfg
        .methods
        .iter()
        .map(|m| -> PathScores {
            let prepared = m.prepare(&dataset, &cfg.solver).map_err(|e| e.to_string())?;
            let lmax = lambda_max(&dataset, &prepared);
            let grid: Vec<f64> = cfg.lambda_fractions.iter().map(|f| f * lmax).collect();
            let path = lambda_path(&dataset, m, &prepared, &grid, &cfg.solver).map_err(|e| e.to_string())?;
            path.into_iter()
                .map(|p| {
                    p.result
                        .map(|e| e.scores)
                        .map_err(|e| format!("lambda {}: {e}", p.lambda))
                })
                .collect()
        })
        .collect();
    Ok(Cell {
        truth: truth.adjacency,
        per_method,
    })
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let nodes = kronecker_power(&cfg.synth.seed_matrix()?, cfg.synth.kron_power)?.nrows();
    let mut fractions = cfg.lambda_fractions.clone();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let cfg = BenchmarkConfig {
        lambda_fractions: fractions,
        ..cfg.clone()
    };

    let mut arms = Vec::new();
    let mut failures = Vec::new();
    for &ratio in &cfg.ratios {
        let samples = samples_for_ratio(ratio, nodes);
        let cells = par::map_range(cfg.solver.execution, cfg.runs, |run| solve_cell(&cfg, samples, run))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for (k, method) in cfg.methods.iter().enumerate() {
            let label = method.label();
            let ok: Vec<usize> = (0..cfg.runs).filter(|&r| cells[r].per_method[k].is_ok()).collect();
            for (r, cell) in cells.iter().enumerate() {
                if let Err(msg) = &cell.per_method[k] {
                    failures.push((ratio, label.clone(), r, msg.clone()));
                }
            }
            if ok.is_empty() {
                arms.push(ArmSummary {
                    ratio,
                    samples,
                    method: label,
                    mean_eier: f64::NAN,
                    sd_eier: f64::NAN,
                    completed: 0,
                    failures: cfg.runs,
                    lambda_fraction: f64::NAN,
                    tau: f64::NAN,
                    per_run: vec![None; cfg.runs],
                });
                continue;
            }
            let choices = (0..cfg.lambda_fractions.len())
                .map(|l| {
                    let pairs: Vec<_> = ok
                        .iter()
                        .map(|&r| (&cells[r].per_method[k].as_ref().unwrap()[l], &cells[r].truth))
                        .collect();
                    tune_threshold(&pairs)
                })
                .collect::<Result<Vec<_>>>()?;
            let best = select_lambda(&choices.iter().map(|c| c.eier).collect::<Vec<_>>());
            let tau = choices[best].tau;
            let per_run: Vec<Option<f64>> = (0..cfg.runs)
                .map(|r| match &cells[r].per_method[k] {
                    Ok(scores) => eier(&cells[r].truth, &edges_from_scores(&scores[best], tau)).ok(),
                    Err(_) => None,
                })
                .collect();
            let values: Vec<f64> = per_run.iter().flatten().copied().collect();
            let (mean, sd) = mean_sd(&values);
            arms.push(ArmSummary {
                ratio,
                samples,
                method: label,
                mean_eier: mean,
                sd_eier: sd,
                completed: values.len(),
                failures: cfg.runs - values.len(),
                lambda_fraction: cfg.lambda_fractions[best],
                tau,
                per_run,
            });
        }
    }
    Ok(BenchmarkReport {
        nodes,
        tuning: "oracle",
        arms,
        failures,
    })
}
