//! Hyperparameter grid search over the scenario protocols.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Seed;

use super::{ExperimentConfig, Method, ResultRow, ResultTable, Scenario};

/// Sweep specification: smooth solvers sweep `beta1 x beta2`, the heat
/// solver sweeps its l1 weight `beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchConfig {
    pub scenario: Scenario,
    pub method: Method,
    pub repetitions: usize,
    pub base_seed: u64,
    /// Metric to optimize: "nmse" (minimized) or "f_mean" (maximized).
    pub metric: String,
    #[serde(default)]
    pub beta1_grid: Vec<f64>,
    #[serde(default)]
    pub beta2_grid: Vec<f64>,
    #[serde(default)]
    pub beta_grid: Vec<f64>,
}

impl GridSearchConfig {
    pub fn defaults(scenario: Scenario, method: Method) -> Self {
        GridSearchConfig {
            scenario,
            method,
            repetitions: 5,
            base_seed: 42,
            metric: "f_mean".into(),
            beta1_grid: vec![10.0, 30.0, 50.0, 100.0, 200.0],
            beta2_grid: vec![1.0, 5.0, 20.0],
            beta_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
}

impl GridSearchResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["beta1", "beta2", "beta", "metric", "mean", "count"])?;
        for p in &self.points {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
            wtr.write_record([
                opt(p.beta1),
                opt(p.beta2),
                opt(p.beta),
                p.metric.clone(),
                format!("{}", p.mean),
                p.count.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Evaluate the method at every grid point over the first parameter setting
/// of the scenario; returns all points plus the best one (lowest mean for
/// "nmse", highest otherwise).
pub fn grid_search(search: &GridSearchConfig) -> Result<GridSearchResult> {
    let base_config = {
        let mut c = ExperimentConfig::defaults(search.scenario);
        c.repetitions = search.repetitions;
        c.base_seed = search.base_seed;
        c.methods = vec![search.method];
        // evaluate a single parameter point of the scenario
        match search.scenario {
            Scenario::Table1 | Scenario::Table2 | Scenario::Custom => {
                c.params.alphas.truncate(1);
            }
            Scenario::TauSweep => {
                let mid = c.params.tau_grid[c.params.tau_grid.len() / 2];
                c.params.tau_grid = vec![mid];
            }
            Scenario::NoisyLabels => {
                c.params.noise_grid = vec![c.params.noise_grid[0]];
                c.params.prior_grid = vec![c.params.prior_grid[0]];
            }
            Scenario::WishartNoise => {
                c.params.noise_grid = vec![c.params.noise_grid[0]];
            }
            Scenario::WishartDims => {
                c.params.dim_grid.truncate(1);
            }
        }
        c
    };

    let sweep_heat = search.method == Method::Ghmm;
    let mut combos: Vec<(Option<f64>, Option<f64>, Option<f64>)> = Vec::new();
    if sweep_heat {
        for &beta in &search.beta_grid {
            combos.push((None, None, Some(beta)));
        }
    } else {
        for &beta1 in &search.beta1_grid {
            for &beta2 in &search.beta2_grid {
                combos.push((Some(beta1), Some(beta2), None));
            }
        }
    }
    if combos.is_empty() {
        return Err(Error::InvalidInput("empty hyperparameter grid".into()));
    }

    let points: Vec<GridPoint> = combos
        .par_iter()
        .map(|&(beta1, beta2, beta)| {
            let mut config = base_config.clone();
            if let (Some(b1), Some(b2)) = (beta1, beta2) {
                config.hyper.smooth.beta1 = b1;
                config.hyper.smooth.beta2 = b2;
            }
            if let Some(b) = beta {
                config.hyper.heat.beta = b;
            }
            let values = evaluate_config(&config, &search.metric)?;
            Ok(GridPoint {
                beta1,
                beta2,
                beta,
                metric: search.metric.clone(),
                mean: values.0,
                count: values.1,
            })
        })
        .collect::<Result<_>>()?;

    let minimize = search.metric == "nmse";
    let best = points
        .iter()
        .filter(|p| p.count > 0 && p.mean.is_finite())
        .min_by(|a, b| {
            let (x, y) = if minimize { (a.mean, b.mean) } else { (b.mean, a.mean) };
            x.partial_cmp(&y).expect("finite means")
        })
        .cloned()
        .ok_or_else(|| Error::Degenerate("every grid point failed".into()))?;

    Ok(GridSearchResult { points, best })
}

fn evaluate_config(config: &ExperimentConfig, metric: &str) -> Result<(f64, usize)> {
    let settings_value: Vec<f64> = {
        // run repetitions sequentially here; the outer loop is parallel
        let base = Seed(config.base_seed);
        let mut values = Vec::new();
        for rep in 0..config.repetitions {
            let rows = run_rep(config, base.split(rep as u64))?;
            values.extend(
                rows.iter()
                    .filter(|r| r.metric == metric)
                    .map(|r| r.value),
            );
        }
        values
    };
    if settings_value.is_empty() {
        return Ok((f64::NAN, 0));
    }
    Ok((
        settings_value.iter().sum::<f64>() / settings_value.len() as f64,
        settings_value.len(),
    ))
}

fn run_rep(config: &ExperimentConfig, rep_seed: Seed) -> Result<Vec<ResultRow>> {
    // reuse the scenario machinery through a single-repetition run whose
    // base seed is the derived repetition seed
    let mut single = config.clone();
    single.repetitions = 1;
    single.base_seed = rep_seed.0;
    let table: ResultTable = super::run_scenario(&single)?;
    if !table.failures.is_empty() {
        return Err(Error::Degenerate(table.failures.join("; ")));
    }
    Ok(table.rows)
}
