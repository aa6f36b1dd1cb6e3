//! The scenario protocols behind `reproduce`.

use rayon::prelude::*;

use crate::em::GroupPrior;
use crate::error::{Error, Result};
use crate::graph::KernelSpec;
use crate::sampling::{add_white_noise, corrupt_labels, generate_wishart_gmm, Dataset, Seed};

use super::{
    evaluate_outcome, generate_dataset, run_method_k, ExperimentConfig, GenerateSpec, ResultRow,
    ResultTable, Scenario,
};

/// One parameter point of a scenario.
struct Setting {
    param_name: String,
    param_value: String,
    /// Label-noise fraction and prior confidence (noisy-labels only).
    noise_prior: Option<(f64, f64)>,
    /// Generating tau (tau sweep only).
    tau: Option<f64>,
    /// Observation noise sigma (wishart scenarios).
    noise_sigma: Option<f64>,
    /// Dimension override (wishart dims).
    dim: Option<usize>,
    /// Mixing weights (table scenarios).
    alpha: Option<Vec<f64>>,
}

fn fmt_alpha(alpha: &[f64]) -> String {
    alpha
        .iter()
        .map(|a| format!("{a}"))
        .collect::<Vec<_>>()
        .join("|")
}

fn settings_for(config: &ExperimentConfig) -> Vec<Setting> {
    let p = &config.params;
    match config.scenario {
        Scenario::Table1 | Scenario::Table2 | Scenario::Custom => p
            .alphas
            .iter()
            .map(|alpha| Setting {
                param_name: "alpha".into(),
                param_value: fmt_alpha(alpha),
                noise_prior: None,
                tau: None,
                noise_sigma: None,
                dim: None,
                alpha: Some(alpha.clone()),
            })
            .collect(),
        Scenario::TauSweep => p
            .tau_grid
            .iter()
            .map(|&tau| Setting {
                param_name: "tau".into(),
                param_value: format!("{tau}"),
                noise_prior: None,
                tau: Some(tau),
                noise_sigma: None,
                dim: None,
                alpha: Some(p.alphas[0].clone()),
            })
            .collect(),
        Scenario::NoisyLabels => {
            let mut settings = Vec::new();
            for &noise in &p.noise_grid {
                for &prior in &p.prior_grid {
                    settings.push(Setting {
                        param_name: "noise/prior".into(),
                        param_value: format!("{noise}/{prior}"),
                        noise_prior: Some((noise, prior)),
                        tau: None,
                        noise_sigma: None,
                        dim: None,
                        alpha: Some(p.alphas[0].clone()),
                    });
                }
            }
            settings
        }
        Scenario::WishartNoise => p
            .noise_grid
            .iter()
            .map(|&sigma| Setting {
                param_name: "noise_sigma".into(),
                param_value: format!("{sigma}"),
                noise_prior: None,
                tau: None,
                noise_sigma: Some(sigma),
                dim: None,
                alpha: Some(p.alphas[0].clone()),
            })
            .collect(),
        Scenario::WishartDims => p
            .dim_grid
            .iter()
            .map(|&dim| Setting {
                param_name: "n".into(),
                param_value: format!("{dim}"),
                noise_prior: None,
                tau: None,
                noise_sigma: Some(p.wishart_noise_sigma),
                dim: Some(dim),
                alpha: Some(p.alphas[0].clone()),
            })
            .collect(),
    }
}

/// Generate the dataset for one setting-repetition and the group prior when
/// the scenario uses one.
fn generate_for(
    config: &ExperimentConfig,
    setting: &Setting,
    seed: Seed,
) -> Result<(Dataset, Option<GroupPrior>)> {
    let p = &config.params;
    match config.scenario {
        Scenario::Table1 | Scenario::Table2 | Scenario::Custom => {
            let spec = GenerateSpec {
                n: p.n,
                m: p.m,
                p: p.p,
                mean_sigma: p.mean_sigma,
                alpha: setting.alpha.clone().expect("table setting"),
                kernel: KernelSpec::Smooth,
            };
            Ok((generate_dataset(&spec, seed.split(0))?, None))
        }
        Scenario::TauSweep => {
            let spec = GenerateSpec {
                n: p.n,
                m: p.m,
                p: p.p,
                mean_sigma: p.mean_sigma,
                alpha: setting.alpha.clone().expect("tau setting"),
                kernel: KernelSpec::Heat {
                    tau: setting.tau.expect("tau setting"),
                },
            };
            Ok((generate_dataset(&spec, seed.split(0))?, None))
        }
        Scenario::NoisyLabels => {
            let spec = GenerateSpec {
                n: p.n,
                m: p.m,
                p: p.p,
                mean_sigma: p.mean_sigma,
                alpha: setting.alpha.clone().expect("noisy setting"),
                kernel: KernelSpec::Smooth,
            };
            let data = generate_dataset(&spec, seed.split(0))?;
            let (noise, confidence) = setting.noise_prior.expect("noisy setting");
            let noisy = corrupt_labels(
                data.labels.as_ref().expect("generated labels"),
                noise,
                seed.split(5),
            )?;
            // confidence 1 is the hard assignment of the noisy labels: its
            // zero entries pin the responsibilities, so freeze it
            let frozen = confidence >= 1.0;
            let prior = GroupPrior::from_noisy_labels(&noisy, confidence, frozen)?;
            Ok((data, Some(prior)))
        }
        Scenario::WishartNoise | Scenario::WishartDims => {
            let n = setting.dim.unwrap_or(p.n);
            let k = setting.alpha.as_ref().expect("wishart setting").len();
            let gmm = generate_wishart_gmm(n, k, seed.split(0))?;
            let clean = gmm.sample(p.m, seed.split(1))?;
            let sigma = setting.noise_sigma.expect("wishart setting");
            Ok((add_white_noise(&clean, sigma, seed.split(2))?, None))
        }
    }
}

/// Run the configured scenario: every (setting, repetition, method) cell in
/// a parallel pool, rows sort-normalized afterwards. Failed cells are
/// recorded with their reason; successful cells contribute one row per
/// metric.
pub fn run_scenario(config: &ExperimentConfig) -> Result<ResultTable> {
    if config.repetitions == 0 {
        return Err(Error::InvalidInput("repetitions must be >= 1".into()));
    }
    let settings = settings_for(config);
    if settings.is_empty() {
        return Err(Error::InvalidInput("scenario has an empty parameter grid".into()));
    }
    let base = Seed(config.base_seed);

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for setting_idx in 0..settings.len() {
        for rep in 0..config.repetitions {
            cells.push((setting_idx, rep));
        }
    }

    let outcomes: Vec<std::result::Result<Vec<ResultRow>, String>> = cells
        .par_iter()
        .map(|&(setting_idx, rep)| {
            let setting = &settings[setting_idx];
            let rep_seed = base.split(rep as u64);
            let cell_seed = rep_seed.split(setting_idx as u64);
            run_cell(config, setting, rep, cell_seed).map_err(|e| {
                format!(
                    "{} {}={} rep {rep} (seed {}): {e}",
                    config.scenario, setting.param_name, setting.param_value, cell_seed.0
                )
            })
        })
        .collect();

    let mut table = ResultTable::default();
    for outcome in outcomes {
        match outcome {
            Ok(rows) => table.rows.extend(rows),
            Err(reason) => table.failures.push(reason),
        }
    }
    table.normalize();
    Ok(table)
}

fn run_cell(
    config: &ExperimentConfig,
    setting: &Setting,
    rep: usize,
    seed: Seed,
) -> Result<Vec<ResultRow>> {
    let (data, prior) = generate_for(config, setting, seed)?;
    let truth_edge_counts: Option<Vec<usize>> = data
        .spec
        .as_ref()
        .map(|s| s.graphs().iter().map(|g| g.edge_count()).collect());
    let k = setting
        .alpha
        .as_ref()
        .map(|a| a.len())
        .or_else(|| data.labels.as_ref().map(|l| l.k))
        .expect("every scenario sets alpha");

    let mut rows = Vec::new();
    for (method_idx, &method) in config.methods.iter().enumerate() {
        let method_seed = seed.split(10 + method_idx as u64);
        let outcome = run_method_k(
            &data,
            k,
            method,
            &config.hyper,
            method_seed,
            config.select_by_labels,
            prior.as_ref(),
            truth_edge_counts.as_deref(),
        )?;
        let report = evaluate_outcome(&outcome, &data)?;
        for (metric, value) in report.csv_rows() {
            rows.push(ResultRow {
                scenario: config.scenario.to_string(),
                method: method.to_string(),
                param_name: setting.param_name.clone(),
                param_value: setting.param_value.clone(),
                rep,
                metric,
                value,
                seed: method_seed.0,
            });
        }
    }
    Ok(rows)
}
