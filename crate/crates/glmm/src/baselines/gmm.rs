//! Full-covariance Gaussian mixture EM baseline.
//!
//! With `project_constant_out` the signals are first mapped onto a fixed
//! orthonormal basis of the complement of the constant vector (graph-smooth
//! data carries no variance along it), and the whole model lives in `N - 1`
//! dimensions. Responsibilities are reported for the original signals either
//! way. Graphs are extracted from precision matrices by keeping the largest
//! absolute off-diagonal entries.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::Responsibilities;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sampling::{Dataset, Seed};
use crate::spectral::eigh_symmetric;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
    /// Ridge added to every covariance update.
    pub covariance_ridge: f64,
    /// Project signals onto the complement of the constant vector and fit
    /// in `N - 1` dimensions.
    pub project_constant_out: bool,
    pub restarts: usize,
}

impl GmmConfig {
    pub fn new(k: usize) -> Self {
        GmmConfig {
            k,
            max_iterations: 100,
            tol: 1e-6,
            covariance_ridge: 1e-6,
            project_constant_out: false,
            restarts: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("need at least one component".into()));
        }
        if self.covariance_ridge < 0.0 {
            return Err(Error::InvalidInput("covariance ridge must be >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fitted Gaussian mixture. When `projected` is set, `means` and
/// `covariances` live in the `N - 1` dimensional projected space.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub alpha: Array1<f64>,
    pub means: Vec<Array1<f64>>,
    pub covariances: Vec<Array2<f64>>,
    pub gamma: Responsibilities,
    pub log_likelihood_trace: Vec<f64>,
    pub projected: bool,
    /// Signal dimension before any projection.
    pub n_original: usize,
    pub iterations_used: usize,
    pub converged: bool,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("nonempty trace")
    }

    /// Precision matrix of component `k` in the original `N`-dimensional
    /// space (`B^T Sigma^-1 B` when fitted in the projected space).
    pub fn precision(&self, k: usize) -> Result<Array2<f64>> {
        let p = invert_spd(&self.covariances[k])?;
        if self.projected {
            let basis = helmert_complement_basis(self.n_original);
            Ok(basis.t().dot(&p).dot(&basis))
        } else {
            Ok(p)
        }
    }
}

/// Orthonormal basis of the complement of the constant vector, one row per
/// basis vector ((n-1) x n, Helmert construction), fixed and deterministic.
pub fn helmert_complement_basis(n: usize) -> Array2<f64> {
    let mut basis = Array2::zeros((n - 1, n));
    for i in 1..n {
        let scale = 1.0 / ((i * (i + 1)) as f64).sqrt();
        for j in 0..i {
            basis[[i - 1, j]] = scale;
        }
        basis[[i - 1, i]] = -(i as f64) * scale;
    }
    basis
}

fn invert_spd(m: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = eigh_symmetric(m)?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical(format!(
            "matrix is singular (smallest eigenvalue {:e})",
            vals.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let scaled = &vecs * &vals.mapv(|v| 1.0 / v);
    Ok(scaled.dot(&vecs.t()))
}

struct GaussianFactor {
    /// Columns scaled by 1/sqrt(lambda): maps centered x to whitened coords.
    whitener: Array2<f64>,
    log_det: f64,
}

fn factorize(cov: &Array2<f64>) -> Result<GaussianFactor> {
    let (vals, vecs) = eigh_symmetric(cov)?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical(format!(
            "covariance not positive definite despite ridge (eigenvalue {:e})",
            vals.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    Ok(GaussianFactor {
        whitener: &vecs * &vals.mapv(|v| 1.0 / v.sqrt()),
        log_det: vals.iter().map(|&v| v.ln()).sum(),
    })
}

/// Log-densities of all signals under all components, one row per signal.
fn log_densities(
    signals: &Array2<f64>,
    means: &[Array1<f64>],
    covariances: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let (m, dim) = signals.dim();
    let k = means.len();
    let mut out = Array2::zeros((m, k));
    for cluster in 0..k {
        let factor = factorize(&covariances[cluster])?;
        let centered = signals - &means[cluster].view().insert_axis(Axis(0));
        let whitened = centered.dot(&factor.whitener);
        for row in 0..m {
            let maha: f64 = whitened.row(row).iter().map(|&v| v * v).sum();
            out[[row, cluster]] = -0.5 * (dim as f64 * LN_2PI + factor.log_det + maha);
        }
    }
    Ok(out)
}

fn posterior(
    signals: &Array2<f64>,
    alpha: &Array1<f64>,
    means: &[Array1<f64>],
    covariances: &[Array2<f64>],
) -> Result<(Array2<f64>, f64)> {
    let dens = log_densities(signals, means, covariances)?;
    let log_alpha = alpha.mapv(f64::ln);
    let m = signals.nrows();
    let k = alpha.len();
    let mut gamma = Array2::zeros((m, k));
    let mut loglik = 0.0;
    for row in 0..m {
        let lw: Vec<f64> = (0..k).map(|c| log_alpha[c] + dens[[row, c]]).collect();
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            gamma.row_mut(row).fill(1.0 / k as f64);
            loglik = f64::NEG_INFINITY;
            continue;
        }
        let shifted: Vec<f64> = lw.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        for c in 0..k {
            gamma[[row, c]] = shifted[c] / total;
        }
        loglik += max + total.ln();
    }
    Ok((gamma, loglik))
}

/// Standard EM for a full-covariance Gaussian mixture with restarts
/// (selection by log-likelihood) and a ridge on every covariance update.
pub fn fit_gmm(data: &Dataset, config: &GmmConfig, seed: Seed) -> Result<GmmModel> {
    config.validate()?;
    if !data.is_finite() {
        return Err(Error::InvalidInput("signals contain non-finite values".into()));
    }
    if data.m() <= config.k {
        return Err(Error::InvalidInput(format!(
            "need more than {} signals for {} components, got {}",
            config.k,
            config.k,
            data.m()
        )));
    }

    let signals = if config.project_constant_out {
        let basis = helmert_complement_basis(data.n());
        data.signals.dot(&basis.t())
    } else {
        data.signals.clone()
    };

    let mut best: Option<GmmModel> = None;
    let mut failures = Vec::new();
    for restart in 0..config.restarts {
        let restart_seed = seed.split(restart as u64);
        match run_gmm_em(&signals, config, restart_seed, data.n()) {
            Ok(model) => {
                let better = best
                    .as_ref()
                    .map_or(true, |b| model.final_log_likelihood() > b.final_log_likelihood());
                if better {
                    best = Some(model);
                }
            }
            Err(e) => failures.push(format!("restart {restart}: {e}")),
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed {
        attempted: config.restarts,
        last_error: failures.join("; "),
    })
}

fn run_gmm_em(
    signals: &Array2<f64>,
    config: &GmmConfig,
    seed: Seed,
    n_original: usize,
) -> Result<GmmModel> {
    let (m, dim) = signals.dim();
    let k = config.k;
    let mut rng = seed.rng();

    let mut alpha = Array1::from_elem(k, 1.0 / k as f64);
    let chosen = rand::seq::index::sample(&mut rng, m, k);
    let mut means: Vec<Array1<f64>> = chosen
        .iter()
        .map(|idx| signals.row(idx).to_owned())
        .collect();
    let pooled = {
        let mean = signals.mean_axis(Axis(0)).expect("nonempty");
        let centered = signals - &mean.view().insert_axis(Axis(0));
        let mut cov = centered.t().dot(&centered) / m as f64;
        for i in 0..dim {
            cov[[i, i]] += config.covariance_ridge.max(1e-12);
        }
        cov
    };
    let mut covariances: Vec<Array2<f64>> = vec![pooled; k];

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;
    let mut gamma = Array2::zeros((m, k));

    for _ in 0..config.max_iterations {
        iterations_used += 1;
        let (g, loglik) = posterior(signals, &alpha, &means, &covariances)?;
        gamma = g;

        if let Some(&prev) = trace.last() {
            let change: f64 = loglik - prev;
            if change.abs() <= config.tol * (1.0 + prev.abs()) {
                trace.push(loglik);
                converged = true;
                break;
            }
        }
        trace.push(loglik);

        // M-step
        let masses = gamma.sum_axis(Axis(0));
        if masses.iter().any(|&mass| mass <= f64::EPSILON) {
            return Err(Error::Degenerate("a component lost all its mass".into()));
        }
        let weighted = gamma.t().dot(signals);
        for c in 0..k {
            means[c] = weighted.row(c).mapv(|v| v / masses[c]);
        }
        alpha = &masses / m as f64;
        for c in 0..k {
            let centered = signals - &means[c].view().insert_axis(Axis(0));
            let weighted_rows = &centered * &gamma.column(c).insert_axis(Axis(1));
            let mut cov = centered.t().dot(&weighted_rows) / masses[c];
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
                    cov[[i, j]] = avg;
                    cov[[j, i]] = avg;
                }
                cov[[i, i]] += config.covariance_ridge;
            }
            covariances[c] = cov;
        }
    }

    if !converged {
        // trace holds likelihoods of pre-update parameters; refresh for the
        // final parameter set
        let (g, loglik) = posterior(signals, &alpha, &means, &covariances)?;
        gamma = g;
        trace.push(loglik);
    }

    Ok(GmmModel {
        alpha,
        means,
        covariances,
        gamma: Responsibilities::from_gamma(gamma)?,
        log_likelihood_trace: trace,
        projected: config.project_constant_out,
        n_original,
        iterations_used,
        converged,
    })
}

/// Responsibilities of unseen signals under a fitted GMM.
pub fn gmm_predict(model: &GmmModel, signals: &Array2<f64>) -> Result<Responsibilities> {
    if signals.ncols() != model.n_original {
        return Err(Error::dim("gmm_predict", model.n_original, signals.ncols()));
    }
    let projected;
    let inputs = if model.projected {
        let basis = helmert_complement_basis(model.n_original);
        projected = signals.dot(&basis.t());
        &projected
    } else {
        signals
    };
    let (gamma, _) = posterior(inputs, &model.alpha, &model.means, &model.covariances)?;
    Responsibilities::from_gamma(gamma)
}

/// Invert the covariance and keep the `edge_count` largest-magnitude
/// off-diagonal precision entries as unit-weight edges. Ties break by
/// lexicographic `(i, j)` order, so the output is deterministic.
pub fn precision_to_graph(sigma: &Array2<f64>, edge_count: usize) -> Result<Graph> {
    graph_from_precision(&invert_spd(sigma)?, edge_count)
}

/// Same extraction applied to an explicit precision matrix.
pub fn graph_from_precision(precision: &Array2<f64>, edge_count: usize) -> Result<Graph> {
    let n = precision.nrows();
    if precision.ncols() != n {
        return Err(Error::dim(
            "graph_from_precision",
            "square matrix",
            format!("{}x{}", n, precision.ncols()),
        ));
    }
    let max_edges = n * (n - 1) / 2;
    if edge_count > max_edges {
        return Err(Error::InvalidInput(format!(
            "edge_count {edge_count} exceeds the {max_edges} vertex pairs"
        )));
    }
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(max_edges);
    for i in 0..n {
        for j in (i + 1)..n {
            entries.push((i, j, 0.5 * (precision[[i, j]] + precision[[j, i]]).abs()));
        }
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite precision entries")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let edges: Vec<(usize, usize, f64)> = entries
        .into_iter()
        .take(edge_count)
        .map(|(i, j, _)| (i, j, 1.0))
        .collect();
    Graph::from_edge_list(n, &edges)
}
