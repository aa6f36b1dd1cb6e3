//! Expectation-maximization for the graph-signal mixture.
//!
//! The E-step computes posterior cluster responsibilities under the current
//! parameters; the M-step updates means and mixing weights in closed form
//! and re-learns one graph per cluster with the configured solver. Under the
//! `Smooth` kernel the cluster covariance `L^+` is singular along the
//! Laplacian nullspace, so densities are evaluated on the `N - 1`
//! dimensional complement of the first eigenvector, with a small `epsilon`
//! added to the retained eigenvalues for numerical stability.
//!
//! Everything is deterministic given `(data, config, seed)`; restarts use
//! seeds derived with [`Seed::split`].

use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, KernelSpec, Laplacian};
use crate::sampling::{er_connected_weighted_with_rng, Dataset, Labels, Seed};
use crate::solvers::{
    learn_graph_heat, learn_graph_smooth, GraphSolve, HeatSolverParams, SmoothSolverParams,
    WeightedSignals,
};
use crate::spectral::spectral_decompose;

const LN_2PI: f64 = 1.8378770664093453;

/// Everything `fit` needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of clusters.
    pub k: usize,
    /// Signal model shared by all clusters.
    pub kernel: KernelSpec,
    /// Relative spectral regularizer: the absolute epsilon added to the
    /// retained eigenvalues of each cluster Laplacian is `epsilon` times the
    /// mean positive eigenvalue, keeping the regularization scale-free.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// EM stops when the max-abs change in responsibilities drops below this.
    pub convergence_tol: f64,
    pub restarts: usize,
    pub smooth_params: SmoothSolverParams,
    pub heat_params: HeatSolverParams,
    /// Optional edge mask applied to every cluster's graph solve.
    pub mask: Option<EdgeMask>,
    /// A cluster whose responsibility mass drops below this is reinitialized.
    pub min_cluster_mass: f64,
    /// Warm-start each cluster's solver from its previous graph.
    pub warm_start_solvers: bool,
}

impl FitConfig {
    pub fn new(k: usize, kernel: KernelSpec) -> Self {
        let mut heat_params = HeatSolverParams::default();
        if let KernelSpec::Heat { tau } = kernel {
            heat_params.tau = tau;
        }
        FitConfig {
            k,
            kernel,
            epsilon: 1e-6,
            max_iterations: 100,
            convergence_tol: 1e-4,
            restarts: 3,
            smooth_params: SmoothSolverParams::default(),
            heat_params,
            mask: None,
            min_cluster_mass: 1.0,
            warm_start_solvers: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("need at least one cluster".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "convergence_tol must be > 0, got {}",
                self.convergence_tol
            )));
        }
        self.kernel.validate()?;
        self.smooth_params.validate()?;
        self.heat_params.validate()?;
        Ok(())
    }
}

/// Row-stochastic posterior cluster memberships, one row per signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: Array2<f64>,
}

impl Responsibilities {
    pub fn from_gamma(gamma: Array2<f64>) -> Result<Self> {
        for (m, row) in gamma.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "responsibility row {m} sums to {sum}, not 1"
                )));
            }
            if row.iter().any(|&g| !(0.0..=1.0 + 1e-12).contains(&g)) {
                return Err(Error::InvalidInput(format!(
                    "responsibility row {m} has entries outside [0, 1]"
                )));
            }
        }
        Ok(Responsibilities { gamma })
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn m(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    /// Per-cluster responsibility mass (column sums).
    pub fn column_masses(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(0))
    }

    /// Argmax labels.
    pub fn hard_labels(&self) -> Labels {
        let assignments = self
            .gamma
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect();
        Labels::new(assignments, self.k()).expect("argmax in range")
    }
}

/// Per-group mixing coefficients replacing the global `alpha`: signal `m`
/// uses prior row `group_of[m]`. With `frozen = true` the rows are kept
/// fixed during EM; otherwise the M-step re-estimates each row as the
/// average responsibility of its group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupPrior {
    pub group_of: Vec<usize>,
    pub prior: Array2<f64>,
    pub frozen: bool,
}

impl GroupPrior {
    pub fn new(group_of: Vec<usize>, prior: Array2<f64>, frozen: bool) -> Result<Self> {
        let groups = prior.nrows();
        if let Some(&bad) = group_of.iter().find(|&&g| g >= groups) {
            return Err(Error::InvalidInput(format!(
                "group index {bad} out of range for {groups} prior rows"
            )));
        }
        for (g, row) in prior.rows().into_iter().enumerate() {
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "prior row {g} sums to {}, not 1",
                    row.sum()
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidInput(format!("prior row {g} has negative entries")));
            }
        }
        Ok(GroupPrior {
            group_of,
            prior,
            frozen,
        })
    }

    /// Group signals by their (possibly noisy) labels and give each group
    /// confidence `confidence` on its own cluster, spreading the rest
    /// uniformly. `confidence = 1` is the hard assignment of the labels.
    pub fn from_noisy_labels(labels: &Labels, confidence: f64, frozen: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence must be in [0, 1], got {confidence}"
            )));
        }
        let k = labels.k;
        if k < 2 {
            return Err(Error::InvalidInput("group prior needs at least 2 clusters".into()));
        }
        let off = (1.0 - confidence) / (k - 1) as f64;
        let mut prior = Array2::from_elem((k, k), off);
        for g in 0..k {
            prior[[g, g]] = confidence;
        }
        GroupPrior::new(labels.assignments.clone(), prior, frozen)
    }

    fn validate_against(&self, m: usize, k: usize) -> Result<()> {
        if self.group_of.len() != m {
            return Err(Error::dim("GroupPrior signals", m, self.group_of.len()));
        }
        if self.prior.ncols() != k {
            return Err(Error::dim("GroupPrior clusters", k, self.prior.ncols()));
        }
        Ok(())
    }
}

/// Current mixture parameters during (or after) fitting.
#[derive(Debug, Clone)]
pub struct ModelState {
    alpha: Array1<f64>,
    means: Vec<Array1<f64>>,
    laplacians: Vec<Laplacian>,
    kernel: KernelSpec,
    epsilon: f64,
}

impl ModelState {
    pub fn new(
        alpha: Array1<f64>,
        means: Vec<Array1<f64>>,
        laplacians: Vec<Laplacian>,
        kernel: KernelSpec,
        epsilon: f64,
    ) -> Result<Self> {
        let k = alpha.len();
        if means.len() != k || laplacians.len() != k {
            return Err(Error::dim(
                "ModelState::new",
                format!("{k} means and laplacians"),
                format!("{} means, {} laplacians", means.len(), laplacians.len()),
            ));
        }
        if k == 0 {
            return Err(Error::InvalidInput("need at least one cluster".into()));
        }
        let n = laplacians[0].n();
        if laplacians.iter().any(|l| l.n() != n) || means.iter().any(|mu| mu.len() != n) {
            return Err(Error::dim("ModelState::new", n, "mixed sizes"));
        }
        kernel.validate()?;
        if !(epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(ModelState {
            alpha,
            means,
            laplacians,
            kernel,
            epsilon,
        })
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn n(&self) -> usize {
        self.laplacians[0].n()
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn means(&self) -> &[Array1<f64>] {
        &self.means
    }

    pub fn laplacians(&self) -> &[Laplacian] {
        &self.laplacians
    }
}

/// Random initialization: uniform mixing weights, means drawn as distinct
/// data signals, Laplacians of connected ER(p = 0.7) graphs with uniform
/// (0.1, 2) edge weights.
pub fn initialize(data: &Dataset, config: &FitConfig, seed: Seed) -> Result<ModelState> {
    let mut rng = seed.rng();
    initialize_with_rng(data, config, &mut rng)
}

fn initialize_with_rng(
    data: &Dataset,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelState> {
    let (m, n) = (data.m(), data.n());
    let k = config.k;
    if m < k {
        return Err(Error::InvalidInput(format!(
            "cannot fit {k} clusters to {m} signals"
        )));
    }
    let alpha = Array1::from_elem(k, 1.0 / k as f64);
    let chosen = rand::seq::index::sample(rng, m, k);
    let means: Vec<Array1<f64>> = chosen
        .iter()
        .map(|idx| data.signals.row(idx).to_owned())
        .collect();
    let scale = initial_laplacian_scale(data, config.kernel);
    let laplacians: Vec<Laplacian> = (0..k)
        .map(|_| random_valid_laplacian(n, scale, rng))
        .collect::<Result<_>>()?;
    ModelState::new(alpha, means, laplacians, config.kernel, config.epsilon)
}

/// Scale factor putting the random initial Laplacians at the data's own
/// variance scale: an off-scale initial precision saturates the first
/// E-step and strands EM in a symmetric basin.
fn initial_laplacian_scale(data: &Dataset, kernel: KernelSpec) -> f64 {
    if kernel.is_heat() {
        // the heat covariance scale is pinned by exp(-2 tau L); tau itself
        // absorbs the data scale
        return 1.0;
    }
    let grand_mean = data.signals.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data.signals - &grand_mean.view().insert_axis(Axis(0));
    let per_coord_var = centered.mapv(|v| v * v).sum() / centered.len() as f64;
    // smooth model: per-coordinate variance of N(0, L^+) is tr(L^+)/N; for
    // a connected ER(0.7) graph with uniform(0.1, 2) weights this is about
    // 1/(0.7 N) per coordinate before scaling
    let reference_var = 1.0 / (0.7 * data.n() as f64);
    (reference_var / per_coord_var.max(1e-12)).max(1e-9)
}

fn random_valid_laplacian(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Laplacian> {
    Ok(er_connected_weighted_with_rng(n, 0.7, 0.1 * scale, 2.0 * scale, rng)?.laplacian())
}

/// Per-cluster Gaussian log-densities `ln N(x_m | mu_k, g^2(L_k))`, one row
/// per signal. Under `Smooth` these are the `N - 1` dimensional densities on
/// the complement of the first eigenvector with `epsilon`-regularized
/// precision; under `Heat` the exact `N`-dimensional densities.
pub fn log_densities(state: &ModelState, data: &Dataset) -> Result<Array2<f64>> {
    if data.n() != state.n() {
        return Err(Error::dim("log_densities", state.n(), data.n()));
    }
    if !data.is_finite() {
        return Err(Error::InvalidInput("signals contain non-finite values".into()));
    }
    let m = data.m();
    let k = state.k();
    let n = state.n();
    let mut out = Array2::zeros((m, k));

    for cluster in 0..k {
        let decomp = spectral_decompose(&state.laplacians[cluster])?;
        let centered = &data.signals - &state.means[cluster].view().insert_axis(Axis(0));
        match state.kernel {
            KernelSpec::Smooth => {
                // drop the first eigenpair, regularize the remaining
                // eigenvalues by epsilon relative to their mean
                let lam = decomp.eigenvalues.slice(s![1..]).to_owned();
                let cut = decomp.rank_tolerance();
                let positive: Vec<f64> =
                    decomp.eigenvalues.iter().cloned().filter(|&v| v > cut).collect();
                let eps_abs = if positive.is_empty() {
                    state.epsilon
                } else {
                    state.epsilon * positive.iter().sum::<f64>() / positive.len() as f64
                };
                let lam_reg = lam.mapv(|v| v.max(0.0) + eps_abs);
                let u_tilde = decomp.eigenvectors.slice(s![.., 1..]);
                let projected = centered.dot(&u_tilde); // M x (N-1)
                let log_det: f64 = lam_reg.iter().map(|&v| v.ln()).sum();
                let dim = (n - 1) as f64;
                for row in 0..m {
                    let maha: f64 = projected
                        .row(row)
                        .iter()
                        .zip(lam_reg.iter())
                        .map(|(&y, &precision)| precision * y * y)
                        .sum();
                    out[[row, cluster]] = 0.5 * (log_det - maha - dim * LN_2PI);
                }
            }
            KernelSpec::Heat { tau } => {
                // covariance exp(-2 tau L): log det = -2 tau sum(lambda),
                // precision spectrum exp(+2 tau lambda)
                let projected = centered.dot(&decomp.eigenvectors); // M x N
                let log_det: f64 = -2.0 * tau * decomp.eigenvalues.sum();
                let precision = decomp.eigenvalues.mapv(|lam| (2.0 * tau * lam).exp());
                let dim = n as f64;
                for row in 0..m {
                    let maha: f64 = projected
                        .row(row)
                        .iter()
                        .zip(precision.iter())
                        .map(|(&y, &p)| p * y * y)
                        .sum();
                    out[[row, cluster]] = -0.5 * (dim * LN_2PI + log_det + maha);
                }
            }
        }
    }
    Ok(out)
}

/// Log prior weight of cluster `k` for signal `m`: global `alpha` or the
/// signal's group prior row.
fn log_prior_weights(
    state: &ModelState,
    m: usize,
    prior: Option<&GroupPrior>,
) -> Result<Array2<f64>> {
    let k = state.k();
    let mut out = Array2::zeros((m, k));
    match prior {
        None => {
            let log_alpha = state.alpha.mapv(f64::ln);
            for row in 0..m {
                out.row_mut(row).assign(&log_alpha);
            }
        }
        Some(gp) => {
            gp.validate_against(m, k)?;
            for row in 0..m {
                let g = gp.group_of[row];
                for cluster in 0..k {
                    out[[row, cluster]] = gp.prior[[g, cluster]].ln();
                }
            }
        }
    }
    Ok(out)
}

/// One pass over the data: responsibilities and the observed-data
/// log-likelihood of the current parameters (the surrogate objective).
fn posterior(
    state: &ModelState,
    data: &Dataset,
    prior: Option<&GroupPrior>,
) -> Result<(Responsibilities, f64)> {
    let dens = log_densities(state, data)?;
    let log_w = log_prior_weights(state, data.m(), prior)? + &dens;
    let m = data.m();
    let k = state.k();
    let mut gamma = Array2::zeros((m, k));
    let mut loglik = 0.0;
    for row in 0..m {
        let lw = log_w.row(row);
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            // every cluster has zero density: fall back to a uniform row
            gamma.row_mut(row).fill(1.0 / k as f64);
            loglik = f64::NEG_INFINITY;
            continue;
        }
        let shifted = lw.mapv(|v| (v - max).exp());
        let total = shifted.sum();
        gamma.row_mut(row).assign(&(&shifted / total));
        loglik += max + total.ln();
    }
    Ok((Responsibilities { gamma }, loglik))
}

/// E-step: posterior responsibilities under the current parameters,
/// normalized in the log domain with max subtraction.
pub fn e_step(
    state: &ModelState,
    data: &Dataset,
    prior: Option<&GroupPrior>,
) -> Result<Responsibilities> {
    posterior(state, data, prior).map(|(gamma, _)| gamma)
}

/// Observed-data log-likelihood of the current parameters (excluding any
/// graph prior term, which only enters through the solvers).
pub fn surrogate_objective(state: &ModelState, data: &Dataset) -> Result<f64> {
    posterior(state, data, None).map(|(_, loglik)| loglik)
}

/// Closed-form weighted means. Errors when a cluster's responsibility mass
/// is below `min_cluster_mass` (degenerate clustering).
pub fn m_step_means(
    gamma: &Responsibilities,
    data: &Dataset,
    min_cluster_mass: f64,
) -> Result<Vec<Array1<f64>>> {
    if gamma.m() != data.m() {
        return Err(Error::dim("m_step_means", data.m(), gamma.m()));
    }
    let masses = gamma.column_masses();
    if let Some((k, &mass)) = masses
        .iter()
        .enumerate()
        .find(|&(_, &mass)| mass < min_cluster_mass)
    {
        return Err(Error::Degenerate(format!(
            "cluster {k} has responsibility mass {mass:.3e} < {min_cluster_mass}"
        )));
    }
    let weighted = gamma.gamma().t().dot(&data.signals); // K x N
    Ok((0..gamma.k())
        .map(|k| weighted.row(k).mapv(|v| v / masses[k]))
        .collect())
}

/// Closed-form mixing weights `alpha_k = sum_m gamma_mk / M`.
pub fn m_step_weights(gamma: &Responsibilities) -> Array1<f64> {
    gamma.column_masses() / gamma.m() as f64
}

/// Per-cluster graph learning: cluster `k` solves on deviations
/// `x_m - mu_k` weighted by its responsibility column. Solver errors carry
/// the cluster index.
pub fn m_step_graphs(
    gamma: &Responsibilities,
    data: &Dataset,
    means: &[Array1<f64>],
    config: &FitConfig,
    warm_start: Option<&[Graph]>,
) -> Result<Vec<GraphSolve>> {
    let mut solves = Vec::with_capacity(gamma.k());
    for k in 0..gamma.k() {
        let deviations = &data.signals - &means[k].view().insert_axis(Axis(0));
        let weights = gamma.gamma().column(k).to_owned();
        let ws = WeightedSignals::new(deviations, weights).map_err(|e| e.for_cluster(k))?;
        let warm = warm_start.map(|graphs| &graphs[k]);
        let solve = match config.kernel {
            KernelSpec::Smooth => {
                learn_graph_smooth(&ws, &config.smooth_params, config.mask.as_ref(), warm)
            }
            KernelSpec::Heat { tau } => {
                let params = HeatSolverParams {
                    tau,
                    ..config.heat_params
                };
                learn_graph_heat(&ws, &params, config.mask.as_ref(), warm)
            }
        }
        .map_err(|e| e.for_cluster(k))?;
        solves.push(solve);
    }
    Ok(solves)
}

/// A fitted mixture: parameters, final responsibilities and diagnostics.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub alpha: Array1<f64>,
    pub means: Vec<Array1<f64>>,
    pub graphs: Vec<GraphSolve>,
    pub gamma: Responsibilities,
    pub objective_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub kernel: KernelSpec,
    pub epsilon: f64,
    /// Final group prior (present when fitting used one).
    pub group_prior: Option<GroupPrior>,
    pub seed: Seed,
}

impl FittedModel {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn n(&self) -> usize {
        self.means[0].len()
    }

    pub fn state(&self) -> Result<ModelState> {
        ModelState::new(
            self.alpha.clone(),
            self.means.clone(),
            self.graphs.iter().map(|s| s.laplacian.clone()).collect(),
            self.kernel,
            self.epsilon,
        )
    }

    pub fn learned_graphs(&self) -> Vec<Graph> {
        self.graphs.iter().map(|s| s.graph.clone()).collect()
    }
}

/// Fit the mixture by EM with restarts; the run with the best final
/// objective wins. With a [`GroupPrior`] the per-signal prior replaces
/// `alpha` in the E-step and, unless frozen, its rows are re-estimated each
/// M-step as per-group responsibility averages.
pub fn fit(
    data: &Dataset,
    config: &FitConfig,
    seed: Seed,
    prior: Option<&GroupPrior>,
) -> Result<FittedModel> {
    config.validate()?;
    if !data.is_finite() {
        return Err(Error::InvalidInput("signals contain non-finite values".into()));
    }
    if data.m() < config.k {
        return Err(Error::InvalidInput(format!(
            "cannot fit {} clusters to {} signals",
            config.k,
            data.m()
        )));
    }
    if let Some(mask) = &config.mask {
        if mask.n() != data.n() {
            return Err(Error::dim("fit mask", data.n(), mask.n()));
        }
    }
    if let Some(gp) = prior {
        gp.validate_against(data.m(), config.k)?;
    }

    let mut best: Option<FittedModel> = None;
    let mut failures: Vec<String> = Vec::new();
    for restart in 0..config.restarts {
        let restart_seed = seed.split(restart as u64);
        match run_em(data, config, restart_seed, prior) {
            Ok(model) => {
                let better = best
                    .as_ref()
                    .map_or(true, |b| model.final_objective > b.final_objective);
                if better {
                    best = Some(model);
                }
            }
            Err(e) => failures.push(format!("restart {restart} (seed {}): {e}", restart_seed.0)),
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed {
        attempted: config.restarts,
        last_error: failures.join("; "),
    })
}

fn run_em(
    data: &Dataset,
    config: &FitConfig,
    seed: Seed,
    prior: Option<&GroupPrior>,
) -> Result<FittedModel> {
    let mut rng = seed.rng();
    let mut state = initialize_with_rng(data, config, &mut rng)?;
    let mut group_prior = prior.cloned();

    let mut trace = Vec::new();
    let mut prev_gamma: Option<Array2<f64>> = None;
    let mut warm: Option<Vec<Graph>> = None;
    let mut graphs: Option<Vec<GraphSolve>> = None;
    let mut converged = false;
    let mut iterations_used = 0;

    for _ in 0..config.max_iterations {
        iterations_used += 1;
        let (mut gamma, mut loglik) = posterior(&state, data, group_prior.as_ref())?;

        // reinitialize clusters that lost (almost) all their mass
        let masses = gamma.column_masses();
        if masses.iter().any(|&mass| mass < config.min_cluster_mass) {
            let scale = initial_laplacian_scale(data, config.kernel);
            rescue_clusters(&mut state, data, &gamma, &masses, config, scale, &mut rng)?;
            let redo = posterior(&state, data, group_prior.as_ref())?;
            gamma = redo.0;
            loglik = redo.1;
        }
        trace.push(loglik);

        if let Some(prev) = &prev_gamma {
            let delta = (gamma.gamma() - prev)
                .iter()
                .fold(0.0f64, |acc, &d| acc.max(d.abs()));
            if delta < config.convergence_tol {
                converged = true;
                break;
            }
        }

        // M-step, everything from the same E-step responsibilities:
        // means, then mixing weights (or prior rows), then graphs
        let means = m_step_means(&gamma, data, config.min_cluster_mass)?;
        state.alpha = m_step_weights(&gamma);
        if let Some(gp) = &mut group_prior {
            if !gp.frozen {
                update_group_prior(gp, &gamma);
            }
        }
        let solves = m_step_graphs(&gamma, data, &means, config, warm.as_deref())?;
        if config.warm_start_solvers {
            warm = Some(solves.iter().map(|s| s.graph.clone()).collect());
        }
        state.means = means;
        state.laplacians = solves.iter().map(|s| s.laplacian.clone()).collect();
        graphs = Some(solves);
        prev_gamma = Some(gamma.gamma().clone());
    }

    // final pass so the stored responsibilities match the final parameters
    let (gamma, final_objective) = posterior(&state, data, group_prior.as_ref())?;
    trace.push(final_objective);

    let graphs = match graphs {
        Some(g) => g,
        // convergence before any M-step can only happen pathologically;
        // fall back to learning graphs from the final responsibilities
        None => m_step_graphs(&gamma, data, &state.means, config, None)?,
    };

    Ok(FittedModel {
        alpha: state.alpha.clone(),
        means: state.means.clone(),
        graphs,
        gamma,
        objective_trace: trace,
        iterations_used,
        converged,
        final_objective,
        kernel: config.kernel,
        epsilon: config.epsilon,
        group_prior,
        seed,
    })
}

fn update_group_prior(gp: &mut GroupPrior, gamma: &Responsibilities) {
    let groups = gp.prior.nrows();
    let k = gp.prior.ncols();
    let mut sums = Array2::<f64>::zeros((groups, k));
    let mut counts = vec![0.0f64; groups];
    for (m, &g) in gp.group_of.iter().enumerate() {
        counts[g] += 1.0;
        for cluster in 0..k {
            sums[[g, cluster]] += gamma.gamma()[[m, cluster]];
        }
    }
    for g in 0..groups {
        if counts[g] > 0.0 {
            for cluster in 0..k {
                gp.prior[[g, cluster]] = sums[[g, cluster]] / counts[g];
            }
        }
    }
}

fn rescue_clusters(
    state: &mut ModelState,
    data: &Dataset,
    gamma: &Responsibilities,
    masses: &Array1<f64>,
    config: &FitConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    // the signal the current model explains worst
    let worst_signal = |g: &Responsibilities| -> usize {
        let mut worst = 0;
        let mut worst_max = f64::INFINITY;
        for (m, row) in g.gamma().rows().into_iter().enumerate() {
            let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if row_max < worst_max {
                worst_max = row_max;
                worst = m;
            }
        }
        worst
    };
    for k in 0..state.k() {
        if masses[k] < config.min_cluster_mass {
            let m = worst_signal(gamma);
            state.means[k] = data.signals.row(m).to_owned();
            state.laplacians[k] = random_valid_laplacian(state.n(), scale, rng)?;
        }
    }
    Ok(())
}

/// Cluster unseen signals with the trained parameters: one E-step with the
/// global mixing weights, no parameter update.
pub fn predict(model: &FittedModel, new_signals: &Dataset) -> Result<Responsibilities> {
    if new_signals.n() != model.n() {
        return Err(Error::dim("predict", model.n(), new_signals.n()));
    }
    e_step(&model.state()?, new_signals, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_laplacian;
    use rand::Rng;
    use crate::sampling::{
        generate_er_connected, generate_random_means, sample_mixture, MixtureModelSpec,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn smooth_state(laplacians: Vec<Laplacian>, means: Vec<Array1<f64>>) -> ModelState {
        let k = laplacians.len();
        ModelState::new(
            Array1::from_elem(k, 1.0 / k as f64),
            means,
            laplacians,
            KernelSpec::Smooth,
            1e-6,
        )
        .unwrap()
    }

    fn two_cluster_data(seed: u64) -> Dataset {
        // well separated means
        let g1 = generate_er_connected(10, 0.7, Seed(seed)).unwrap();
        let g2 = generate_er_connected(10, 0.7, Seed(seed + 1)).unwrap();
        let mut means = generate_random_means(2, 10, 0.5, Seed(seed + 2)).unwrap();
        // push the clusters apart orthogonally to the constant vector (the
        // smooth model is blind to constant shifts)
        means[1][0] += 6.0;
        means[1][1] -= 6.0;
        let spec = MixtureModelSpec::new(
            array![0.5, 0.5],
            means,
            vec![g1.laplacian(), g2.laplacian()],
            KernelSpec::Smooth,
        )
        .unwrap();
        sample_mixture(&spec, 120, Seed(seed + 3)).unwrap()
    }

    #[test]
    fn e_step_single_cluster_is_all_ones() {
        let g = generate_er_connected(5, 0.8, Seed(1)).unwrap();
        let state = smooth_state(vec![g.laplacian()], vec![Array1::zeros(5)]);
        let data = Dataset::from_signals(Array2::from_shape_fn((7, 5), |(i, j)| {
            (i as f64) * 0.1 - (j as f64) * 0.05
        }));
        let gamma = e_step(&state, &data, None).unwrap();
        assert_abs_diff_eq!(gamma.gamma(), &Array2::ones((7, 1)), epsilon = 1e-15);
    }

    #[test]
    fn e_step_identical_clusters_split_evenly() {
        let g = generate_er_connected(5, 0.8, Seed(2)).unwrap();
        let mu = array![0.1, -0.2, 0.3, 0.0, 0.5];
        let state = smooth_state(
            vec![g.laplacian(), g.laplacian()],
            vec![mu.clone(), mu.clone()],
        );
        let data = Dataset::from_signals(Array2::from_shape_fn((5, 5), |(i, j)| {
            ((i + j) as f64).sin()
        }));
        let gamma = e_step(&state, &data, None).unwrap();
        assert_abs_diff_eq!(
            gamma.gamma(),
            &Array2::from_elem((5, 2), 0.5),
            epsilon = 1e-12
        );
    }

    /// Path graph 1-2-3 has eigenvalues (0, 1, 3) with known eigenvectors;
    /// the smooth-model density restricted to the non-null eigenpairs can be
    /// written down directly and must match `log_densities`.
    #[test]
    fn e_step_matches_path_graph_closed_form() {
        let w = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let l = Graph::from_weights(w).unwrap().laplacian();
        let mu = array![0.2, -0.1, 0.4];
        let epsilon = 1e-6;
        let state = ModelState::new(
            array![1.0],
            vec![mu.clone()],
            vec![l],
            KernelSpec::Smooth,
            epsilon,
        )
        .unwrap();
        let x = array![0.7, -0.3, 0.9];
        let data = Dataset::from_signals(x.clone().insert_axis(Axis(0)));
        let dens = log_densities(&state, &data).unwrap();

        // known eigenpairs of the path Laplacian
        let lam1 = 1.0;
        let lam2 = 3.0;
        let u1 = array![1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()];
        let u2 = array![1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt()];
        let eps_abs = epsilon * (lam1 + lam2) / 2.0;
        let y = &x - &mu;
        let t1 = u1.dot(&y);
        let t2 = u2.dot(&y);
        let l1 = lam1 + eps_abs;
        let l2 = lam2 + eps_abs;
        let expected = 0.5
            * ((l1.ln() + l2.ln()) - (l1 * t1 * t1 + l2 * t2 * t2) - 2.0 * LN_2PI);
        let rel = (dens[[0, 0]] - expected).abs() / expected.abs();
        assert!(rel < 1e-8, "density {} vs oracle {expected}", dens[[0, 0]]);
    }

    #[test]
    fn e_step_rejects_non_finite_signals() {
        let g = generate_er_connected(4, 0.9, Seed(3)).unwrap();
        let state = smooth_state(vec![g.laplacian()], vec![Array1::zeros(4)]);
        let mut signals = Array2::zeros((2, 4));
        signals[[1, 2]] = f64::NAN;
        let data = Dataset::from_signals(signals);
        assert!(e_step(&state, &data, None).is_err());
    }

    #[test]
    fn means_update_matches_oracles() {
        let data = Dataset::from_signals(array![
            [1.0, 2.0],
            [3.0, 4.0],
            [5.0, 6.0],
            [7.0, 8.0]
        ]);

        // single cluster: sample mean
        let ones = Responsibilities::from_gamma(Array2::ones((4, 1))).unwrap();
        let mu = m_step_means(&ones, &data, 1.0).unwrap();
        assert_abs_diff_eq!(mu[0], array![4.0, 5.0], epsilon = 1e-12);

        // one-hot: per-cluster means
        let hard = Responsibilities::from_gamma(array![
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ])
        .unwrap();
        let mu = m_step_means(&hard, &data, 1.0).unwrap();
        assert_abs_diff_eq!(mu[0], array![2.0, 3.0], epsilon = 1e-12);
        assert_abs_diff_eq!(mu[1], array![6.0, 7.0], epsilon = 1e-12);

        // random gamma vs explicit double loop
        let gamma = Responsibilities::from_gamma(array![
            [0.3, 0.7],
            [0.9, 0.1],
            [0.5, 0.5],
            [0.2, 0.8]
        ])
        .unwrap();
        let mu = m_step_means(&gamma, &data, 0.0).unwrap();
        for k in 0..2 {
            let mut num = array![0.0, 0.0];
            let mut den = 0.0;
            for m in 0..4 {
                let w = gamma.gamma()[[m, k]];
                num = num + data.signals.row(m).mapv(|v| v * w);
                den += w;
            }
            assert_abs_diff_eq!(mu[k], num / den, epsilon = 1e-12);
        }
    }

    #[test]
    fn means_update_flags_empty_cluster() {
        let data = Dataset::from_signals(array![[1.0], [2.0]]);
        let gamma = Responsibilities::from_gamma(array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let err = m_step_means(&gamma, &data, 1.0).unwrap_err();
        assert!(err.to_string().contains("cluster 1"));
    }

    #[test]
    fn weights_update() {
        let uniform = Responsibilities::from_gamma(Array2::from_elem((6, 3), 1.0 / 3.0)).unwrap();
        assert_abs_diff_eq!(
            m_step_weights(&uniform),
            Array1::from_elem(3, 1.0 / 3.0),
            epsilon = 1e-12
        );

        let hard = Responsibilities::from_gamma(array![
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0]
        ])
        .unwrap();
        assert_abs_diff_eq!(m_step_weights(&hard), array![0.75, 0.25], epsilon = 1e-12);

        let soft = Responsibilities::from_gamma(array![[0.3, 0.7], [0.6, 0.4]]).unwrap();
        assert_abs_diff_eq!(m_step_weights(&soft).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn graphs_update_block_diagonal_equals_separate_solves() {
        let data = two_cluster_data(100);
        let labels = data.labels.clone().unwrap();
        let gamma = Responsibilities::from_gamma(labels.one_hot()).unwrap();
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.smooth_params.max_iterations = 20_000;
        config.smooth_params.tol = 1e-10;
        let means = m_step_means(&gamma, &data, 1.0).unwrap();
        let solves = m_step_graphs(&gamma, &data, &means, &config, None).unwrap();

        for k in 0..2 {
            let member_rows: Vec<usize> = labels
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &z)| z == k)
                .map(|(m, _)| m)
                .collect();
            let mut sub = Array2::zeros((member_rows.len(), data.n()));
            for (r, &m) in member_rows.iter().enumerate() {
                sub.row_mut(r)
                    .assign(&(&data.signals.row(m) - &means[k]));
            }
            let ws = WeightedSignals::unweighted(sub).unwrap();
            let standalone =
                learn_graph_smooth(&ws, &config.smooth_params, None, None).unwrap();
            let diff = (solves[k].graph.weights() - standalone.graph.weights())
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "cluster {k} differs by {diff}");
        }
    }

    #[test]
    fn graphs_update_permutation_equivariant_and_uniform_gamma_identical() {
        let data = two_cluster_data(200);
        let gamma = Responsibilities::from_gamma(Array2::from_elem((data.m(), 2), 0.5)).unwrap();
        let config = FitConfig::new(2, KernelSpec::Smooth);
        let means = m_step_means(&gamma, &data, 1.0).unwrap();
        let solves = m_step_graphs(&gamma, &data, &means, &config, None).unwrap();
        let diff = (solves[0].graph.weights() - solves[1].graph.weights())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "uniform responsibilities must give identical graphs, diff {diff}");
    }

    #[test]
    fn fit_recovers_well_separated_clusters() {
        let data = two_cluster_data(300);
        let labels = data.labels.clone().unwrap();
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.smooth_params.beta1 = 50.0;
        config.smooth_params.beta2 = 5.0;
        config.restarts = 2;
        let model = fit(&data, &config, Seed(42), None).unwrap();
        let nmse = crate::metrics::clustering_nmse(&model.gamma, &labels).unwrap();
        assert!(nmse < 1.0, "NMSE {nmse}%");
        for solve in &model.graphs {
            assert!(validate_laplacian(solve.laplacian.matrix(), 1e-8)
                .unwrap()
                .passes());
        }
    }

    #[test]
    fn fit_single_cluster_reduces_to_sample_statistics() {
        let data = two_cluster_data(400);
        let config = FitConfig::new(1, KernelSpec::Smooth);
        let model = fit(&data, &config, Seed(5), None).unwrap();
        assert_abs_diff_eq!(model.alpha, array![1.0], epsilon = 1e-12);
        let sample_mean = data.signals.mean_axis(Axis(0)).unwrap();
        assert_abs_diff_eq!(model.means[0], sample_mean, epsilon = 1e-9);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = two_cluster_data(500);
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.max_iterations = 15;
        let a = fit(&data, &config, Seed(9), None).unwrap();
        let b = fit(&data, &config, Seed(9), None).unwrap();
        assert_eq!(a.gamma.gamma(), b.gamma.gamma());
        assert_eq!(a.alpha, b.alpha);
        for (ga, gb) in a.graphs.iter().zip(&b.graphs) {
            assert_eq!(ga.graph.weights(), gb.graph.weights());
        }
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn frozen_one_hot_prior_pins_responsibilities() {
        let data = two_cluster_data(600);
        let labels = data.labels.clone().unwrap();
        let prior = GroupPrior::from_noisy_labels(&labels, 1.0, true).unwrap();
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.restarts = 1;
        let model = fit(&data, &config, Seed(77), Some(&prior)).unwrap();
        assert_eq!(model.gamma.gamma(), &labels.one_hot());
    }

    #[test]
    fn frozen_prior_graphs_match_per_group_solves() {
        let data = two_cluster_data(700);
        let labels = data.labels.clone().unwrap();
        let prior = GroupPrior::from_noisy_labels(&labels, 1.0, true).unwrap();
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.restarts = 1;
        config.smooth_params.tol = 1e-9;
        config.smooth_params.max_iterations = 20_000;
        let model = fit(&data, &config, Seed(78), Some(&prior)).unwrap();

        let gamma = Responsibilities::from_gamma(labels.one_hot()).unwrap();
        let means = m_step_means(&gamma, &data, 1.0).unwrap();
        let solves = m_step_graphs(&gamma, &data, &means, &config, None).unwrap();
        for k in 0..2 {
            let diff = (model.graphs[k].graph.weights() - solves[k].graph.weights())
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(diff < 1e-4, "cluster {k} differs by {diff}");
        }
    }

    #[test]
    fn predict_reproduces_training_responsibilities() {
        let data = two_cluster_data(800);
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.restarts = 1;
        let model = fit(&data, &config, Seed(11), None).unwrap();
        let again = predict(&model, &data).unwrap();
        let diff = (model.gamma.gamma() - again.gamma())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "prediction differs from training gamma by {diff}");
    }

    #[test]
    fn predict_mean_signal_lands_in_its_cluster() {
        let data = two_cluster_data(900);
        let mut config = FitConfig::new(2, KernelSpec::Smooth);
        config.smooth_params.beta1 = 50.0;
        config.smooth_params.beta2 = 5.0;
        config.restarts = 2;
        let model = fit(&data, &config, Seed(13), None).unwrap();
        for k in 0..2 {
            let probe = Dataset::from_signals(model.means[k].clone().insert_axis(Axis(0)));
            let gamma = predict(&model, &probe).unwrap();
            let argmax = gamma.hard_labels().assignments[0];
            assert_eq!(argmax, k, "mean of cluster {k} classified as {argmax}");
        }
    }

    #[test]
    fn surrogate_objective_heat_identity_is_standard_normal() {
        let l = Graph::empty(3).laplacian();
        let state = ModelState::new(
            array![1.0],
            vec![Array1::zeros(3)],
            vec![l],
            KernelSpec::Heat { tau: 0.5 },
            1e-6,
        )
        .unwrap();
        let signals = array![[0.3, -1.0, 0.7], [1.2, 0.1, -0.4]];
        let data = Dataset::from_signals(signals.clone());
        let obj = surrogate_objective(&state, &data).unwrap();
        let mut oracle = 0.0;
        for x in signals.iter() {
            oracle += -0.5 * (x * x + LN_2PI);
        }
        assert_abs_diff_eq!(obj, oracle, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_objective_additive_under_duplication() {
        let g = generate_er_connected(5, 0.8, Seed(17)).unwrap();
        let state = smooth_state(vec![g.laplacian()], vec![Array1::zeros(5)]);
        let base = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64).cos());
        let mut doubled = Array2::zeros((8, 5));
        doubled.slice_mut(s![..4, ..]).assign(&base);
        doubled.slice_mut(s![4.., ..]).assign(&base);
        let single = surrogate_objective(&state, &Dataset::from_signals(base)).unwrap();
        let both = surrogate_objective(&state, &Dataset::from_signals(doubled)).unwrap();
        assert_abs_diff_eq!(both, 2.0 * single, epsilon = 1e-9);
    }

    #[test]
    fn surrogate_objective_matches_dense_density_oracle() {
        // 4-node graph; oracle evaluates the projected Gaussian by explicit
        // dense linear algebra on the known subspace
        let w = array![
            [0.0, 1.0, 0.0, 2.0],
            [1.0, 0.0, 0.5, 0.0],
            [0.0, 0.5, 0.0, 1.0],
            [2.0, 0.0, 1.0, 0.0]
        ];
        let l = Graph::from_weights(w).unwrap().laplacian();
        let mu = array![0.1, 0.2, -0.3, 0.0];
        let epsilon = 1e-6;
        let state = ModelState::new(
            array![1.0],
            vec![mu.clone()],
            vec![l.clone()],
            KernelSpec::Smooth,
            epsilon,
        )
        .unwrap();
        let x = array![0.5, -0.2, 0.8, 0.1];
        let data = Dataset::from_signals(x.clone().insert_axis(Axis(0)));
        let obj = surrogate_objective(&state, &data).unwrap();

        let decomp = spectral_decompose(&l).unwrap();
        let positives: Vec<f64> = decomp
            .eigenvalues
            .iter()
            .cloned()
            .filter(|&v| v > decomp.rank_tolerance())
            .collect();
        let eps_abs = epsilon * positives.iter().sum::<f64>() / positives.len() as f64;
        let y = &x - &mu;
        let mut expected = -1.5 * LN_2PI;
        for i in 1..4 {
            let lam = decomp.eigenvalues[i].max(0.0) + eps_abs;
            let coord = decomp.eigenvectors.column(i).dot(&y);
            expected += 0.5 * (lam.ln() - lam * coord * coord);
        }
        let rel = (obj - expected).abs() / expected.abs();
        assert!(rel < 1e-10, "objective {obj} vs oracle {expected}");
    }

    #[test]
    fn fixed_covariance_em_round_is_monotone() {
        // holding all L fixed, one e-step + means/weights update never
        // decreases the observed-data log-likelihood (100 random trials)
        let mut ok = 0;
        for trial in 0..100u64 {
            let seed = Seed(9000).split(trial);
            let g1 = generate_er_connected(6, 0.7, seed.split(0)).unwrap();
            let g2 = generate_er_connected(6, 0.7, seed.split(1)).unwrap();
            let spec = MixtureModelSpec::new(
                array![0.5, 0.5],
                generate_random_means(2, 6, 0.5, seed.split(2)).unwrap(),
                vec![g1.laplacian(), g2.laplacian()],
                KernelSpec::Smooth,
            )
            .unwrap();
            let data = sample_mixture(&spec, 40, seed.split(3)).unwrap();

            // random valid starting state with the same Laplacians
            let mut rng = seed.split(4).rng();
            let mut alpha = Array1::from_shape_fn(2, |_| 0.25 + rng.random::<f64>());
            alpha = &alpha / alpha.sum();
            let means: Vec<Array1<f64>> = (0..2)
                .map(|_| Array1::from_shape_fn(6, |_| rng.random::<f64>() - 0.5))
                .collect();
            let mut state = ModelState::new(
                alpha,
                means,
                vec![g1.laplacian(), g2.laplacian()],
                KernelSpec::Smooth,
                1e-6,
            )
            .unwrap();

            let before = surrogate_objective(&state, &data).unwrap();
            let gamma = e_step(&state, &data, None).unwrap();
            state.means = m_step_means(&gamma, &data, 0.0).unwrap();
            state.alpha = m_step_weights(&gamma);
            let after = surrogate_objective(&state, &data).unwrap();
            if after >= before - 1e-8 {
                ok += 1;
            }
        }
        assert_eq!(ok, 100, "EM monotonicity violated in {} trials", 100 - ok);
    }

    #[test]
    fn initialization_is_valid_and_deterministic() {
        let data = two_cluster_data(1000);
        let config = FitConfig::new(3, KernelSpec::Smooth);
        let a = initialize(&data, &config, Seed(3)).unwrap();
        let b = initialize(&data, &config, Seed(3)).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_abs_diff_eq!(a.alpha, Array1::from_elem(3, 1.0 / 3.0), epsilon = 1e-15);
        for k in 0..3 {
            assert_eq!(a.means[k], b.means[k]);
            assert_eq!(a.laplacians[k].matrix(), b.laplacians[k].matrix());
            assert!(validate_laplacian(a.laplacians[k].matrix(), 1e-10)
                .unwrap()
                .passes());
        }
        // means are data signals
        for k in 0..3 {
            let found = data
                .signals
                .rows()
                .into_iter()
                .any(|row| row == a.means[k].view());
            assert!(found, "initial mean {k} is not a data signal");
        }
    }

    #[test]
    fn fit_rejects_more_clusters_than_signals() {
        let data = Dataset::from_signals(Array2::zeros((2, 4)));
        let config = FitConfig::new(3, KernelSpec::Smooth);
        assert!(fit(&data, &config, Seed(1), None).is_err());
    }
}
