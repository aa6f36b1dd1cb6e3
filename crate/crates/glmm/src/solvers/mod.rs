//! Per-cluster graph learning.
//!
//! Both solvers operate on [`WeightedSignals`]: deviations `y_m = x_m - mu`
//! with nonnegative per-signal weights (the responsibilities of one cluster).
//! [`learn_graph_smooth`] fits a graph on which the weighted signals are
//! smooth, with a log-degree barrier and Frobenius regularizer;
//! [`learn_graph_heat`] matches the weighted sample covariance to
//! `exp(-2 tau L)` in the log domain with an l1 sparsity penalty.

mod heat;
mod smooth;

pub use heat::learn_graph_heat;
pub use smooth::learn_graph_smooth;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph, Laplacian};
use crate::spectral::eigh_symmetric;

/// Signal deviations with per-signal weights, the input of both solvers.
#[derive(Debug, Clone)]
pub struct WeightedSignals {
    deviations: Array2<f64>,
    weights: Array1<f64>,
}

impl WeightedSignals {
    pub fn new(deviations: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if deviations.nrows() != weights.len() {
            return Err(Error::dim(
                "WeightedSignals::new",
                deviations.nrows(),
                weights.len(),
            ));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidInput("signal weights must be finite and >= 0".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidInput("at least one signal weight must be > 0".into()));
        }
        Ok(WeightedSignals {
            deviations,
            weights,
        })
    }

    /// Unit weights for every signal.
    pub fn unweighted(deviations: Array2<f64>) -> Result<Self> {
        let m = deviations.nrows();
        WeightedSignals::new(deviations, Array1::ones(m))
    }

    pub fn n(&self) -> usize {
        self.deviations.ncols()
    }

    pub fn m(&self) -> usize {
        self.deviations.nrows()
    }

    pub fn deviations(&self) -> &Array2<f64> {
        &self.deviations
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn weight_mass(&self) -> f64 {
        self.weights.sum()
    }
}

/// Hyperparameters of the smoothness-based solver.
///
/// `beta1` weights the log-degree barrier (larger means stronger
/// connectivity), `beta2` the squared Frobenius term (smaller promotes
/// sparsity). The solved problem, over the upper-triangular weight vector
/// `w` with degrees `d(w)`:
///
/// ```text
/// min_{w >= 0}  2 w' z  -  beta1 * sum_i log d_i(w)  +  2 * beta2 * ||w||^2
/// ```
///
/// which is the matrix objective `sum_ij W_ij Z_ij - beta1 1' log(W 1)
/// + beta2 ||W||_F^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothSolverParams {
    pub beta1: f64,
    pub beta2: f64,
    pub max_iterations: usize,
    /// Relative primal iterate change below which the solver stops.
    pub tol: f64,
    /// Fraction of the safe primal-dual step bound, in (0, 1].
    pub step_scale: f64,
}

impl Default for SmoothSolverParams {
    fn default() -> Self {
        SmoothSolverParams {
            beta1: 1.0,
            beta2: 0.5,
            max_iterations: 5000,
            tol: 1e-6,
            step_scale: 1.0,
        }
    }
}

impl SmoothSolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0) {
            return Err(Error::InvalidInput(format!("beta1 must be > 0, got {}", self.beta1)));
        }
        if !(self.beta2 >= 0.0) {
            return Err(Error::InvalidInput(format!("beta2 must be >= 0, got {}", self.beta2)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "step_scale must be in (0, 1], got {}",
                self.step_scale
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of the heat-kernel covariance-matching solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeatSolverParams {
    /// Diffusion parameter of the model covariance `exp(-2 tau L)`.
    pub tau: f64,
    /// l1 sparsity weight on `||W||_1`.
    pub beta: f64,
    pub max_iterations: usize,
    /// Relative objective change below which the solver stops.
    pub tol: f64,
    /// Eigenvalue floor when taking the matrix log of the sample covariance.
    pub eig_floor: f64,
}

impl Default for HeatSolverParams {
    fn default() -> Self {
        HeatSolverParams {
            tau: 0.5,
            beta: 0.1,
            max_iterations: 2000,
            tol: 1e-9,
            eig_floor: 1e-6,
        }
    }
}

impl HeatSolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidInput(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidInput(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.eig_floor > 0.0) {
            return Err(Error::InvalidInput(format!(
                "eig_floor must be > 0, got {}",
                self.eig_floor
            )));
        }
        Ok(())
    }
}

/// Output of a graph solve: the learned graph, its Laplacian, and the run
/// diagnostics. `converged = false` means the iteration budget ran out and
/// the best iterate so far is returned.
#[derive(Debug, Clone)]
pub struct GraphSolve {
    pub graph: Graph,
    pub laplacian: Laplacian,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

impl GraphSolve {
    /// Export the per-iteration objective as a two-column CSV.
    pub fn write_trace_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["iteration", "objective"])?;
        for (i, obj) in self.objective_trace.iter().enumerate() {
            wtr.write_record([i.to_string(), format!("{obj}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Weighted pairwise squared distances between vertex rows:
/// `Z_ij = sum_m gamma_m (y_mi - y_mj)^2`, computed in `O(M N^2)` through the
/// weighted Gram matrix. Symmetric, nonnegative, zero diagonal.
pub fn pairwise_distance_matrix(ws: &WeightedSignals) -> Array2<f64> {
    let n = ws.n();
    let y = ws.deviations();
    let weighted = y * &ws.weights.view().insert_axis(Axis(1));
    let gram = y.t().dot(&weighted); // Gram_ij = sum_m gamma_m y_mi y_mj
    let mut z = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (gram[[i, i]] + gram[[j, j]] - gram[[i, j]] - gram[[j, i]]).max(0.0);
            z[[i, j]] = v;
            z[[j, i]] = v;
        }
    }
    z
}

/// Weighted (uncentered) sample covariance of the deviations:
/// `sum_m gamma_m y_m y_m^T / sum_m gamma_m`.
pub fn weighted_sample_covariance(ws: &WeightedSignals) -> Array2<f64> {
    let y = ws.deviations();
    let weighted = y * &ws.weights.view().insert_axis(Axis(1));
    let mut cov = y.t().dot(&weighted) / ws.weight_mass();
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = avg;
            cov[[j, i]] = avg;
        }
    }
    cov
}

/// Matrix logarithm of a symmetric PSD matrix with eigenvalues clamped to at
/// least `floor`, which keeps the log finite for noisy or rank-deficient
/// sample covariances.
pub fn matrix_log_psd(s: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    if s.nrows() != s.ncols() {
        return Err(Error::dim(
            "matrix_log_psd",
            "square matrix",
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidInput(format!("floor must be > 0, got {floor}")));
    }
    let (vals, vecs) = eigh_symmetric(s)?;
    let logs = vals.mapv(|v| v.max(floor).ln());
    let scaled = &vecs * &logs;
    let mut out = scaled.dot(&vecs.t());
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            let avg = 0.5 * (out[[i, j]] + out[[j, i]]);
            out[[i, j]] = avg;
            out[[j, i]] = avg;
        }
    }
    Ok(out)
}

/// The set of optimizable vertex pairs: all `i < j` pairs, or the allowed
/// pairs of an [`EdgeMask`]. Solvers parameterize graphs by one weight per
/// pair, which enforces symmetry, zero diagonal and the mask by construction.
#[derive(Debug, Clone)]
pub(crate) struct EdgeSet {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeSet {
    pub(crate) fn new(n: usize, mask: Option<&EdgeMask>) -> Result<Self> {
        if let Some(m) = mask {
            if m.n() != n {
                return Err(Error::dim("EdgeSet mask", n, m.n()));
            }
        }
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                if mask.map_or(true, |m| m.allows(i, j)) {
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Degenerate("edge mask allows no edges".into()));
        }
        Ok(EdgeSet { n, pairs })
    }

    pub(crate) fn len(&self) -> usize {
        self.pairs.len()
    }

    pub(crate) fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Gather the matrix entries of the pairs into a vector.
    pub(crate) fn gather(&self, m: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(self.pairs.iter().map(|&(i, j)| m[[i, j]]))
    }

    /// Degree operator `S w`: per-vertex sums of incident pair weights.
    pub(crate) fn degrees(&self, w: &Array1<f64>) -> Array1<f64> {
        let mut d = Array1::zeros(self.n);
        for (e, &(i, j)) in self.pairs.iter().enumerate() {
            d[i] += w[e];
            d[j] += w[e];
        }
        d
    }

    /// Adjoint `S^T v`: per-pair sums of the two endpoint values.
    pub(crate) fn adjoint(&self, v: &Array1<f64>) -> Array1<f64> {
        Array1::from_iter(self.pairs.iter().map(|&(i, j)| v[i] + v[j]))
    }

    /// Assemble the symmetric weight matrix from the pair weights.
    pub(crate) fn weight_matrix(&self, w: &Array1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (e, &(i, j)) in self.pairs.iter().enumerate() {
            out[[i, j]] = w[e];
            out[[j, i]] = w[e];
        }
        out
    }

    /// Assemble the Laplacian `L(w) = D(w) - W(w)` from the pair weights.
    pub(crate) fn laplacian_matrix(&self, w: &Array1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (e, &(i, j)) in self.pairs.iter().enumerate() {
            out[[i, j]] -= w[e];
            out[[j, i]] -= w[e];
            out[[i, i]] += w[e];
            out[[j, j]] += w[e];
        }
        out
    }
}

/// Build the final `GraphSolve` from a pair-weight vector.
pub(crate) fn finish_solve(
    edges: &EdgeSet,
    w: &Array1<f64>,
    converged: bool,
    iterations: usize,
    objective_trace: Vec<f64>,
) -> Result<GraphSolve> {
    let weights = edges.weight_matrix(&w.mapv(|x| x.max(0.0)));
    let graph = Graph::from_weights(weights)?;
    let laplacian = graph.laplacian();
    Ok(GraphSolve {
        graph,
        laplacian,
        converged,
        iterations,
        objective_trace,
    })
}
