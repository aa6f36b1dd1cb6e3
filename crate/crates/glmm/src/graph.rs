//! Graph and Laplacian value types with their validity checks.
//!
//! A [`Graph`] is a symmetric nonnegative weight matrix with zero diagonal;
//! its combinatorial Laplacian is `L = D - W` with `D` the diagonal degree
//! matrix. Valid Laplacians are symmetric, have nonpositive off-diagonal
//! entries and zero row sums, which makes them diagonally dominant and hence
//! positive semidefinite. All types here are immutable values; every
//! operation is pure.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::spectral_decompose;

/// Undirected weighted graph on `n` vertices.
///
/// Invariants (enforced at construction): `weights` is square, exactly
/// symmetric, entrywise nonnegative and has a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    weights: Array2<f64>,
}

impl Graph {
    /// Build a graph from an exactly symmetric weight matrix.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c {
            return Err(Error::dim("Graph::from_weights", "square matrix", format!("{r}x{c}")));
        }
        for i in 0..r {
            if weights[[i, i]] != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "nonzero diagonal entry W[{i},{i}] = {}",
                    weights[[i, i]]
                )));
            }
            for j in 0..c {
                let w = weights[[i, j]];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "weight W[{i},{j}] = {w} is negative or not finite"
                    )));
                }
                if weights[[i, j]] != weights[[j, i]] {
                    return Err(Error::InvalidInput(format!(
                        "weights not symmetric at ({i},{j}): {} vs {}",
                        weights[[i, j]],
                        weights[[j, i]]
                    )));
                }
            }
        }
        Ok(Graph { weights })
    }

    /// Build a graph from a possibly slightly asymmetric matrix by averaging
    /// `(W + W^T) / 2`. Used when ingesting graphs from files; programmatic
    /// constructors require exact symmetry.
    pub fn from_weights_symmetrized(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c {
            return Err(Error::dim(
                "Graph::from_weights_symmetrized",
                "square matrix",
                format!("{r}x{c}"),
            ));
        }
        let mut sym = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    sym[[i, j]] = 0.5 * (weights[[i, j]] + weights[[j, i]]);
                }
            }
        }
        Graph::from_weights(sym)
    }

    /// Graph with no edges.
    pub fn empty(n: usize) -> Self {
        Graph {
            weights: Array2::zeros((n, n)),
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Node degrees `W 1`.
    pub fn degrees(&self) -> Array1<f64> {
        self.weights.sum_axis(Axis(1))
    }

    /// Number of edges in the support (upper-triangular nonzeros).
    pub fn edge_count(&self) -> usize {
        let n = self.n();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.weights[[i, j]] > 0.0 {
                    count += 1;
                }
            }
        }
        count
    }

    /// Maximum edge weight (0 for an empty graph).
    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    /// Combinatorial Laplacian `L = D - W`.
    pub fn laplacian(&self) -> Laplacian {
        let n = self.n();
        let degrees = self.degrees();
        let mut m = -&self.weights;
        for i in 0..n {
            m[[i, i]] = degrees[i];
        }
        Laplacian { matrix: m }
    }

    /// Edge list `(i, j, weight)` over the upper triangle, lexicographic.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.weights[[i, j]] > 0.0 {
                    edges.push((i, j, self.weights[[i, j]]));
                }
            }
        }
        edges
    }

    /// Rebuild a graph from an edge list.
    pub fn from_edge_list(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Array2::zeros((n, n));
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({i},{j}) out of range for {n} vertices"
                )));
            }
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop at vertex {i}")));
            }
            w[[i, j]] = weight;
            w[[j, i]] = weight;
        }
        Graph::from_weights(w)
    }
}

/// Remove edges with weight strictly below `theta`.
pub fn threshold_graph(g: &Graph, theta: f64) -> Result<Graph> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be >= 0, got {theta}")));
    }
    let mut w = g.weights.clone();
    w.mapv_inplace(|x| if x < theta { 0.0 } else { x });
    Ok(Graph { weights: w })
}

/// Combinatorial graph Laplacian.
///
/// Constructed either from a [`Graph`] (exact) or from a raw matrix via
/// [`Laplacian::from_matrix`], which validates the Laplacian conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    matrix: Array2<f64>,
}

impl Laplacian {
    /// Validate `m` against the Laplacian conditions at tolerance `tol` and
    /// wrap it. Off-diagonal asymmetries within tolerance are averaged away
    /// and tiny positive off-diagonal entries are clamped so the stored
    /// matrix satisfies the invariants exactly.
    pub fn from_matrix(m: Array2<f64>, tol: f64) -> Result<Self> {
        let report = validate_laplacian(&m, tol)?;
        if !report.passes() {
            return Err(Error::InvalidLaplacian(report.to_string()));
        }
        let n = m.nrows();
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let avg = -0.5 * (m[[i, j]] + m[[j, i]]);
                    w[[i, j]] = avg.max(0.0);
                }
            }
        }
        Ok(Graph { weights: w }.laplacian())
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Recover the weight matrix `W = -offdiag(L)`.
    pub fn to_graph(&self) -> Graph {
        let n = self.n();
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[[i, j]] = -self.matrix[[i, j]];
                }
            }
        }
        Graph { weights: w }
    }
}

/// One violated Laplacian condition with its worst-case magnitude.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotSymmetric { max_abs: f64 },
    PositiveOffDiagonal { max: f64 },
    RowSumNonzero { max_abs: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NotSymmetric { max_abs } => {
                write!(f, "not symmetric (max |L_ij - L_ji| = {max_abs:e})")
            }
            Violation::PositiveOffDiagonal { max } => {
                write!(f, "positive off-diagonal entries (max = {max:e})")
            }
            Violation::RowSumNonzero { max_abs } => {
                write!(f, "row sums not zero (max |sum| = {max_abs:e})")
            }
        }
    }
}

/// Result of [`validate_laplacian`]: all violated conditions, each with the
/// worst offending magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
    pub tol: f64,
}

impl ValidityReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passes() {
            write!(f, "valid Laplacian (tol {:e})", self.tol)
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            write!(f, "{}", msgs.join("; "))
        }
    }
}

/// Default tolerance for [`validate_laplacian`], matching the accumulation
/// error of the iterative solvers at the problem sizes used here.
pub const DEFAULT_LAPLACIAN_TOL: f64 = 1e-8;

/// Check the three Laplacian conditions (symmetry, nonpositive off-diagonal,
/// zero row sums) at tolerance `tol`. Positive semidefiniteness follows from
/// these by diagonal dominance. Non-square input is rejected.
pub fn validate_laplacian(m: &Array2<f64>, tol: f64) -> Result<ValidityReport> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::dim("validate_laplacian", "square matrix", format!("{r}x{c}")));
    }
    let mut violations = Vec::new();

    let mut max_asym: f64 = 0.0;
    let mut max_pos_off: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            if i != j {
                max_asym = max_asym.max((m[[i, j]] - m[[j, i]]).abs());
                max_pos_off = max_pos_off.max(m[[i, j]]);
            }
        }
    }
    if max_asym > tol {
        violations.push(Violation::NotSymmetric { max_abs: max_asym });
    }
    if max_pos_off > tol {
        violations.push(Violation::PositiveOffDiagonal { max: max_pos_off });
    }

    let mut max_row_sum: f64 = 0.0;
    for i in 0..r {
        max_row_sum = max_row_sum.max(m.row(i).sum().abs());
    }
    if max_row_sum > tol {
        violations.push(Violation::RowSumNonzero { max_abs: max_row_sum });
    }

    Ok(ValidityReport { violations, tol })
}

/// Quadratic form `x^T L x`, the graph smoothness of the signal.
///
/// Equals `1/2 * sum_ij W_ij (x_i - x_j)^2` and is nonnegative for any valid
/// Laplacian; zero for constant signals.
pub fn smoothness(x: ArrayView1<f64>, l: &Laplacian) -> Result<f64> {
    if x.len() != l.n() {
        return Err(Error::dim("smoothness", l.n(), x.len()));
    }
    Ok(x.dot(&l.matrix.dot(&x)))
}

/// True iff the second-smallest Laplacian eigenvalue (the Fiedler value)
/// exceeds `tol`. Single-vertex graphs count as connected.
pub fn is_connected(l: &Laplacian, tol: f64) -> Result<bool> {
    if l.n() <= 1 {
        return Ok(true);
    }
    let decomp = spectral_decompose(l)?;
    Ok(decomp.eigenvalues[1] > tol)
}

/// Signal model attached to a graph: the filter applied to white noise.
///
/// `Smooth` draws signals with covariance `L^+` (pseudo-inverse); `Heat`
/// draws signals with covariance `exp(-2 tau L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Smooth,
    Heat { tau: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Heat { tau } = self {
            if !(*tau > 0.0) {
                return Err(Error::InvalidInput(format!("heat kernel requires tau > 0, got {tau}")));
            }
        }
        Ok(())
    }

    pub fn is_heat(&self) -> bool {
        matches!(self, KernelSpec::Heat { .. })
    }
}

/// Squared-filter covariance `g^2(L)` of the kernel signal model.
///
/// Heat: `exp(-2 tau L)` via the spectral decomposition (always positive
/// definite). Smooth: the pseudo-inverse `L^+`, inverting eigenvalues above
/// the relative rank tolerance and zeroing the rest.
pub fn kernel_covariance(l: &Laplacian, kernel: &KernelSpec) -> Result<Array2<f64>> {
    kernel.validate()?;
    let decomp = spectral_decompose(l)?;
    let transformed: Array1<f64> = match kernel {
        KernelSpec::Heat { tau } => decomp.eigenvalues.mapv(|lam| (-2.0 * tau * lam).exp()),
        KernelSpec::Smooth => {
            let cut = decomp.rank_tolerance();
            decomp
                .eigenvalues
                .mapv(|lam| if lam > cut { 1.0 / lam } else { 0.0 })
        }
    };
    let u = &decomp.eigenvectors;
    let scaled = u * &transformed; // scales column k by transformed[k]
    let mut cov = scaled.dot(&u.t());
    // symmetrize away the last-bit asymmetry from the matrix products
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = avg;
            cov[[j, i]] = avg;
        }
    }
    Ok(cov)
}

/// Symmetric boolean mask of allowed edges; diagonal entries are false.
///
/// Pairs with `allowed = false` are forced to weight zero by the graph
/// solvers. Every vertex should keep at least one allowed edge, otherwise
/// the log-degree barrier of the smooth solver has no feasible point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMask {
    allowed: Array2<bool>,
}

impl EdgeMask {
    pub fn from_allowed(allowed: Array2<bool>) -> Result<Self> {
        let (r, c) = allowed.dim();
        if r != c {
            return Err(Error::dim("EdgeMask::from_allowed", "square matrix", format!("{r}x{c}")));
        }
        for i in 0..r {
            if allowed[[i, i]] {
                return Err(Error::InvalidInput(format!("mask diagonal must be false (row {i})")));
            }
            for j in 0..r {
                if allowed[[i, j]] != allowed[[j, i]] {
                    return Err(Error::InvalidInput(format!("mask not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(EdgeMask { allowed })
    }

    /// Mask allowing every off-diagonal pair.
    pub fn full(n: usize) -> Self {
        let mut allowed = Array2::from_elem((n, n), true);
        for i in 0..n {
            allowed[[i, i]] = false;
        }
        EdgeMask { allowed }
    }

    /// Mask keeping only the support of `g` (plus nothing else).
    pub fn from_support(g: &Graph) -> Self {
        EdgeMask {
            allowed: g.weights().mapv(|w| w > 0.0),
        }
    }

    pub fn n(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[[i, j]]
    }
}
