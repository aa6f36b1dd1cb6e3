//! Heat-kernel graph learning by covariance matching in the log domain.
//!
//! With the model covariance `exp(-2 tau L)`, matching the weighted sample
//! covariance `Sigma` is equivalent, after a matrix log, to
//!
//! ```text
//! min_{W in calW}  || log Sigma + 2 tau L(W) ||_F^2  +  beta ||W||_1
//! ```
//!
//! over symmetric nonnegative zero-diagonal weight matrices, where
//! `L(W) = D(W) - W` is linear in the pair weights. The smooth part is
//! handled by gradient steps with the step size from a power-iteration
//! estimate of the Lipschitz constant; the l1 term plus constraints by a
//! soft-threshold-and-clip prox. Acceleration uses Nesterov momentum with a
//! restart whenever the objective would increase, so accepted iterates are
//! non-increasing in objective.

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph};

use super::{
    finish_solve, matrix_log_psd, weighted_sample_covariance, EdgeSet, GraphSolve,
    HeatSolverParams, WeightedSignals,
};

struct HeatProblem<'a> {
    edges: &'a EdgeSet,
    log_sigma: &'a Array2<f64>,
    tau: f64,
    /// l1 weight over the full matrix; each pair appears twice in ||W||_1.
    beta: f64,
}

impl HeatProblem<'_> {
    /// Residual `R(w) = log Sigma + 2 tau L(w)`.
    fn residual(&self, w: &Array1<f64>) -> Array2<f64> {
        let mut r = self.edges.laplacian_matrix(w);
        r.mapv_inplace(|x| 2.0 * self.tau * x);
        r + self.log_sigma
    }

    fn smooth_value(&self, w: &Array1<f64>) -> f64 {
        self.residual(w).mapv(|x| x * x).sum()
    }

    fn value(&self, w: &Array1<f64>) -> f64 {
        self.smooth_value(w) + 2.0 * self.beta * w.sum()
    }

    /// Gradient of the smooth part: per pair `4 tau (R_ii + R_jj - 2 R_ij)`.
    fn gradient(&self, w: &Array1<f64>) -> Array1<f64> {
        let r = self.residual(w);
        Array1::from_iter(self.edges.pairs().iter().map(|&(i, j)| {
            4.0 * self.tau * (r[[i, i]] + r[[j, j]] - 2.0 * r[[i, j]])
        }))
    }

    /// Gradient of `||A w||_F^2` alone (no constant term), used by the power
    /// iteration: `2 A^T A w`.
    fn quadratic_map(&self, w: &Array1<f64>) -> Array1<f64> {
        let mut a = self.edges.laplacian_matrix(w);
        a.mapv_inplace(|x| 2.0 * self.tau * x);
        Array1::from_iter(self.edges.pairs().iter().map(|&(i, j)| {
            2.0 * self.tau * (a[[i, i]] + a[[j, j]] - 2.0 * a[[i, j]])
        }))
    }

    /// Lipschitz constant of the smooth gradient, `2 ||A||^2`, with
    /// `||A||^2` estimated by power iteration on `A^T A`.
    fn lipschitz(&self) -> f64 {
        let ne = self.edges.len();
        let mut u = Array1::from_elem(ne, 1.0 / (ne as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..100 {
            let v = self.quadratic_map(&u); // 2 A^T A u
            let norm = v.dot(&v).sqrt();
            if norm == 0.0 {
                break;
            }
            let next_lambda = u.dot(&v); // Rayleigh quotient of 2 A^T A
            u = v / norm;
            if (next_lambda - lambda).abs() <= 1e-9 * next_lambda.abs().max(1.0) {
                lambda = next_lambda;
                break;
            }
            lambda = next_lambda;
        }
        // lambda estimates 2 lambda_max(A^T A); gradient Lipschitz constant is the same
        lambda.max(1e-12)
    }

    fn prox(&self, u: &Array1<f64>, step: f64) -> Array1<f64> {
        let shift = step * 2.0 * self.beta;
        u.mapv(|x| (x - shift).max(0.0))
    }
}

/// Learn a graph whose heat-kernel covariance matches the weighted sample
/// covariance of the signals.
///
/// Accelerated proximal gradient with objective-increase restart; accepted
/// iterates never increase the objective. Returns the best iterate with
/// `converged = false` when the iteration budget runs out.
pub fn learn_graph_heat(
    ws: &WeightedSignals,
    params: &HeatSolverParams,
    mask: Option<&EdgeMask>,
    warm_start: Option<&Graph>,
) -> Result<GraphSolve> {
    params.validate()?;
    let n = ws.n();
    if n < 2 {
        return Err(Error::InvalidInput("graph learning needs at least 2 vertices".into()));
    }
    let edges = EdgeSet::new(n, mask)?;
    let sigma = weighted_sample_covariance(ws);
    let log_sigma = matrix_log_psd(&sigma, params.eig_floor)?;
    let problem = HeatProblem {
        edges: &edges,
        log_sigma: &log_sigma,
        tau: params.tau,
        beta: params.beta,
    };

    let step = 0.95 / problem.lipschitz();

    let mut x: Array1<f64> = match warm_start {
        Some(g) => {
            if g.n() != n {
                return Err(Error::dim("learn_graph_heat warm start", n, g.n()));
            }
            edges.gather(g.weights())
        }
        None => Array1::zeros(edges.len()),
    };
    let mut fx = problem.value(&x);
    let mut y = x.clone();
    let mut t = 1.0_f64;

    let mut trace = vec![fx];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iterations {
        iterations = iter + 1;

        let grad = problem.gradient(&y);
        let mut candidate = problem.prox(&(&y - &(step * &grad)), step);
        let mut f_candidate = problem.value(&candidate);

        let ascent_slack = 1e-12 * (1.0 + fx.abs());
        if f_candidate > fx + ascent_slack {
            // momentum overshot: restart from the last accepted iterate
            t = 1.0;
            y = x.clone();
            let grad = problem.gradient(&y);
            let mut local_step = step;
            candidate = problem.prox(&(&y - &(local_step * &grad)), local_step);
            f_candidate = problem.value(&candidate);
            // guard against an underestimated Lipschitz constant
            let mut halvings = 0;
            while f_candidate > fx + ascent_slack && halvings < 30 {
                local_step *= 0.5;
                candidate = problem.prox(&(&y - &(local_step * &grad)), local_step);
                f_candidate = problem.value(&candidate);
                halvings += 1;
            }
            if f_candidate > fx + ascent_slack {
                converged = true; // no descent direction left at this scale
                break;
            }
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = &candidate + &((&candidate - &x).mapv(|d| momentum * d));
        t = t_next;

        let rel_change = (fx - f_candidate).abs() / fx.abs().max(1e-12);
        x = candidate;
        fx = f_candidate;
        trace.push(fx);

        if rel_change < params.tol {
            converged = true;
            break;
        }
    }

    finish_solve(&edges, &x, converged, iterations, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{kernel_covariance, validate_laplacian, KernelSpec};
    use crate::sampling::{generate_er_connected, Seed};
    use ndarray::array;

    /// Sample covariance equal to the model covariance of a known graph;
    /// with beta = 0 the solver must recover the weights.
    #[test]
    fn recovers_graph_from_exact_covariance() {
        let truth = generate_er_connected(6, 0.6, Seed(7)).unwrap();
        let tau = 0.5;
        let cov = kernel_covariance(&truth.laplacian(), &KernelSpec::Heat { tau }).unwrap();
        // feed the exact covariance through a rank-1 signal set trick:
        // bypass sampling by matching against log(cov) directly via the
        // public entry point with a dataset whose covariance equals cov.
        // Cholesky-like factor from the spectral decomposition:
        let (vals, vecs) = crate::spectral::eigh_symmetric(&cov).unwrap();
        let half = &vecs * &vals.mapv(|v| v.max(0.0).sqrt());
        // signals = rows of sqrt(n) * half^T have sample covariance cov
        let y = half.t().mapv(|v| v * (6.0_f64).sqrt());
        let ws = WeightedSignals::unweighted(y.to_owned()).unwrap();
        let params = HeatSolverParams {
            tau,
            beta: 0.0,
            max_iterations: 20_000,
            tol: 1e-14,
            eig_floor: 1e-12,
        };
        let solve = learn_graph_heat(&ws, &params, None, None).unwrap();
        let max_err = (solve.graph.weights() - truth.weights())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(max_err < 1e-4, "max entrywise error {max_err}");
    }

    #[test]
    fn huge_l1_weight_yields_empty_graph() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0],
            [-1.0, 0.8, 0.2, 0.4],
            [0.1, 0.1, -0.6, 1.5]
        ];
        let ws = WeightedSignals::unweighted(y).unwrap();
        let params = HeatSolverParams {
            beta: 1e9,
            ..Default::default()
        };
        let solve = learn_graph_heat(&ws, &params, None, None).unwrap();
        assert_eq!(solve.graph.edge_count(), 0);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let truth = generate_er_connected(5, 0.7, Seed(21)).unwrap();
        let tau = 0.4;
        let cov = kernel_covariance(&truth.laplacian(), &KernelSpec::Heat { tau }).unwrap();
        let log_sigma = matrix_log_psd(&cov, 1e-9).unwrap();
        let edges = EdgeSet::new(5, None).unwrap();
        let problem = HeatProblem {
            edges: &edges,
            log_sigma: &log_sigma,
            tau,
            beta: 0.0,
        };

        // five deterministic feasible points
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let h = 1e-5;
        for _ in 0..5 {
            let w = Array1::from_shape_fn(edges.len(), |_| 0.1 + next());
            let grad = problem.gradient(&w);
            for e in 0..edges.len() {
                let mut plus = w.clone();
                plus[e] += h;
                let mut minus = w.clone();
                minus[e] -= h;
                let fd = (problem.smooth_value(&plus) - problem.smooth_value(&minus)) / (2.0 * h);
                let rel = (grad[e] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "gradient mismatch at edge {e}: {} vs {fd}", grad[e]);
            }
        }
    }

    #[test]
    fn objective_non_increasing_on_accepted_steps() {
        let truth = generate_er_connected(8, 0.5, Seed(33)).unwrap();
        let tau = 0.3;
        let cov = kernel_covariance(&truth.laplacian(), &KernelSpec::Heat { tau }).unwrap();
        let (vals, vecs) = crate::spectral::eigh_symmetric(&cov).unwrap();
        let half = &vecs * &vals.mapv(|v| v.max(0.0).sqrt());
        let y = half.t().mapv(|v| v * (8.0_f64).sqrt());
        let ws = WeightedSignals::unweighted(y.to_owned()).unwrap();
        let params = HeatSolverParams {
            tau,
            beta: 0.05,
            max_iterations: 3000,
            tol: 1e-12,
            eig_floor: 1e-9,
        };
        let solve = learn_graph_heat(&ws, &params, None, None).unwrap();
        for t in 0..solve.objective_trace.len() - 1 {
            let slack = 1e-10 * (1.0 + solve.objective_trace[t].abs());
            assert!(
                solve.objective_trace[t + 1] <= solve.objective_trace[t] + slack,
                "objective rose at step {t}"
            );
        }
        assert!(validate_laplacian(solve.laplacian.matrix(), 1e-10)
            .unwrap()
            .passes());
    }

    #[test]
    fn mask_is_honored_bit_exactly() {
        let truth = generate_er_connected(5, 0.9, Seed(55)).unwrap();
        let tau = 0.5;
        let cov = kernel_covariance(&truth.laplacian(), &KernelSpec::Heat { tau }).unwrap();
        let (vals, vecs) = crate::spectral::eigh_symmetric(&cov).unwrap();
        let half = &vecs * &vals.mapv(|v| v.max(0.0).sqrt());
        let y = half.t().mapv(|v| v * (5.0_f64).sqrt());
        let ws = WeightedSignals::unweighted(y.to_owned()).unwrap();
        let mut allowed = ndarray::Array2::from_elem((5, 5), true);
        for i in 0..5 {
            allowed[[i, i]] = false;
        }
        allowed[[0, 1]] = false;
        allowed[[1, 0]] = false;
        let mask = EdgeMask::from_allowed(allowed).unwrap();
        let solve =
            learn_graph_heat(&ws, &HeatSolverParams::default(), Some(&mask), None).unwrap();
        assert_eq!(solve.graph.weights()[[0, 1]], 0.0);
    }
}
