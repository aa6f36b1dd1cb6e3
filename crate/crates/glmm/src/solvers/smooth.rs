//! Smoothness-based graph learning with a log-degree barrier.
//!
//! Solves, over the vector `w` of pair weights with degree map `d(w) = S w`,
//!
//! ```text
//! min_{w >= 0}  2 w' z  -  beta1 * sum_i log d_i(w)  +  2 beta2 ||w||^2
//! ```
//!
//! where `z` holds the weighted pairwise distances of the signals. The
//! barrier keeps every degree strictly positive. The problem is solved with
//! a monotone-plus-Lipschitz forward-backward-forward primal-dual splitting:
//! the linear-plus-positivity term is handled by its prox, the barrier
//! through the prox of its convex conjugate on the dual variable `v ~ d(w)`,
//! and the quadratic term by explicit gradient steps. Each iteration costs
//! `O(N^2)` (one pass over the pair set).

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, Graph};

use super::{finish_solve, pairwise_distance_matrix, EdgeSet, GraphSolve, SmoothSolverParams, WeightedSignals};

/// Objective value; `+inf` while some degree is still nonpositive.
fn objective(
    edges: &EdgeSet,
    w: &Array1<f64>,
    z: &Array1<f64>,
    beta1: f64,
    beta2: f64,
) -> f64 {
    let degrees = edges.degrees(w);
    if degrees.iter().any(|&d| d <= 0.0) {
        return f64::INFINITY;
    }
    let barrier: f64 = degrees.iter().map(|&d| d.ln()).sum();
    2.0 * w.dot(z) - beta1 * barrier + 2.0 * beta2 * w.dot(w)
}

/// Learn a graph on which the weighted signals are smooth.
///
/// `mask` restricts the optimization to the allowed pairs (masked-out pairs
/// are exactly zero in the output); `warm_start` seeds the iteration with a
/// previous solution, which cuts iterations substantially inside EM loops.
/// Degenerate input with an all-zero distance matrix is rejected. If the
/// iteration budget runs out the best iterate is returned with
/// `converged = false`.
pub fn learn_graph_smooth(
    ws: &WeightedSignals,
    params: &SmoothSolverParams,
    mask: Option<&EdgeMask>,
    warm_start: Option<&Graph>,
) -> Result<GraphSolve> {
    params.validate()?;
    let n = ws.n();
    if n < 2 {
        return Err(Error::InvalidInput("graph learning needs at least 2 vertices".into()));
    }
    let edges = EdgeSet::new(n, mask)?;
    let z_matrix = pairwise_distance_matrix(ws);
    let z = edges.gather(&z_matrix);
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(
            "all pairwise distances are zero; graph structure is unidentifiable".into(),
        ));
    }

    let beta1 = params.beta1;
    let beta2 = params.beta2;

    // step bound from the degree-operator norm and the gradient Lipschitz
    // constant of the quadratic term (4 beta2)
    let max_allowed_degree = {
        let mut counts = vec![0usize; n];
        for &(i, j) in edges.pairs() {
            counts[i] += 1;
            counts[j] += 1;
        }
        counts.into_iter().max().unwrap_or(1).max(1)
    };
    let op_norm = (2.0 * max_allowed_degree as f64).sqrt();
    let gamma = params.step_scale / (1.0 + 4.0 * beta2 + op_norm);

    let mut w: Array1<f64> = match warm_start {
        Some(g) => {
            if g.n() != n {
                return Err(Error::dim("learn_graph_smooth warm start", n, g.n()));
            }
            edges.gather(g.weights())
        }
        None => {
            // scale-aware start: weights inversely proportional to distance,
            // sized so the barrier term is already balanced
            let z_mean = z.sum() / edges.len() as f64;
            z.mapv(|ze| beta1 / (ze + z_mean))
        }
    };
    // the barrier dual satisfies v* = -beta1 / d* at the optimum; starting
    // there removes most of the primal-dual transient
    let mut v = {
        let d = edges.degrees(&w);
        let positive_mean = {
            let (sum, count) = d.iter().filter(|&&x| x > 0.0).fold((0.0, 0usize), |(s, c), &x| (s + x, c + 1));
            if count > 0 {
                sum / count as f64
            } else {
                1.0
            }
        };
        d.mapv(|di| -beta1 / if di > 0.0 { di } else { positive_mean })
    };

    // the raw FBF iterate may leave the nonnegative orthant slightly; all
    // objective bookkeeping uses the projected (feasible) iterate
    let mut w_feas = w.mapv(|x| x.max(0.0));
    let mut fw = objective(&edges, &w_feas, &z, beta1, beta2);
    let mut trace = vec![fw];

    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..params.max_iterations {
        iterations = iter + 1;

        // forward-backward-forward step
        let y_primal = &w - &(gamma * (4.0 * beta2 * &w + edges.adjoint(&v)));
        let y_dual = &v + &(gamma * edges.degrees(&w));
        let p_primal = (&y_primal - &(2.0 * gamma * &z)).mapv(|x| x.max(0.0));
        let p_dual = y_dual.mapv(|y| 0.5 * (y - (y * y + 4.0 * beta1 * gamma).sqrt()));
        let q_primal = &p_primal - &(gamma * (4.0 * beta2 * &p_primal + edges.adjoint(&p_dual)));
        let q_dual = &p_dual + &(gamma * edges.degrees(&p_primal));

        let mut w_next = &w - &y_primal + &q_primal;
        let mut feas_next = w_next.mapv(|x| x.max(0.0));
        let mut f_next = objective(&edges, &feas_next, &z, beta1, beta2);
        let mut full_step = true;

        if f_next <= fw || !fw.is_finite() {
            v = &v - &y_dual + &q_dual;
        } else {
            // the splitting step would raise the feasible objective:
            // re-anchor the dual at its optimality relation v = -beta1/d(w)
            // and take a backtracked projected gradient step instead
            let degrees = edges.degrees(&w_feas);
            let d_mean = degrees.sum() / degrees.len() as f64;
            v = degrees.mapv(|d| -beta1 / if d > 0.0 { d } else { d_mean.max(1e-12) });
            let grad = 2.0 * &z + 4.0 * beta2 * &w_feas + edges.adjoint(&v);
            let mut local_step = gamma;
            let mut found = false;
            for _ in 0..40 {
                w_next = (&w_feas - &(local_step * &grad)).mapv(|x| x.max(0.0));
                f_next = objective(&edges, &w_next, &z, beta1, beta2);
                if f_next <= fw {
                    found = true;
                    break;
                }
                local_step *= 0.5;
                full_step = false;
            }
            if !found {
                // no descent at any scale: treat as stationary
                converged = true;
                break;
            }
            feas_next = w_next.clone();
        }

        let delta = (&w_next - &w).mapv(|x| x * x).sum().sqrt();
        let scale = w.mapv(|x| x * x).sum().sqrt().max(1e-12);
        w = w_next;
        w_feas = feas_next;
        fw = f_next;
        trace.push(fw);

        // backtracked steps are short by construction; only a full-length
        // step counts as evidence of convergence
        if full_step && delta / scale < params.tol {
            converged = true;
            break;
        }
    }

    finish_solve(&edges, &w_feas, converged, iterations, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_laplacian;
    use ndarray::array;

    /// Closed-form optimum of the 2-node problem: the stationarity condition
    /// `2z - 2 beta1 / w + 4 beta2 w = 0` has the unique positive root
    /// `w* = (-z + sqrt(z^2 + 8 beta1 beta2)) / (4 beta2)`.
    fn two_node_root(z: f64, beta1: f64, beta2: f64) -> f64 {
        (-z + (z * z + 8.0 * beta1 * beta2).sqrt()) / (4.0 * beta2)
    }

    fn two_node_problem(y: f64) -> WeightedSignals {
        WeightedSignals::new(array![[y, 0.0]], array![1.0]).unwrap()
    }

    #[test]
    fn two_node_matches_scalar_closed_form() {
        let params = SmoothSolverParams {
            beta1: 1.0,
            beta2: 0.5,
            max_iterations: 50_000,
            tol: 1e-12,
            step_scale: 1.0,
        };
        let solve = learn_graph_smooth(&two_node_problem(1.0), &params, None, None).unwrap();
        let expected = two_node_root(1.0, 1.0, 0.5);
        let got = solve.graph.weights()[[0, 1]];
        assert!(
            (got - expected).abs() / expected < 1e-6,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn two_node_scaling_consistent_with_stationarity() {
        // scaling signals by c scales z by c^2; the root moves accordingly
        let params = SmoothSolverParams {
            beta1: 2.0,
            beta2: 1.5,
            max_iterations: 50_000,
            tol: 1e-12,
            step_scale: 1.0,
        };
        let c = 3.0;
        let solve = learn_graph_smooth(&two_node_problem(c), &params, None, None).unwrap();
        let expected = two_node_root(c * c, 2.0, 1.5);
        let got = solve.graph.weights()[[0, 1]];
        assert!(
            (got - expected).abs() / expected < 1e-6,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn output_is_valid_laplacian_with_positive_degrees() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0],
            [-1.0, 0.8, 0.2, 0.4],
            [0.1, 0.1, -0.6, 1.5]
        ];
        let ws = WeightedSignals::unweighted(y).unwrap();
        let solve = learn_graph_smooth(&ws, &SmoothSolverParams::default(), None, None).unwrap();
        assert!(validate_laplacian(solve.laplacian.matrix(), 1e-10)
            .unwrap()
            .passes());
        for d in solve.graph.degrees() {
            assert!(d > 0.0, "log barrier must keep degrees positive");
        }
    }

    #[test]
    fn rejects_all_zero_distances() {
        // identical columns make all pairwise distances vanish
        let y = array![[1.0, 1.0], [2.0, 2.0]];
        let ws = WeightedSignals::unweighted(y).unwrap();
        assert!(learn_graph_smooth(&ws, &SmoothSolverParams::default(), None, None).is_err());
    }

    #[test]
    fn mask_is_honored_bit_exactly() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0],
            [-1.0, 0.8, 0.2, 0.4],
            [0.1, 0.1, -0.6, 1.5]
        ];
        let ws = WeightedSignals::unweighted(y).unwrap();
        let mut allowed = ndarray::Array2::from_elem((4, 4), true);
        for i in 0..4 {
            allowed[[i, i]] = false;
        }
        allowed[[0, 3]] = false;
        allowed[[3, 0]] = false;
        allowed[[1, 2]] = false;
        allowed[[2, 1]] = false;
        let mask = EdgeMask::from_allowed(allowed).unwrap();
        let solve =
            learn_graph_smooth(&ws, &SmoothSolverParams::default(), Some(&mask), None).unwrap();
        assert_eq!(solve.graph.weights()[[0, 3]], 0.0);
        assert_eq!(solve.graph.weights()[[1, 2]], 0.0);
    }

    #[test]
    fn objective_decreases_after_transient() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0, 0.7],
            [-1.0, 0.8, 0.2, 0.4, -0.2],
            [0.1, 0.1, -0.6, 1.5, 0.9],
            [1.3, -0.4, 0.0, 0.3, -1.1]
        ];
        let ws = WeightedSignals::unweighted(y).unwrap();
        let params = SmoothSolverParams {
            max_iterations: 2000,
            ..Default::default()
        };
        let solve = learn_graph_smooth(&ws, &params, None, None).unwrap();
        let trace = &solve.objective_trace;
        let finite_final = *trace.last().unwrap();
        assert!(finite_final.is_finite());
        assert!(finite_final <= trace[0]);
        for t in 5..trace.len() - 1 {
            let slack = 1e-8 * (1.0 + trace[t].abs());
            assert!(
                trace[t + 1] <= trace[t] + slack,
                "objective rose at iteration {t}: {} -> {}",
                trace[t],
                trace[t + 1]
            );
        }
    }

    #[test]
    fn solution_invariant_to_weight_and_beta_rescale() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0],
            [-1.0, 0.8, 0.2, 0.4],
            [0.1, 0.1, -0.6, 1.5]
        ];
        let base = WeightedSignals::new(y.clone(), array![1.0, 0.5, 2.0]).unwrap();
        let scaled = WeightedSignals::new(y, array![3.0, 1.5, 6.0]).unwrap();
        let params = SmoothSolverParams {
            beta1: 2.0,
            beta2: 0.7,
            max_iterations: 50_000,
            tol: 1e-11,
            step_scale: 1.0,
        };
        let rescaled = SmoothSolverParams {
            beta1: 6.0,
            beta2: 2.1,
            ..params
        };
        let a = learn_graph_smooth(&base, &params, None, None).unwrap();
        let b = learn_graph_smooth(&scaled, &rescaled, None, None).unwrap();
        let diff = (a.graph.weights() - b.graph.weights())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "max weight difference {diff}");
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let y = array![
            [0.5, -0.3, 1.1, 0.0],
            [-1.0, 0.8, 0.2, 0.4],
            [0.1, 0.1, -0.6, 1.5]
        ];
        let ws = WeightedSignals::unweighted(y).unwrap();
        let params = SmoothSolverParams {
            max_iterations: 100_000,
            tol: 1e-12,
            ..Default::default()
        };
        let cold = learn_graph_smooth(&ws, &params, None, None).unwrap();
        let warm = learn_graph_smooth(&ws, &params, None, Some(&cold.graph)).unwrap();
        let diff = (cold.graph.weights() - warm.graph.weights())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "max weight difference {diff}");
        assert!(warm.iterations <= cold.iterations);
    }
}
