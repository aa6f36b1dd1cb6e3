//! Evaluation: cluster alignment, clustering NMSE, edge-recovery F-measure
//! and day-to-day consistency.
//!
//! Mixture clusters are identifiable only up to permutation, so every metric
//! first aligns estimated clusters to the reference labeling by minimizing
//! `||z - gamma P||_F^2` over permutations `P` (exhaustive for K <= 8,
//! assignment problem above).

use ndarray::prelude::*;
use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::em::Responsibilities;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sampling::Labels;

/// Relative threshold applied to learned graphs before support comparison:
/// edges below `1e-4 * max(W)` count as absent.
pub const RELATIVE_EDGE_THRESHOLD: f64 = 1e-4;

/// Permutation aligning estimated clusters to reference clusters;
/// `assignment[est]` is the reference cluster matched to estimated cluster
/// `est`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAlignment {
    pub assignment: Vec<usize>,
}

impl ClusterAlignment {
    fn validate(&self) -> bool {
        let k = self.assignment.len();
        let mut seen = vec![false; k];
        for &a in &self.assignment {
            if a >= k || seen[a] {
                return false;
            }
            seen[a] = true;
        }
        true
    }

    /// Inverse map: which estimated cluster lands on reference cluster `r`.
    pub fn estimated_for_reference(&self, r: usize) -> usize {
        self.assignment
            .iter()
            .position(|&a| a == r)
            .expect("valid permutation")
    }
}

/// Overlap matrix `T[est][ref] = sum_m gamma[m, est] * z[m, ref]`.
fn overlap_matrix(gamma: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    gamma.t().dot(z)
}

fn best_permutation(profit: &Array2<f64>) -> Vec<usize> {
    let k = profit.nrows();
    if k <= 8 {
        // exhaustive search over all permutations
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best: (f64, Vec<usize>) = (f64::NEG_INFINITY, perm.clone());
        permute(&mut perm, 0, &mut |p| {
            let score: f64 = p.iter().enumerate().map(|(est, &r)| profit[[est, r]]).sum();
            if score > best.0 {
                best = (score, p.to_vec());
            }
        });
        best.1
    } else {
        let rows: Vec<Vec<OrderedFloat<f64>>> = (0..k)
            .map(|i| (0..k).map(|j| OrderedFloat(profit[[i, j]])).collect())
            .collect();
        let matrix = pathfinding::matrix::Matrix::from_rows(rows).expect("square profit matrix");
        let (_, assignment) = pathfinding::kuhn_munkres::kuhn_munkres(&matrix);
        assignment
    }
}

fn permute(perm: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == perm.len() {
        visit(perm);
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        permute(perm, start + 1, visit);
        perm.swap(start, i);
    }
}

/// Find the permutation of estimated clusters minimizing
/// `||z - gamma P||_F^2` against one-hot reference labels.
pub fn align_clusters(gamma: &Responsibilities, z: &Labels) -> Result<ClusterAlignment> {
    let g = gamma.gamma();
    if z.len() != g.nrows() {
        return Err(Error::dim("align_clusters rows", g.nrows(), z.len()));
    }
    if z.k != g.ncols() {
        return Err(Error::dim("align_clusters clusters", g.ncols(), z.k));
    }
    let profit = overlap_matrix(g, &z.one_hot());
    let alignment = ClusterAlignment {
        assignment: best_permutation(&profit),
    };
    debug_assert!(alignment.validate());
    Ok(alignment)
}

/// Clustering error `100 / (2M) * ||z - gamma P||_F^2` after alignment,
/// in percent (0 = perfect, 100 = all mass on wrong clusters).
pub fn clustering_nmse(gamma: &Responsibilities, z: &Labels) -> Result<f64> {
    let alignment = align_clusters(gamma, z)?;
    let g = gamma.gamma();
    let zh = z.one_hot();
    let m = g.nrows() as f64;
    let mut total = 0.0;
    for row in 0..g.nrows() {
        for est in 0..g.ncols() {
            let diff = zh[[row, alignment.assignment[est]]] - g[[row, est]];
            total += diff * diff;
        }
    }
    Ok(100.0 * total / (2.0 * m))
}

/// Edge sets compared by support: learned edges are entries `>= threshold`
/// (and strictly positive), reference edges are the strictly positive
/// entries. Returns `2PR / (P + R)`; two empty supports count as perfect
/// agreement, an empty learned support against a nonempty reference is 0.
pub fn edge_f_measure(learned: &Graph, truth: &Graph, threshold: f64) -> Result<f64> {
    if learned.n() != truth.n() {
        return Err(Error::dim("edge_f_measure", truth.n(), learned.n()));
    }
    let n = truth.n();
    let mut true_positive = 0usize;
    let mut learned_edges = 0usize;
    let mut truth_edges = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let l = learned.weights()[[i, j]];
            let has_learned = l > 0.0 && l >= threshold;
            let has_truth = truth.weights()[[i, j]] > 0.0;
            learned_edges += has_learned as usize;
            truth_edges += has_truth as usize;
            true_positive += (has_learned && has_truth) as usize;
        }
    }
    if learned_edges == 0 && truth_edges == 0 {
        return Ok(1.0);
    }
    if learned_edges == 0 || truth_edges == 0 {
        return Ok(0.0);
    }
    let precision = true_positive as f64 / learned_edges as f64;
    let recall = true_positive as f64 / truth_edges as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Average pairwise clustering NMSE between per-day hard labelings of the
/// same time-of-day slots, aligning each ordered day pair separately.
pub fn consistency_nmse(daily_labelings: &[Labels]) -> Result<f64> {
    if daily_labelings.len() < 2 {
        return Err(Error::InvalidInput("consistency needs at least two days".into()));
    }
    let slots = daily_labelings[0].len();
    let k = daily_labelings[0].k;
    for (d, labels) in daily_labelings.iter().enumerate() {
        if labels.len() != slots {
            return Err(Error::dim("consistency_nmse slots", slots, format!("{} (day {d})", labels.len())));
        }
        if labels.k != k {
            return Err(Error::dim("consistency_nmse clusters", k, labels.k));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..daily_labelings.len() {
        for b in 0..daily_labelings.len() {
            if a == b {
                continue;
            }
            let gamma = Responsibilities::from_gamma(daily_labelings[a].one_hot())?;
            total += clustering_nmse(&gamma, &daily_labelings[b])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Full evaluation of one fitted model against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub clustering_nmse_percent: f64,
    /// Edge-recovery F per reference cluster (empty when no reference
    /// graphs were available).
    pub per_graph_f: Vec<f64>,
    pub aligned_permutation: ClusterAlignment,
}

impl MetricReport {
    pub fn mean_f(&self) -> Option<f64> {
        if self.per_graph_f.is_empty() {
            None
        } else {
            Some(self.per_graph_f.iter().sum::<f64>() / self.per_graph_f.len() as f64)
        }
    }

    /// Flat CSV row (metric name, value) pairs for aggregation.
    pub fn csv_rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("nmse".to_string(), self.clustering_nmse_percent)];
        if let Some(f) = self.mean_f() {
            rows.push(("f_mean".to_string(), f));
        }
        for (k, f) in self.per_graph_f.iter().enumerate() {
            rows.push((format!("f_{k}"), *f));
        }
        rows
    }
}

/// Evaluate responsibilities (and optionally learned graphs) against
/// reference labels and graphs. Learned graph `est` is compared to the
/// reference graph of the cluster it aligns to; each learned graph is
/// thresholded at `RELATIVE_EDGE_THRESHOLD * max(W)`. `per_graph_f[r]` is
/// indexed by reference cluster `r`; a missing learned graph scores 0.
pub fn evaluate(
    gamma: &Responsibilities,
    z: &Labels,
    learned_graphs: &[Option<Graph>],
    truth_graphs: &[Graph],
) -> Result<MetricReport> {
    let alignment = align_clusters(gamma, z)?;
    let nmse = clustering_nmse(gamma, z)?;
    let mut per_graph_f = Vec::new();
    if !truth_graphs.is_empty() {
        if learned_graphs.len() != truth_graphs.len() {
            return Err(Error::dim(
                "evaluate graphs",
                truth_graphs.len(),
                learned_graphs.len(),
            ));
        }
        per_graph_f = vec![0.0; truth_graphs.len()];
        for (est, learned) in learned_graphs.iter().enumerate() {
            let reference = alignment.assignment[est];
            per_graph_f[reference] = match learned {
                Some(g) => {
                    let threshold = RELATIVE_EDGE_THRESHOLD * g.max_weight();
                    edge_f_measure(g, &truth_graphs[reference], threshold)?
                }
                None => 0.0,
            };
        }
    }
    Ok(MetricReport {
        clustering_nmse_percent: nmse,
        per_graph_f,
        aligned_permutation: alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn resp(gamma: Array2<f64>) -> Responsibilities {
        Responsibilities::from_gamma(gamma).unwrap()
    }

    #[test]
    fn alignment_identity_when_gamma_equals_z() {
        let labels = Labels::new(vec![0, 1, 0, 1], 2).unwrap();
        let gamma = resp(labels.one_hot());
        let a = align_clusters(&gamma, &labels).unwrap();
        assert_eq!(a.assignment, vec![0, 1]);
    }

    #[test]
    fn alignment_detects_column_swap() {
        let labels = Labels::new(vec![0, 1, 0, 1], 2).unwrap();
        let mut swapped = labels.one_hot();
        swapped.invert_axis(Axis(1));
        let gamma = resp(swapped);
        let a = align_clusters(&gamma, &labels).unwrap();
        assert_eq!(a.assignment, vec![1, 0]);
    }

    #[test]
    fn alignment_matches_exhaustive_search_k3() {
        let labels = Labels::new(vec![0, 1, 2, 0, 1, 2, 1], 3).unwrap();
        let gamma_raw = array![
            [0.2, 0.5, 0.3],
            [0.6, 0.3, 0.1],
            [0.1, 0.2, 0.7],
            [0.25, 0.5, 0.25],
            [0.7, 0.2, 0.1],
            [0.3, 0.3, 0.4],
            [0.5, 0.4, 0.1]
        ];
        let gamma = resp(gamma_raw.clone());
        let a = align_clusters(&gamma, &labels).unwrap();

        // independent exhaustive oracle over all 3! permutations
        let zh = labels.one_hot();
        let mut best = (f64::INFINITY, vec![0, 1, 2]);
        let perms = [
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        for p in perms {
            let mut cost = 0.0;
            for m in 0..7 {
                for est in 0..3 {
                    let d = zh[[m, p[est]]] - gamma_raw[[m, est]];
                    cost += d * d;
                }
            }
            if cost < best.0 {
                best = (cost, p);
            }
        }
        assert_eq!(a.assignment, best.1);
    }

    #[test]
    fn hungarian_path_agrees_with_exhaustive_on_small_k() {
        // force the assignment-problem path by checking the internal helper
        let profit = array![
            [3.0, 1.0, 0.0],
            [0.0, 2.0, 1.0],
            [1.0, 0.0, 4.0]
        ];
        let exhaustive = best_permutation(&profit);
        let rows: Vec<Vec<OrderedFloat<f64>>> = (0..3)
            .map(|i| (0..3).map(|j| OrderedFloat(profit[[i, j]])).collect())
            .collect();
        let matrix = pathfinding::matrix::Matrix::from_rows(rows).unwrap();
        let (_, hungarian) = pathfinding::kuhn_munkres::kuhn_munkres(&matrix);
        assert_eq!(exhaustive, hungarian);
    }

    #[test]
    fn nmse_zero_for_exact_match() {
        let labels = Labels::new(vec![0, 1, 1, 0], 2).unwrap();
        let gamma = resp(labels.one_hot());
        assert_abs_diff_eq!(clustering_nmse(&gamma, &labels).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nmse_uniform_gamma_is_25_percent() {
        let labels = Labels::new(vec![0, 1, 0, 1, 0, 0], 2).unwrap();
        let gamma = resp(Array2::from_elem((6, 2), 0.5));
        assert_abs_diff_eq!(clustering_nmse(&gamma, &labels).unwrap(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn nmse_complement_labels_align_to_zero() {
        let labels = Labels::new(vec![0, 1, 0, 1], 2).unwrap();
        let complement = Labels::new(vec![1, 0, 1, 0], 2).unwrap();
        let gamma = resp(complement.one_hot());
        assert_abs_diff_eq!(clustering_nmse(&gamma, &labels).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nmse_invariant_to_cluster_and_signal_permutations() {
        let labels = Labels::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let gamma_raw = array![
            [0.7, 0.2, 0.1],
            [0.1, 0.8, 0.1],
            [0.2, 0.2, 0.6],
            [0.9, 0.05, 0.05],
            [0.3, 0.6, 0.1],
            [0.1, 0.3, 0.6]
        ];
        let base = clustering_nmse(&resp(gamma_raw.clone()), &labels).unwrap();

        // permute estimated clusters (columns 0<->2)
        let mut permuted = gamma_raw.clone();
        permuted.swap_axes(0, 0);
        let permuted = {
            let mut p = Array2::zeros((6, 3));
            for m in 0..6 {
                p[[m, 0]] = gamma_raw[[m, 2]];
                p[[m, 1]] = gamma_raw[[m, 1]];
                p[[m, 2]] = gamma_raw[[m, 0]];
            }
            p
        };
        assert_abs_diff_eq!(
            clustering_nmse(&resp(permuted), &labels).unwrap(),
            base,
            epsilon = 1e-12
        );

        // permute signal order consistently
        let order = [3, 1, 5, 0, 2, 4];
        let mut g2 = Array2::zeros((6, 3));
        let mut l2 = vec![0usize; 6];
        for (new, &old) in order.iter().enumerate() {
            for k in 0..3 {
                g2[[new, k]] = gamma_raw[[old, k]];
            }
            l2[new] = labels.assignments[old];
        }
        assert_abs_diff_eq!(
            clustering_nmse(&resp(g2), &Labels::new(l2, 3).unwrap()).unwrap(),
            base,
            epsilon = 1e-12
        );
    }

    #[test]
    fn f_measure_perfect_and_empty_cases() {
        let truth = Graph::from_edge_list(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        assert_abs_diff_eq!(edge_f_measure(&truth, &truth, 0.5).unwrap(), 1.0);
        let empty = Graph::empty(4);
        assert_abs_diff_eq!(edge_f_measure(&empty, &truth, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(edge_f_measure(&empty, &empty, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn f_measure_hand_count() {
        // truth has 4 edges; learned finds 2 of them plus 1 false edge
        let truth = Graph::from_edge_list(
            5,
            &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)],
        )
        .unwrap();
        let learned =
            Graph::from_edge_list(5, &[(0, 1, 0.9), (1, 2, 0.8), (0, 4, 0.7)]).unwrap();
        // P = 2/3, R = 2/4, F = 2 * (2/3) * (1/2) / (2/3 + 1/2) = 4/7
        assert_abs_diff_eq!(
            edge_f_measure(&learned, &truth, 0.1).unwrap(),
            4.0 / 7.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn f_measure_depends_only_on_thresholded_support() {
        let truth = Graph::from_edge_list(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        let a = Graph::from_edge_list(4, &[(0, 1, 5.0), (1, 2, 3.0)]).unwrap();
        let b = Graph::from_edge_list(4, &[(0, 1, 50.0), (1, 2, 30.0)]).unwrap();
        let fa = edge_f_measure(&a, &truth, 1.0).unwrap();
        let fb = edge_f_measure(&b, &truth, 10.0).unwrap();
        assert_abs_diff_eq!(fa, fb, epsilon = 1e-12);
    }

    #[test]
    fn consistency_identical_days_is_zero() {
        let day = Labels::new(vec![0, 1, 1, 0, 1], 2).unwrap();
        let nmse = consistency_nmse(&[day.clone(), day.clone(), day]).unwrap();
        assert_abs_diff_eq!(nmse, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn consistency_relabeling_is_zero() {
        let day_a = Labels::new(vec![0, 1, 1, 0], 2).unwrap();
        let day_b = Labels::new(vec![1, 0, 0, 1], 2).unwrap();
        let nmse = consistency_nmse(&[day_a, day_b]).unwrap();
        assert_abs_diff_eq!(nmse, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn consistency_hand_count_three_days() {
        // 24 slots, K = 2; day C differs from A and B in exactly one slot.
        // NMSE(A,B) = 0; each pair involving C has one wrong slot out of 24:
        // squared error 2, NMSE = 100 * 2 / (2 * 24) = 100/24 %.
        // Average over 6 ordered pairs: 4 * (100/24) / 6 = 25/9 %.
        let base: Vec<usize> = (0..24).map(|i| i % 2).collect();
        let day_a = Labels::new(base.clone(), 2).unwrap();
        let day_b = Labels::new(base.clone(), 2).unwrap();
        let mut flipped = base;
        flipped[7] = 1 - flipped[7];
        let day_c = Labels::new(flipped, 2).unwrap();
        let nmse = consistency_nmse(&[day_a, day_b, day_c]).unwrap();
        assert_abs_diff_eq!(nmse, 25.0 / 9.0, epsilon = 1e-10);
    }

    #[test]
    fn consistency_rejects_mismatched_slot_counts() {
        let day_a = Labels::new(vec![0, 1], 2).unwrap();
        let day_b = Labels::new(vec![0, 1, 0], 2).unwrap();
        assert!(consistency_nmse(&[day_a, day_b]).is_err());
    }

    #[test]
    fn evaluate_assigns_f_by_reference_cluster() {
        let labels = Labels::new(vec![0, 0, 1, 1], 2).unwrap();
        // estimated clusters are swapped relative to reference
        let gamma = resp(array![
            [0.1, 0.9],
            [0.2, 0.8],
            [0.9, 0.1],
            [0.8, 0.2]
        ]);
        let truth_0 = Graph::from_edge_list(3, &[(0, 1, 1.0)]).unwrap();
        let truth_1 = Graph::from_edge_list(3, &[(1, 2, 1.0)]).unwrap();
        // learned graph for estimated cluster 0 matches reference cluster 1
        let learned_0 = Graph::from_edge_list(3, &[(1, 2, 1.0)]).unwrap();
        let learned_1 = Graph::from_edge_list(3, &[(0, 1, 1.0)]).unwrap();
        let report = evaluate(
            &gamma,
            &labels,
            &[Some(learned_0), Some(learned_1)],
            &[truth_0, truth_1],
        )
        .unwrap();
        assert_eq!(report.aligned_permutation.assignment, vec![1, 0]);
        assert_abs_diff_eq!(report.per_graph_f[0], 1.0);
        assert_abs_diff_eq!(report.per_graph_f[1], 1.0);
        assert!(report.clustering_nmse_percent < 5.0);
    }
}
