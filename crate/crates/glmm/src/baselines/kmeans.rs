//! K-means with farthest-point seeding, plus the K-means + GL pipeline:
//! hard clustering followed by smooth graph learning inside each cluster.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{Dataset, Labels, Seed};
use crate::solvers::{learn_graph_smooth, GraphSolve, SmoothSolverParams, WeightedSignals};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig {
            k,
            max_iterations: 100,
            restarts: 3,
        }
    }
}

/// Result of one K-means fit: hard labels, centroids (one row per cluster),
/// final within-cluster sum of squares and its per-iteration trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub labels: Labels,
    pub centroids: Array2<f64>,
    pub cost: f64,
    pub cost_trace: Vec<f64>,
    pub iterations_used: usize,
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations with farthest-point seeding; restarts select the lowest
/// cost. Deterministic given the seed (ties break toward lower indices).
pub fn fit_kmeans(data: &Dataset, config: &KMeansConfig, seed: Seed) -> Result<KMeansFit> {
    if config.k == 0 {
        return Err(Error::InvalidInput("need at least one cluster".into()));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidInput("restarts must be >= 1".into()));
    }
    if data.m() < config.k {
        return Err(Error::InvalidInput(format!(
            "cannot fit {} clusters to {} signals",
            config.k,
            data.m()
        )));
    }
    if !data.is_finite() {
        return Err(Error::InvalidInput("signals contain non-finite values".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..config.restarts {
        let fit = lloyd(data, config, seed.split(restart as u64))?;
        let better = best.as_ref().map_or(true, |b| fit.cost < b.cost);
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn farthest_point_seeds(signals: &Array2<f64>, k: usize, seed: Seed) -> Vec<usize> {
    let m = signals.nrows();
    let mut rng = seed.rng();
    let first = rand::seq::index::sample(&mut rng, m, 1).index(0);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..m)
        .map(|i| squared_distance(signals.row(i), signals.row(first)))
        .collect();
    while chosen.len() < k {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        chosen.push(next);
        for i in 0..m {
            let d = squared_distance(signals.row(i), signals.row(next));
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    chosen
}

fn lloyd(data: &Dataset, config: &KMeansConfig, seed: Seed) -> Result<KMeansFit> {
    let signals = &data.signals;
    let (m, n) = signals.dim();
    let k = config.k;

    let seeds = farthest_point_seeds(signals, k, seed);
    let mut centroids = Array2::zeros((k, n));
    for (c, &idx) in seeds.iter().enumerate() {
        centroids.row_mut(c).assign(&signals.row(idx));
    }

    let mut assignments = vec![usize::MAX; m];
    let mut cost_trace = Vec::new();
    let mut iterations_used = 0;

    for _ in 0..config.max_iterations {
        iterations_used += 1;

        // assignment step
        let mut changed = false;
        let mut cost = 0.0;
        for i in 0..m {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = squared_distance(signals.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            cost += best_d;
            if assignments[i] != best_c {
                assignments[i] = best_c;
                changed = true;
            }
        }
        cost_trace.push(cost);
        if !changed {
            break;
        }

        // update step
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, n));
        for i in 0..m {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &signals.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids
                    .row_mut(c)
                    .assign(&sums.row(c).mapv(|v| v / counts[c] as f64));
            } else {
                // empty cluster: move its centroid to the point farthest
                // from its current assignment's centroid
                let (far, _) = (0..m).fold((0usize, f64::NEG_INFINITY), |(bi, bv), i| {
                    let d = squared_distance(signals.row(i), centroids.row(assignments[i]));
                    if d > bv {
                        (i, d)
                    } else {
                        (bi, bv)
                    }
                });
                centroids.row_mut(c).assign(&signals.row(far));
            }
        }
    }

    let cost = *cost_trace.last().expect("at least one iteration");
    Ok(KMeansFit {
        labels: Labels::new(assignments, k)?,
        centroids,
        cost,
        cost_trace,
        iterations_used,
    })
}

/// K-means labels plus one smooth-learned graph per nonempty cluster
/// (signals centered by their cluster mean, unit weights for members).
#[derive(Debug, Clone)]
pub struct KMeansGlFit {
    pub kmeans: KMeansFit,
    pub graphs: Vec<Option<GraphSolve>>,
}

pub fn kmeans_plus_graph_learning(
    data: &Dataset,
    config: &KMeansConfig,
    solver: &SmoothSolverParams,
    seed: Seed,
) -> Result<KMeansGlFit> {
    let kmeans = fit_kmeans(data, config, seed)?;
    let mut graphs = Vec::with_capacity(config.k);
    for c in 0..config.k {
        let members: Vec<usize> = kmeans
            .labels
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, &z)| z == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            graphs.push(None);
            continue;
        }
        let mut deviations = Array2::zeros((members.len(), data.n()));
        for (row, &i) in members.iter().enumerate() {
            deviations
                .row_mut(row)
                .assign(&(&data.signals.row(i) - &kmeans.centroids.row(c)));
        }
        let ws = WeightedSignals::unweighted(deviations)?;
        graphs.push(Some(
            learn_graph_smooth(&ws, solver, None, None).map_err(|e| e.for_cluster(c))?,
        ));
    }
    Ok(KMeansGlFit { kmeans, graphs })
}
