//! Generators for ground-truth mixture models and synthetic datasets.
//!
//! Everything here is a deterministic function of its arguments and a
//! [`Seed`]. Randomness comes from ChaCha8 seeded with the 64-bit seed
//! value, so repeated calls with equal seeds reproduce results bit for bit;
//! derived seeds for independent repetitions come from [`Seed::split`]
//! (a SplitMix64 mix), never from a shared global generator.

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_connected, Graph, KernelSpec, Laplacian};
use crate::spectral::spectral_decompose;

/// 64-bit seed for any generator in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Seed {
    /// Derive an independent stream for repetition or purpose `stream`.
    pub fn split(self, stream: u64) -> Seed {
        // SplitMix64 finalizer on seed xor golden-ratio-scaled stream
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }

    pub(crate) fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Hard cluster assignments with their cluster count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub assignments: Vec<usize>,
    pub k: usize,
}

impl Labels {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = assignments.iter().find(|&&z| z >= k) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {k} clusters"
            )));
        }
        Ok(Labels { assignments, k })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// One-hot encoding, one row per signal.
    pub fn one_hot(&self) -> Array2<f64> {
        let mut z = Array2::zeros((self.assignments.len(), self.k));
        for (m, &label) in self.assignments.iter().enumerate() {
            z[[m, label]] = 1.0;
        }
        z
    }
}

/// Ground-truth mixture: `K` clusters, each with prior mass, mean signal and
/// graph Laplacian, under a common kernel signal model.
#[derive(Debug, Clone)]
pub struct MixtureModelSpec {
    alpha: Array1<f64>,
    means: Vec<Array1<f64>>,
    laplacians: Vec<Laplacian>,
    kernel: KernelSpec,
}

impl MixtureModelSpec {
    pub fn new(
        alpha: Array1<f64>,
        means: Vec<Array1<f64>>,
        laplacians: Vec<Laplacian>,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let k = alpha.len();
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one cluster".into()));
        }
        if means.len() != k || laplacians.len() != k {
            return Err(Error::dim(
                "MixtureModelSpec::new",
                format!("{k} means and laplacians"),
                format!("{} means, {} laplacians", means.len(), laplacians.len()),
            ));
        }
        if alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput("alpha entries must be > 0".into()));
        }
        if (alpha.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "alpha must sum to 1 within 1e-12, sums to {}",
                alpha.sum()
            )));
        }
        let n = laplacians[0].n();
        if laplacians.iter().any(|l| l.n() != n) || means.iter().any(|mu| mu.len() != n) {
            return Err(Error::dim("MixtureModelSpec::new", n, "mixed sizes"));
        }
        kernel.validate()?;
        Ok(MixtureModelSpec {
            alpha,
            means,
            laplacians,
            kernel,
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

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn graphs(&self) -> Vec<Graph> {
        self.laplacians.iter().map(|l| l.to_graph()).collect()
    }
}

/// A set of signals (rows) with optional ground-truth labels and the spec
/// that generated them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub signals: Array2<f64>,
    pub labels: Option<Labels>,
    pub spec: Option<MixtureModelSpec>,
}

impl Dataset {
    pub fn from_signals(signals: Array2<f64>) -> Self {
        Dataset {
            signals,
            labels: None,
            spec: None,
        }
    }

    /// Number of signals.
    pub fn m(&self) -> usize {
        self.signals.nrows()
    }

    /// Signal dimension (vertex count).
    pub fn n(&self) -> usize {
        self.signals.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.signals.iter().all(|x| x.is_finite())
    }
}

fn categorical(alpha: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &a) in alpha.iter().enumerate() {
        acc += a;
        if u < acc {
            return k;
        }
    }
    alpha.len() - 1
}

fn standard_normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| StandardNormal.sample(rng)))
}

/// Connected Erdos-Renyi graph: each unordered pair becomes a unit-weight
/// edge independently with probability `p`, resampled until connected
/// (at most 1000 attempts).
pub fn generate_er_connected(n: usize, p: f64, seed: Seed) -> Result<Graph> {
    let mut rng = seed.rng();
    er_connected_with_rng(n, p, &mut rng)
}

pub(crate) fn er_connected_with_rng(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("ER graph needs n >= 2, got {n}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("edge probability must be in (0, 1], got {p}")));
    }
    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    w[[i, j]] = 1.0;
                    w[[j, i]] = 1.0;
                }
            }
        }
        let g = Graph::from_weights(w).expect("constructed symmetric");
        if is_connected(&g.laplacian(), 1e-9)? {
            return Ok(g);
        }
    }
    Err(Error::Degenerate(format!(
        "no connected ER({n}, {p}) graph in {MAX_ATTEMPTS} attempts"
    )))
}

/// Connected ER topology with i.i.d. uniform edge weights in `[lo, hi)`.
pub(crate) fn er_connected_weighted_with_rng(
    n: usize,
    p: f64,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Graph> {
    let topology = er_connected_with_rng(n, p, rng)?;
    let mut w = topology.weights().clone();
    for i in 0..n {
        for j in (i + 1)..n {
            if w[[i, j]] > 0.0 {
                let u: f64 = rng.random();
                let weight = lo + (hi - lo) * u;
                w[[i, j]] = weight;
                w[[j, i]] = weight;
            }
        }
    }
    Graph::from_weights(w)
}

/// K mean signals with i.i.d. `N(0, sigma^2)` entries.
pub fn generate_random_means(k: usize, n: usize, sigma: f64, seed: Seed) -> Result<Vec<Array1<f64>>> {
    if sigma < 0.0 {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = seed.rng();
    Ok((0..k)
        .map(|_| standard_normal_vec(n, &mut rng) * sigma)
        .collect())
}

/// Draw `m` signals from the mixture: sample a cluster from `alpha`, then
/// `x = mu_k + U_k f(Lambda_k)^{1/2} w` with `w` standard normal and `f` the
/// squared-filter spectrum (pseudo-inverse for `Smooth`, `exp(-2 tau .)` for
/// `Heat`). Labels are stored alongside the signals.
///
/// Under `Smooth`, eigenvalues at or below the rank tolerance get zero
/// variance, so sampled deviations carry no component along the Laplacian
/// nullspace (for connected graphs: orthogonal to the constant vector).
pub fn sample_mixture(spec: &MixtureModelSpec, m: usize, seed: Seed) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let n = spec.n();
    let mut rng = seed.rng();

    // per-cluster factor U f(Lambda)^{1/2}
    let mut factors = Vec::with_capacity(spec.k());
    for l in spec.laplacians() {
        let decomp = spectral_decompose(l)?;
        let spectrum: Array1<f64> = match spec.kernel() {
            KernelSpec::Heat { tau } => decomp.eigenvalues.mapv(|lam| (-2.0 * tau * lam).exp()),
            KernelSpec::Smooth => {
                let cut = decomp.rank_tolerance();
                decomp
                    .eigenvalues
                    .mapv(|lam| if lam > cut { 1.0 / lam } else { 0.0 })
            }
        };
        let sqrt_spectrum = spectrum.mapv(f64::sqrt);
        factors.push(&decomp.eigenvectors * &sqrt_spectrum);
    }

    let mut signals = Array2::zeros((m, n));
    let mut assignments = Vec::with_capacity(m);
    for row in 0..m {
        let k = categorical(spec.alpha(), &mut rng);
        assignments.push(k);
        let w = standard_normal_vec(n, &mut rng);
        let x = &spec.means()[k] + &factors[k].dot(&w);
        signals.row_mut(row).assign(&x);
    }

    Ok(Dataset {
        signals,
        labels: Some(Labels::new(assignments, spec.k())?),
        spec: Some(spec.clone()),
    })
}

/// Add i.i.d. `N(0, sigma^2)` noise to every entry; labels unchanged.
pub fn add_white_noise(d: &Dataset, sigma: f64, seed: Seed) -> Result<Dataset> {
    if sigma < 0.0 {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = seed.rng();
    let mut signals = d.signals.clone();
    if sigma > 0.0 {
        for x in signals.iter_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *x += sigma * w;
        }
    }
    Ok(Dataset {
        signals,
        labels: d.labels.clone(),
        spec: d.spec.clone(),
    })
}

/// Ground-truth Gaussian mixture with unconstrained covariances (no graph
/// structure), used for robustness experiments.
#[derive(Debug, Clone)]
pub struct GaussianMixtureSpec {
    pub alpha: Array1<f64>,
    pub means: Vec<Array1<f64>>,
    pub covariances: Vec<Array2<f64>>,
}

impl GaussianMixtureSpec {
    /// Draw `m` samples; labels stored.
    pub fn sample(&self, m: usize, seed: Seed) -> Result<Dataset> {
        if m == 0 {
            return Err(Error::InvalidInput("need at least one sample".into()));
        }
        let n = self.means[0].len();
        let mut rng = seed.rng();

        // covariance square roots via eigendecomposition
        let mut factors = Vec::with_capacity(self.covariances.len());
        for cov in &self.covariances {
            let (vals, vecs) = crate::spectral::eigh_symmetric(cov)?;
            let sqrt_vals = vals.mapv(|v| v.max(0.0).sqrt());
            factors.push(&vecs * &sqrt_vals);
        }

        let mut signals = Array2::zeros((m, n));
        let mut assignments = Vec::with_capacity(m);
        for row in 0..m {
            let k = categorical(&self.alpha, &mut rng);
            assignments.push(k);
            let w = standard_normal_vec(n, &mut rng);
            let x = &self.means[k] + &factors[k].dot(&w);
            signals.row_mut(row).assign(&x);
        }
        Ok(Dataset {
            signals,
            labels: Some(Labels::new(assignments, self.alpha.len())?),
            spec: None,
        })
    }
}

/// Random GMM ground truth: covariances `(1/n) A A^T` with `A` an `n x n`
/// standard normal matrix (Wishart with identity scale, expectation `I`),
/// means `0.5 * N(0, I)`, uniform mixing.
pub fn generate_wishart_gmm(n: usize, k: usize, seed: Seed) -> Result<GaussianMixtureSpec> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("dimension must be >= 2, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidInput("need at least one cluster".into()));
    }
    let mut rng = seed.rng();
    let mut covariances = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        let a = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
        let mut cov = a.dot(&a.t()) / n as f64;
        // exact symmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
                cov[[i, j]] = avg;
                cov[[j, i]] = avg;
            }
        }
        covariances.push(cov);
        means.push(standard_normal_vec(n, &mut rng) * 0.5);
    }
    Ok(GaussianMixtureSpec {
        alpha: Array1::from_elem(k, 1.0 / k as f64),
        means,
        covariances,
    })
}

/// Corrupt labels: a uniformly chosen `floor(noise_fraction * M)`-subset of
/// signals gets its label resampled uniformly from the other `K - 1`
/// clusters, so every selected signal definitely changes cluster.
pub fn corrupt_labels(labels: &Labels, noise_fraction: f64, seed: Seed) -> Result<Labels> {
    if !(0.0..=1.0).contains(&noise_fraction) {
        return Err(Error::InvalidInput(format!(
            "noise_fraction must be in [0, 1], got {noise_fraction}"
        )));
    }
    let m = labels.len();
    let count = (noise_fraction * m as f64).floor() as usize;
    if count == 0 {
        return Ok(labels.clone());
    }
    if labels.k < 2 {
        return Err(Error::InvalidInput(
            "cannot corrupt labels with fewer than 2 clusters".into(),
        ));
    }
    let mut rng = seed.rng();
    let chosen = rand::seq::index::sample(&mut rng, m, count);
    let mut assignments = labels.assignments.clone();
    for idx in chosen.iter() {
        let old = assignments[idx];
        // uniform over the other K-1 clusters
        let shift = rng.random_range(1..labels.k);
        assignments[idx] = (old + shift) % labels.k;
    }
    Labels::new(assignments, labels.k)
}
