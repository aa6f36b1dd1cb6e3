//! Comparison methods: full-covariance Gaussian mixture EM and K-means
//! followed by per-cluster graph learning.

mod gmm;
mod kmeans;

pub use gmm::{
    fit_gmm, gmm_predict, graph_from_precision, helmert_complement_basis, precision_to_graph,
    GmmConfig, GmmModel,
};
pub use kmeans::{fit_kmeans, kmeans_plus_graph_learning, KMeansConfig, KMeansFit, KMeansGlFit};
