//! Dense symmetric eigendecomposition of Laplacians.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{Error, Result};
use crate::graph::Laplacian;

/// Relative rank tolerance: eigenvalues at or below `RANK_TOL_REL * lambda_max`
/// are treated as zero (pseudo-inverse cutoff, connectivity counting).
pub const RANK_TOL_REL: f64 = 1e-9;

/// Eigendecomposition `L = U diag(eigenvalues) U^T` with eigenvalues sorted
/// ascending and eigenvectors as the matching columns of an orthonormal `U`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(eigenvalues) U^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.eigenvectors * &self.eigenvalues;
        scaled.dot(&self.eigenvectors.t())
    }

    /// Absolute eigenvalue cutoff below which eigenvalues count as zero.
    pub fn rank_tolerance(&self) -> f64 {
        let lam_max = self.eigenvalues[self.eigenvalues.len() - 1].max(0.0);
        RANK_TOL_REL * lam_max
    }

    /// Number of eigenvalues at or below the rank tolerance. For a valid
    /// Laplacian this equals the number of connected components.
    pub fn null_count(&self) -> usize {
        let cut = self.rank_tolerance();
        self.eigenvalues.iter().filter(|&&lam| lam <= cut).count()
    }
}

/// Eigendecompose a symmetric matrix, eigenvalues ascending.
pub(crate) fn eigh_symmetric(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, vecs) = m
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numerical(format!("symmetric eigendecomposition failed: {e}")))?;
    Ok((vals, vecs))
}

/// Eigendecompose a Laplacian. Decomposition failure surfaces as an explicit
/// numerical error.
pub fn spectral_decompose(l: &Laplacian) -> Result<SpectralDecomposition> {
    let (eigenvalues, eigenvectors) = eigh_symmetric(l.matrix())?;
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}
