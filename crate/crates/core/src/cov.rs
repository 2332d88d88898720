use ndarray::{Array1, Array2};
use ndarray_linalg::{EigValsh, FactorizeC, UPLO};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Smallest eigenvalue must exceed this fraction of the largest diagonal entry.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Labeled symmetric positive-definite covariance matrix of (Y, X, W_1..W_K).
///
/// Index 0 is the outcome Y, index 1 the treatment X, indices 2..K+2 the
/// covariates. Every sensitivity parameter is a function of this object.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    labels: Vec<String>,
    sigma: Array2<f64>,
    k: usize,
}

/// Matrix index of the outcome variable.
pub const Y: usize = 0;
/// Matrix index of the treatment variable.
pub const X: usize = 1;

/// Matrix index of covariate `i` (zero-based).
pub fn w(i: usize) -> usize {
    2 + i
}

impl CovarianceModel {
    pub fn new(labels: Vec<String>, sigma: Array2<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n || n < 3 {
            return Err(Error::Config(format!(
                "covariance matrix must be square with dimension >= 3, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if labels.len() != n {
            return Err(Error::Config(format!(
                "{} labels for a {n}x{n} matrix",
                labels.len()
            )));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for l in &labels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::Config(format!("duplicate label {l:?}")));
                }
            }
        }
        let scale = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((sigma[(i, j)] - sigma[(j, i)]).abs());
            }
        }
        if max_asym / scale > SYMMETRY_TOLERANCE {
            return Err(Error::NotSymmetric(max_asym / scale));
        }
        let model = CovarianceModel {
            labels,
            sigma,
            k: n - 2,
        };
        model.check_positive_definite()?;
        Ok(model)
    }

    /// Convenience constructor with generated labels Y, X, W1..WK.
    pub fn with_default_labels(sigma: Array2<f64>) -> Result<Self> {
        let n = sigma.nrows();
        let mut labels = vec!["Y".to_string(), "X".to_string()];
        for i in 1..=n.saturating_sub(2) {
            labels.push(format!("W{i}"));
        }
        Self::new(labels, sigma)
    }

    fn check_positive_definite(&self) -> Result<()> {
        let n = self.sigma.nrows();
        let max_diag = (0..n).fold(0.0f64, |m, i| m.max(self.sigma[(i, i)]));
        if max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite(max_diag));
        }
        let tol = PD_TOLERANCE * max_diag;
        // Cholesky of (sigma - tol*I) succeeds iff the smallest eigenvalue
        // exceeds tol (up to rounding). Avoids a full eigendecomposition on
        // the happy path; the failure path reports the actual eigenvalue.
        let mut shifted = self.sigma.clone();
        for i in 0..n {
            shifted[(i, i)] -= tol;
        }
        if shifted.factorizec(UPLO::Lower).is_err() {
            let eig = self
                .sigma
                .eigvalsh(UPLO::Lower)
                .map(|ev| ev.iter().cloned().fold(f64::INFINITY, f64::min))
                .unwrap_or(f64::NAN);
            return Err(Error::NotPositiveDefinite(eig));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.k + 2
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    pub fn var(&self, i: usize) -> f64 {
        self.sigma[(i, i)]
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i, j)]
    }

    /// Dense copy of the (rows, cols) block.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), cols.len()));
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                out[(a, b)] = self.sigma[(i, j)];
            }
        }
        out
    }

    /// Covariances of variable `i` with each variable in `js`.
    pub fn cov_vector(&self, i: usize, js: &[usize]) -> Array1<f64> {
        Array1::from_iter(js.iter().map(|&j| self.sigma[(i, j)]))
    }
}
