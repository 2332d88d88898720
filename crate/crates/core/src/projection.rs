//! Covariance-level linear projection algebra.
//!
//! Every sensitivity parameter reduces to Schur complements and quadratic
//! forms of the population covariance matrix; this module owns those solves.

use ndarray::{Array1, Array2};
use ndarray_linalg::{CholeskyFactorized, FactorizeC, SolveC, UPLO};

use crate::cov::CovarianceModel;
use crate::error::{Error, Result};

/// Residual orthogonality / clamping tolerance (relative).
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-10;
/// Variance below which a residualized target counts as fully explained.
pub const DEGENERATE_VARIANCE: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// Aligned to the predictor index set, in the given order.
    pub coefficients: Array1<f64>,
    pub residual_variance: f64,
    pub r_squared: f64,
}

/// Cholesky-factorize a symmetric PD matrix; failure signals singularity.
pub fn spd_factorize(a: &Array2<f64>) -> Result<CholeskyFactorized<ndarray::OwnedRepr<f64>>> {
    a.factorizec(UPLO::Lower)
        .map_err(|_| Error::SingularSubmatrix)
}

/// Solve A x = b for symmetric PD A.
pub fn spd_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let f = spd_factorize(a)?;
    f.solvec(b).map_err(|_| Error::SingularSubmatrix)
}

/// Solve A X = B column-by-column for symmetric PD A.
pub fn spd_solve_multi(
    f: &CholeskyFactorized<ndarray::OwnedRepr<f64>>,
    b: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let x = f
            .solvec(&col.to_owned())
            .map_err(|_| Error::SingularSubmatrix)?;
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}

/// Population linear projection of `target` on `predictors`, from covariances
/// alone: coefficients solve Var(predictors) b = Cov(predictors, target).
pub fn project(
    model: &CovarianceModel,
    target: usize,
    predictors: &[usize],
) -> Result<ProjectionResult> {
    if predictors.is_empty() {
        return Err(Error::Config("empty predictor set".into()));
    }
    if predictors.contains(&target) {
        return Err(Error::Config(
            "target must not appear among predictors".into(),
        ));
    }
    let vpp = model.block(predictors, predictors);
    let c = model.cov_vector(target, predictors);
    let b = spd_solve(&vpp, &c)?;
    let var_t = model.var(target);
    let explained = c.dot(&b);
    let mut residual_variance = var_t - explained;
    let scale = var_t.abs().max(explained.abs()).max(1e-300);
    if residual_variance < 0.0 {
        if residual_variance > -ORTHOGONALITY_TOLERANCE * scale {
            residual_variance = 0.0;
        } else {
            return Err(Error::Internal(format!(
                "negative residual variance {residual_variance:.3e} beyond tolerance"
            )));
        }
    }
    // The residual must be uncorrelated with every predictor.
    let fitted = vpp.dot(&b);
    for (i, (&ci, &fi)) in c.iter().zip(fitted.iter()).enumerate() {
        if (ci - fi).abs() > ORTHOGONALITY_TOLERANCE * scale.max(ci.abs()) {
            return Err(Error::Internal(format!(
                "residual correlated with predictor {i}: gap {:.3e}",
                ci - fi
            )));
        }
    }
    let r_squared = if var_t <= 0.0 {
        0.0
    } else {
        (1.0 - residual_variance / var_t).clamp(0.0, 1.0)
    };
    Ok(ProjectionResult {
        coefficients: b,
        residual_variance,
        r_squared,
    })
}

/// Var(A) − Cov(A,B) Var(B)^{-1} Cov(B,A): the covariance of A residualized
/// on B (Schur complement of the B block).
pub fn residual_covariance(
    model: &CovarianceModel,
    a_set: &[usize],
    b_set: &[usize],
) -> Result<Array2<f64>> {
    if b_set.is_empty() {
        return Err(Error::Config("empty conditioning set".into()));
    }
    if a_set.iter().any(|i| b_set.contains(i)) {
        return Err(Error::Config("a_set and b_set must be disjoint".into()));
    }
    let vaa = model.block(a_set, a_set);
    let vab = model.block(a_set, b_set);
    let vbb = model.block(b_set, b_set);
    let f = spd_factorize(&vbb)?;
    let solved = spd_solve_multi(&f, &vab.t().to_owned())?; // Var(B)^{-1} Cov(B,A)
    let mut out = &vaa - &vab.dot(&solved);
    // Symmetrize rounding noise.
    let n = out.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    Ok(out)
}

/// R-squared of target^⊥controls on added^⊥controls. With no controls this is
/// the plain projection R-squared.
pub fn partial_r_squared(
    model: &CovarianceModel,
    target: usize,
    added: &[usize],
    controls: &[usize],
) -> Result<f64> {
    if added.is_empty() {
        return Err(Error::Config("empty added set".into()));
    }
    if added.contains(&target)
        || controls.contains(&target)
        || added.iter().any(|i| controls.contains(i))
    {
        return Err(Error::Config(
            "target, added, controls must be pairwise disjoint".into(),
        ));
    }
    if controls.is_empty() {
        return project(model, target, added).map(|p| p.r_squared);
    }
    let mut joint = vec![target];
    joint.extend_from_slice(added);
    let rc = residual_covariance(model, &joint, controls)?;
    let var_t = rc[(0, 0)];
    if var_t <= DEGENERATE_VARIANCE {
        return Err(Error::DegenerateTarget(var_t));
    }
    let m = added.len();
    let a = rc.slice(ndarray::s![1..(1 + m), 1..(1 + m)]).to_owned();
    let c = rc.slice(ndarray::s![0, 1..(1 + m)]).to_owned();
    let b = spd_solve(&a, &c)?;
    Ok((c.dot(&b) / var_t).clamp(0.0, 1.0))
}

/// R-squared from raw pieces: explained share c' V^{-1} c / var_t.
pub fn r_squared_from_parts(var_t: f64, cov_tp: &Array1<f64>, var_p: &Array2<f64>) -> Result<f64> {
    if var_t <= DEGENERATE_VARIANCE {
        return Err(Error::DegenerateTarget(var_t));
    }
    let b = spd_solve(var_p, cov_tp)?;
    Ok((cov_tp.dot(&b) / var_t).clamp(0.0, 1.0))
}
