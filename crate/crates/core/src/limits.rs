//! Analytic limits of the sensitivity parameters as the number of
//! covariates grows, with the unobserved-to-observed ratio r = d2/d1 held
//! fixed, plus finite-K predictions where closed forms exist.

use crate::dgp::Structure;
use crate::error::{Error, Result};
use ndarray::Array1;
use serde::Serialize;

/// Limit of r_X (and r_Y) given r and the diagonal-contribution constant c.
pub fn limit_r_x(r: f64, c: f64) -> f64 {
    (r * (r + c) / (1.0 + r * c)).sqrt()
}

pub fn limit_r_y(r: f64, c: f64) -> f64 {
    limit_r_x(r, c)
}

/// Limit of the simple delta ratio; uses c for the outcome coefficients.
pub fn limit_delta_orig(r: f64, c_gamma: f64) -> f64 {
    (1.0 + r * c_gamma) / (r + c_gamma)
}

/// The per-coefficient residualized delta always tends to one.
pub fn limit_delta_acet() -> f64 {
    1.0
}

/// Limit of k_X for the shrinking-exchangeable structure with off-diagonal
/// alpha/K and coefficient concentration constant d (1 for flat π).
pub fn limit_k_x(r: f64, alpha: f64, d: f64) -> f64 {
    let num = alpha * r * r + d * r * (1.0 + r + alpha);
    let den = alpha * ((1.0 + r) * (1.0 + alpha) + r) + d * (1.0 + r + alpha);
    num / den
}

/// Finite-K value of the residualized delta ratio for independent unit
/// covariates, computed from the coefficient sums. For the calibrated
/// even/odd sequences this equals the target at every K.
pub fn delta_resid_finite_k(pi: &Array1<f64>, gamma: &Array1<f64>, r: f64) -> Result<f64> {
    let k = pi.len() as f64;
    let sp: f64 = pi.sum();
    let sg: f64 = gamma.sum();
    let spg: f64 = pi.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum();
    let sg2: f64 = gamma.iter().map(|g| g * g).sum();
    let den = r * sp * sg * sg + k * sp * sg2;
    if den.abs() <= 1e-14 {
        return Err(Error::DegenerateIndex);
    }
    Ok((r * sp * sg * sg + k * spg * sg) / den)
}

/// Diagonal-contribution constant c implied by a structure at
/// coefficient concentration d (where applicable).
pub fn prop_c_value(structure: &Structure, d: Option<f64>) -> Result<f64> {
    match structure {
        Structure::Ma1 { rho } => {
            let d = d.ok_or(Error::InvalidParameter(
                "lag-1 coefficient ratio required for the moving-average structure".into(),
            ))?;
            Ok(1.0 / (1.0 + 2.0 * rho * d))
        }
        Structure::Ar1 { .. } => {
            let d = d.ok_or(Error::InvalidParameter(
                "cross-lag coefficient ratio required for the autoregressive structure".into(),
            ))?;
            Ok(1.0 / (1.0 + d))
        }
        Structure::Factor { .. } | Structure::Exchangeable { .. } => Ok(0.0),
        Structure::ExchangeableShrink { alpha } => {
            let d = d.ok_or(Error::InvalidParameter(
                "concentration ratio required for the shrinking-exchangeable structure".into(),
            ))?;
            Ok(d / (d + alpha))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PropertyCheck {
    /// |curve(1)| within 1e-9 of 1.
    pub consistent: bool,
    /// |curve(r)| > 1 for every grid point r > 1 and < 1 for r < 1.
    pub monotone: bool,
}

/// Check the unit-crossing property of a limit curve over an r grid.
pub fn property_check(curve: impl Fn(f64) -> f64, r_grid: &[f64]) -> PropertyCheck {
    let consistent = (curve(1.0).abs() - 1.0).abs() <= 1e-9;
    let monotone = r_grid.iter().all(|&r| {
        let v = curve(r).abs();
        if r > 1.0 {
            v > 1.0
        } else if r < 1.0 {
            v < 1.0
        } else {
            true
        }
    });
    PropertyCheck { consistent, monotone }
}
