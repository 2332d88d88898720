//! Generators for populations with known covariance structure and
//! coefficient sequences, plus numerical validation of the regularity
//! conditions the asymptotic results rely on.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cov::CovarianceModel;
use crate::design::{selection_quadratic_variance, draw_rng};
use crate::error::{Error, Result};
use crate::population::{derive_population, Population};

/// Covariance structure of the covariate vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Structure {
    /// Unit variances, correlation `rho` at lag 1, zero beyond. |rho| < 1/2.
    Ma1 { rho: f64 },
    /// Toeplitz rho^|i-j|. |rho| < 1.
    Ar1 { rho: f64 },
    /// Λ Λ' + σ²_E I for a K×R loading matrix.
    Factor {
        loadings: Vec<Vec<f64>>,
        sigma_e2: f64,
    },
    /// Unit variances, common correlation rho ∈ (0, 1).
    Exchangeable { rho: f64 },
    /// Unit variances, off-diagonal alpha/K with alpha ∈ (−1, K).
    ExchangeableShrink { alpha: f64 },
}

/// Coefficient-sequence rule for π or γ.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CoefRule {
    /// Constant c/√K.
    Flat { c: f64 },
    /// Alternating-sign c/√K.
    Alternating { c: f64 },
    /// Even/odd split calibrated so that the residualized delta ratio has
    /// limit `target` at unobserved-observed ratio `r`: with
    /// C' = target·(r+2) − r, π is (2−C')/K on odd positions and C'/K on
    /// even positions, while γ is 2/K on even positions and 0 on odd ones
    /// (1-based positions).
    ResidTarget { target: f64, r: f64 },
    /// Verbatim vector (length must equal K).
    Explicit { values: Vec<f64> },
}

/// Which coefficient vector a rule is instantiating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefRole {
    Pi,
    Gamma,
}

fn default_one() -> f64 {
    1.0
}

/// Declarative description of a synthetic population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub structure: Structure,
    pub pi_rule: CoefRule,
    pub gamma_rule: CoefRule,
    #[serde(default = "default_one")]
    pub x_resid_var: f64,
    #[serde(default = "default_one")]
    pub y_resid_var: f64,
    #[serde(default = "default_one")]
    pub beta_long: f64,
}

/// Materialize Var(W) for the requested structure and dimension.
pub fn build_cov(structure: &Structure, k: usize) -> Result<Array2<f64>> {
    if k < 2 {
        return Err(Error::InvalidParameter("need k >= 2".into()));
    }
    match structure {
        Structure::Ma1 { rho } => {
            if rho.abs() >= 0.5 {
                return Err(Error::InvalidParameter(format!(
                    "moving-average correlation must satisfy |rho| < 1/2, got {rho}"
                )));
            }
            let mut s = Array2::eye(k);
            for i in 0..(k - 1) {
                s[(i, i + 1)] = *rho;
                s[(i + 1, i)] = *rho;
            }
            Ok(s)
        }
        Structure::Ar1 { rho } => {
            if rho.abs() >= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "autoregressive correlation must satisfy |rho| < 1, got {rho}"
                )));
            }
            let mut s = Array2::zeros((k, k));
            for i in 0..k {
                let mut v = 1.0;
                s[(i, i)] = 1.0;
                for j in (i + 1)..k {
                    v *= rho;
                    s[(i, j)] = v;
                    s[(j, i)] = v;
                }
            }
            Ok(s)
        }
        Structure::Factor { loadings, sigma_e2 } => {
            if *sigma_e2 <= 0.0 {
                return Err(Error::InvalidParameter(
                    "factor idiosyncratic variance must be positive".into(),
                ));
            }
            if loadings.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "loading matrix has {} rows, expected {k}",
                    loadings.len()
                )));
            }
            let r = loadings.first().map(|row| row.len()).unwrap_or(0);
            if r == 0 || loadings.iter().any(|row| row.len() != r) {
                return Err(Error::InvalidParameter(
                    "loading matrix rows must be non-empty and equal-length".into(),
                ));
            }
            let mut lam = Array2::zeros((k, r));
            for (i, row) in loadings.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    lam[(i, j)] = v;
                }
            }
            let mut s = lam.dot(&lam.t());
            for i in 0..k {
                s[(i, i)] += sigma_e2;
            }
            Ok(s)
        }
        Structure::Exchangeable { rho } => {
            if !(0.0 < *rho && *rho < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "exchangeable correlation must lie in (0,1), got {rho}"
                )));
            }
            let mut s = Array2::from_elem((k, k), *rho);
            for i in 0..k {
                s[(i, i)] = 1.0;
            }
            Ok(s)
        }
        Structure::ExchangeableShrink { alpha } => {
            if !(*alpha > -1.0 && *alpha < k as f64) {
                return Err(Error::InvalidParameter(format!(
                    "shrinking-exchangeable alpha must lie in (-1, K), got {alpha}"
                )));
            }
            let off = alpha / k as f64;
            let mut s = Array2::from_elem((k, k), off);
            for i in 0..k {
                s[(i, i)] = 1.0;
            }
            Ok(s)
        }
    }
}

/// Instantiate a coefficient rule at dimension K for the given role.
pub fn build_coefficients(rule: &CoefRule, role: CoefRole, k: usize) -> Result<Array1<f64>> {
    if k < 2 {
        return Err(Error::InvalidParameter("need k >= 2".into()));
    }
    match rule {
        CoefRule::Flat { c } => Ok(Array1::from_elem(k, c / (k as f64).sqrt())),
        CoefRule::Alternating { c } => {
            let base = c / (k as f64).sqrt();
            Ok(Array1::from_iter(
                (0..k).map(|i| if i % 2 == 0 { base } else { -base }),
            ))
        }
        CoefRule::ResidTarget { target, r } => {
            let c_prime = target * (r + 2.0) - r;
            let kf = k as f64;
            Ok(Array1::from_iter((1..=k).map(|i| {
                let even = i % 2 == 0;
                match role {
                    CoefRole::Gamma => {
                        if even {
                            2.0 / kf
                        } else {
                            0.0
                        }
                    }
                    CoefRole::Pi => {
                        if even {
                            c_prime / kf
                        } else {
                            (2.0 - c_prime) / kf
                        }
                    }
                }
            })))
        }
        CoefRule::Explicit { values } => {
            if values.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "explicit coefficient vector has length {}, expected {k}",
                    values.len()
                )));
            }
            Ok(Array1::from_vec(values.clone()))
        }
    }
}

/// Assemble the full (Y, X, W) covariance from Var(W), the projection
/// coefficients, and the residual variances:
/// Cov(X,W) = Var(W)π, Var(X) = π'Var(W)π + Var(X^⊥W),
/// Cov(Y,W) = β Cov(X,W) + Var(W)γ, and so on.
pub fn assemble_model_from_parts(
    sigma_w: &Array2<f64>,
    pi: &Array1<f64>,
    gamma: &Array1<f64>,
    beta: f64,
    x_resid_var: f64,
    y_resid_var: f64,
) -> Result<CovarianceModel> {
    let k = sigma_w.nrows();
    if pi.len() != k || gamma.len() != k {
        return Err(Error::InvalidParameter(
            "coefficient lengths must match Var(W)".into(),
        ));
    }
    if x_resid_var <= 0.0 || y_resid_var <= 0.0 {
        return Err(Error::InvalidParameter(
            "residual variances must be positive".into(),
        ));
    }
    let cov_xw = sigma_w.dot(pi);
    let sigma_gamma = sigma_w.dot(gamma);
    let var_x = pi.dot(&cov_xw) + x_resid_var;
    let gsp = gamma.dot(&cov_xw);
    let cov_yx = beta * var_x + gsp;
    let var_y = beta * beta * var_x + gamma.dot(&sigma_gamma) + 2.0 * beta * gsp + y_resid_var;
    let n = k + 2;
    let mut sigma = Array2::zeros((n, n));
    sigma[(0, 0)] = var_y;
    sigma[(0, 1)] = cov_yx;
    sigma[(1, 0)] = cov_yx;
    sigma[(1, 1)] = var_x;
    for i in 0..k {
        let cyw = beta * cov_xw[i] + sigma_gamma[i];
        sigma[(0, 2 + i)] = cyw;
        sigma[(2 + i, 0)] = cyw;
        sigma[(1, 2 + i)] = cov_xw[i];
        sigma[(2 + i, 1)] = cov_xw[i];
        for j in 0..k {
            sigma[(2 + i, 2 + j)] = sigma_w[(i, j)];
        }
    }
    CovarianceModel::with_default_labels(sigma)
}

/// Build the population described by the spec at dimension K.
pub fn assemble_population(spec: &DgpSpec, k: usize) -> Result<Population> {
    let sigma_w = build_cov(&spec.structure, k)?;
    let pi = build_coefficients(&spec.pi_rule, CoefRole::Pi, k)?;
    let gamma = build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k)?;
    let model = assemble_model_from_parts(
        &sigma_w,
        &pi,
        &gamma,
        spec.beta_long,
        spec.x_resid_var,
        spec.y_resid_var,
    )?;
    derive_population(model)
}

/// Finite-K relative diagonal contribution to index variance:
/// c = Σ_i Var(π_i W_i) / Var(π'W), for both coefficient vectors.
pub fn c_constants(spec: &DgpSpec, k: usize) -> Result<(f64, f64)> {
    let sigma_w = build_cov(&spec.structure, k)?;
    let pi = build_coefficients(&spec.pi_rule, CoefRole::Pi, k)?;
    let gamma = build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k)?;
    Ok((
        c_ratio(&sigma_w, &pi)?,
        c_ratio(&sigma_w, &gamma)?,
    ))
}

fn c_ratio(sigma_w: &Array2<f64>, v: &Array1<f64>) -> Result<f64> {
    let total = v.dot(&sigma_w.dot(v));
    if total <= 1e-14 {
        return Err(Error::DegenerateIndex);
    }
    let diag: f64 = (0..v.len()).map(|i| v[i] * v[i] * sigma_w[(i, i)]).sum();
    Ok(diag / total)
}

/// Finite-K structure constants entering the analytic limit formulas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DConstants {
    pub d_pi: Option<f64>,
    pub d_gamma: Option<f64>,
}

/// Structure-specific coefficient ratios: lag-1 for the moving-average
/// structure, full cross-lag for the autoregressive one, and the
/// concentration ratio K·Σv²/(Σv)² for the shrinking-exchangeable one.
/// None for structures whose limits do not use such a constant.
pub fn d_constants(spec: &DgpSpec, k: usize) -> Result<DConstants> {
    let pi = build_coefficients(&spec.pi_rule, CoefRole::Pi, k)?;
    let gamma = build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k)?;
    let d = |v: &Array1<f64>| -> Result<f64> {
        let sum_sq: f64 = v.iter().map(|x| x * x).sum();
        if sum_sq <= 1e-14 {
            return Err(Error::DegenerateIndex);
        }
        match &spec.structure {
            Structure::Ma1 { .. } => {
                let lag1: f64 = (0..(k - 1)).map(|i| v[i] * v[i + 1]).sum();
                Ok(lag1 / sum_sq)
            }
            Structure::Ar1 { rho } => {
                let mut cross = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        if i != j {
                            cross += v[i] * v[j] * rho.powi((i as i32 - j as i32).abs());
                        }
                    }
                }
                Ok(cross / sum_sq)
            }
            Structure::ExchangeableShrink { .. } => {
                let sum: f64 = v.iter().sum();
                if sum.abs() <= 1e-14 {
                    return Err(Error::DegenerateIndex);
                }
                Ok(k as f64 * sum_sq / (sum * sum))
            }
            Structure::Factor { .. } | Structure::Exchangeable { .. } => {
                Err(Error::InvalidParameter(
                    "no structure constant defined for this covariance family".into(),
                ))
            }
        }
    };
    let wrap = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::InvalidParameter(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(DConstants {
        d_pi: wrap(d(&pi))?,
        d_gamma: wrap(d(&gamma))?,
    })
}

/// Measured regularity diagnostics at one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionPoint {
    pub k: usize,
    pub var_pi_index: f64,
    pub var_gamma_index: f64,
    pub cov_x_gamma_index: f64,
    pub c_pi: f64,
    pub c_gamma: f64,
    pub d_pi: Option<f64>,
    pub d_gamma: Option<f64>,
    /// Normalized design variance of the observed-block index variance
    /// Σ_ij S_i S_j v_i v_j σ_ij at d1 = round(K/2); must vanish along the
    /// grid for the selection-average law of large numbers.
    pub lln_var_pi: f64,
    pub lln_var_gamma: f64,
    /// Σ_i Cov(X, γ_i W_i)²: no single covariate may dominate.
    pub outlier_sum_x: f64,
    /// Σ_i Cov(γ'W, γ_i W_i)².
    pub outlier_sum_gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub points: Vec<AssumptionPoint>,
    pub var_bounds_ok: bool,
    pub lln_decreasing: bool,
    pub outliers_decreasing: bool,
    /// Set when |Cov(X, γ'W)| < 0.05 at the largest K: the delta limits
    /// additionally require this covariance bounded away from zero.
    pub low_cov_warning: bool,
}

/// Evaluate the regularity diagnostics along an increasing K grid.
pub fn validate_assumptions(spec: &DgpSpec, k_grid: &[usize]) -> Result<AssumptionReport> {
    if k_grid.is_empty() || k_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("k grid must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let sigma_w = build_cov(&spec.structure, k)?;
        let pi = build_coefficients(&spec.pi_rule, CoefRole::Pi, k)?;
        let gamma = build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k)?;
        let cov_xw = sigma_w.dot(&pi);
        let sigma_gamma = sigma_w.dot(&gamma);
        let var_pi_index = pi.dot(&cov_xw);
        let var_gamma_index = gamma.dot(&sigma_gamma);
        let cov_x_gamma_index = gamma.dot(&cov_xw);
        let (c_pi, c_gamma) = c_constants(spec, k)?;
        let dcs = d_constants(spec, k)?;

        let d1 = (k + 1) / 2;
        let lln = |v: &Array1<f64>, total_var: f64| -> f64 {
            let mut m = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] = v[i] * v[j] * sigma_w[(i, j)];
                }
            }
            let var_s = selection_quadratic_variance(&m, d1);
            if total_var <= 1e-14 {
                f64::INFINITY
            } else {
                var_s / (total_var * total_var)
            }
        };
        let lln_var_pi = lln(&pi, var_pi_index);
        let lln_var_gamma = lln(&gamma, var_gamma_index);

        let outlier_sum_x: f64 = (0..k).map(|i| (gamma[i] * cov_xw[i]).powi(2)).sum();
        let outlier_sum_gamma: f64 = (0..k).map(|i| (gamma[i] * sigma_gamma[i]).powi(2)).sum();

        points.push(AssumptionPoint {
            k,
            var_pi_index,
            var_gamma_index,
            cov_x_gamma_index,
            c_pi,
            c_gamma,
            d_pi: dcs.d_pi,
            d_gamma: dcs.d_gamma,
            lln_var_pi,
            lln_var_gamma,
            outlier_sum_x,
            outlier_sum_gamma,
        });
    }

    let var_bounds_ok = points.iter().all(|p| {
        p.var_pi_index > 1e-8
            && p.var_pi_index < 1e8
            && p.var_gamma_index > 1e-8
            && p.var_gamma_index < 1e8
    });
    let decreasing = |f: fn(&AssumptionPoint) -> f64| -> bool {
        points.windows(2).all(|w| f(&w[1]) <= f(&w[0]) * 1.05)
    };
    let lln_decreasing =
        decreasing(|p| p.lln_var_pi) && decreasing(|p| p.lln_var_gamma);
    let outliers_decreasing =
        decreasing(|p| p.outlier_sum_x) && decreasing(|p| p.outlier_sum_gamma);
    let low_cov_warning = points
        .last()
        .map(|p| p.cov_x_gamma_index.abs() < 0.05)
        .unwrap_or(true);

    Ok(AssumptionReport {
        points,
        var_bounds_ok,
        lln_decreasing,
        outliers_decreasing,
        low_cov_warning,
    })
}

/// A reproducible random positive-definite population, handy for structure
/// checks that need no particular covariance family.
pub fn synthetic_population(k: usize, seed: u64) -> Result<Population> {
    let mut rng = draw_rng(seed, 0);
    let mut g = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            g[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let mut sigma_w = g.dot(&g.t()) / k as f64;
    for i in 0..k {
        sigma_w[(i, i)] += 0.5;
    }
    let scale = 1.0 / (k as f64).sqrt();
    let pi = Array1::from_iter((0..k).map(|_| rng.gen_range(0.2..1.0) * scale));
    let gamma = Array1::from_iter((0..k).map(|_| rng.gen_range(0.2..1.0) * scale));
    let model = assemble_model_from_parts(&sigma_w, &pi, &gamma, 1.0, 1.0, 1.0)?;
    derive_population(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn ma_matrix() {
        let s = build_cov(&Structure::Ma1 { rho: 0.3 }, 3).unwrap();
        let expect = array![[1.0, 0.3, 0.0], [0.3, 1.0, 0.3], [0.0, 0.3, 1.0]];
        assert_eq!(s, expect);
        assert!(build_cov(&Structure::Ma1 { rho: 0.5 }, 3).is_err());
    }

    #[test]
    fn ar_zero_rho_is_identity() {
        let s = build_cov(&Structure::Ar1 { rho: 0.0 }, 4).unwrap();
        assert_eq!(s, Array2::<f64>::eye(4));
    }

    #[test]
    fn exchangeable_equals_rank_one_factor() {
        let k = 5;
        let rho: f64 = 0.5;
        let ex = build_cov(&Structure::Exchangeable { rho }, k).unwrap();
        let fac = build_cov(
            &Structure::Factor {
                loadings: vec![vec![rho.sqrt()]; k],
                sigma_e2: 1.0 - rho,
            },
            k,
        )
        .unwrap();
        for i in 0..k {
            for j in 0..k {
                assert_abs_diff_eq!(ex[(i, j)], fac[(i, j)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn structures_are_positive_definite() {
        use ndarray_linalg::{FactorizeC, UPLO};
        let cases: Vec<Structure> = vec![
            Structure::Ma1 { rho: 0.49 },
            Structure::Ma1 { rho: -0.49 },
            Structure::Ar1 { rho: 0.95 },
            Structure::Ar1 { rho: -0.95 },
            Structure::Exchangeable { rho: 0.9 },
            Structure::ExchangeableShrink { alpha: -0.9 },
            Structure::ExchangeableShrink { alpha: 10.0 },
        ];
        for s in cases {
            for k in [2usize, 17, 100] {
                if let Structure::ExchangeableShrink { alpha } = s {
                    if alpha >= k as f64 {
                        continue;
                    }
                }
                let m = build_cov(&s, k).unwrap();
                assert!(m.factorizec(UPLO::Lower).is_ok(), "{s:?} k={k}");
            }
        }
    }

    #[test]
    fn flat_coefficients() {
        let v = build_coefficients(&CoefRule::Flat { c: 1.0 }, CoefRole::Pi, 4).unwrap();
        assert_eq!(v, array![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn resid_target_sequences() {
        // target=3, r=1: C' = 3·3 − 1 = 8.
        let pi =
            build_coefficients(&CoefRule::ResidTarget { target: 3.0, r: 1.0 }, CoefRole::Pi, 4)
                .unwrap();
        let gamma = build_coefficients(
            &CoefRule::ResidTarget { target: 3.0, r: 1.0 },
            CoefRole::Gamma,
            4,
        )
        .unwrap();
        assert_eq!(pi, array![-1.5, 2.0, -1.5, 2.0]);
        assert_eq!(gamma, array![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn explicit_passthrough_and_length_check() {
        let v = build_coefficients(
            &CoefRule::Explicit {
                values: vec![1.0, -2.0, 3.0],
            },
            CoefRole::Gamma,
            3,
        )
        .unwrap();
        assert_eq!(v, array![1.0, -2.0, 3.0]);
        assert!(build_coefficients(
            &CoefRule::Explicit { values: vec![1.0] },
            CoefRole::Gamma,
            3
        )
        .is_err());
    }

    #[test]
    fn assemble_round_trip() {
        let spec = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 0.5 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 2.0,
        };
        let k = 50;
        let pop = assemble_population(&spec, k).unwrap();
        let pi = build_coefficients(&spec.pi_rule, CoefRole::Pi, k).unwrap();
        let gamma = build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k).unwrap();
        assert_abs_diff_eq!(pop.beta_long(), 2.0, epsilon = 1e-8);
        for i in 0..k {
            assert_abs_diff_eq!(pop.pi()[i], pi[i], epsilon = 1e-8);
            assert_abs_diff_eq!(pop.gamma()[i], gamma[i], epsilon = 1e-8);
        }
        // Var(π'W) for the lag-1 structure: Σπ² + 2ρ Σ π_i π_{i+1}.
        let expect: f64 = pi.iter().map(|x| x * x).sum::<f64>()
            + 2.0 * 0.3 * (0..(k - 1)).map(|i| pi[i] * pi[i + 1]).sum::<f64>();
        assert_abs_diff_eq!(pop.var_pi_index(), expect, epsilon = 1e-12);
    }

    #[test]
    fn c_constants_diagonal_is_one() {
        let spec = DgpSpec {
            structure: Structure::Ar1 { rho: 0.0 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let (cp, cg) = c_constants(&spec, 10).unwrap();
        assert_abs_diff_eq!(cp, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cg, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn c_constant_exchangeable_vanishes() {
        let spec = DgpSpec {
            structure: Structure::Exchangeable { rho: 0.5 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let (cp, _) = c_constants(&spec, 5000).unwrap();
        assert!(cp < 0.01, "c_pi = {cp}");
    }

    #[test]
    fn c_constant_ma_flat() {
        let spec = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let (cp, _) = c_constants(&spec, 2000).unwrap();
        assert!((cp - 0.625).abs() < 0.01, "c_pi = {cp}");
    }

    #[test]
    fn d_constants_flat() {
        let ma = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Alternating { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let k = 40;
        let d = d_constants(&ma, k).unwrap();
        assert_abs_diff_eq!(d.d_pi.unwrap(), (k as f64 - 1.0) / k as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(
            d.d_gamma.unwrap(),
            -(k as f64 - 1.0) / k as f64,
            epsilon = 1e-12
        );

        let ex = DgpSpec {
            structure: Structure::ExchangeableShrink { alpha: 1.0 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let d = d_constants(&ex, 16).unwrap();
        assert_abs_diff_eq!(d.d_pi.unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn validation_flags_outlier() {
        let healthy = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let rep = validate_assumptions(&healthy, &[100, 400, 1600]).unwrap();
        assert!(rep.var_bounds_ok);
        assert!(rep.lln_decreasing);
        assert!(rep.outliers_decreasing);
        assert!(!rep.low_cov_warning);
        // Roughly 1/K decay of the outlier sums.
        let ratio = rep.points[2].outlier_sum_x / rep.points[0].outlier_sum_x;
        assert!(ratio < 0.12, "decay ratio {ratio}");

        let spike = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Explicit {
                values: {
                    let mut v = vec![0.0; 400];
                    v[0] = 0.9;
                    v
                },
            },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        // Single-K report: the spike keeps the design variance from
        // vanishing relative to a flat benchmark of the same size.
        let rep_spike = validate_assumptions(&spike, &[400]).unwrap();
        let rep_flat = validate_assumptions(&healthy, &[400]).unwrap();
        assert!(rep_spike.points[0].lln_var_gamma > 100.0 * rep_flat.points[0].lln_var_gamma);
        assert!(
            rep_spike.points[0].outlier_sum_gamma > 100.0 * rep_flat.points[0].outlier_sum_gamma
        );
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = DgpSpec {
            structure: Structure::ExchangeableShrink { alpha: 2.0 },
            pi_rule: CoefRule::ResidTarget { target: 3.0, r: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let text = toml::to_string(&spec).unwrap();
        let back: DgpSpec = toml::from_str(&text).unwrap();
        match back.structure {
            Structure::ExchangeableShrink { alpha } => assert_eq!(alpha, 2.0),
            other => panic!("{other:?}"),
        }
    }
}
