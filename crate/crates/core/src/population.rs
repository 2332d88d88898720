//! Long-regression objects derived from a covariance model: β_long, γ, π.

use ndarray::Array1;

use crate::cov::{w, CovarianceModel, X, Y};
use crate::design::SelectionMask;
use crate::error::Result;
use crate::projection::{project, DEGENERATE_VARIANCE};

/// A covariance model together with the coefficients of the long outcome
/// projection Y ~ X + W and the treatment projection X ~ W, cached once so
/// that per-mask evaluation never re-solves the full system.
#[derive(Debug, Clone)]
pub struct Population {
    cov: CovarianceModel,
    beta_long: f64,
    gamma: Array1<f64>,
    pi: Array1<f64>,
    cov_x_w: Array1<f64>,
    cov_y_w: Array1<f64>,
    var_gamma_index: f64,
    var_pi_index: f64,
    r2_x_w: f64,
    r2_y_xw: f64,
    r2_y_x: f64,
}

/// Solve the long projections of the model and cache the derived objects.
pub fn derive_population(cov: CovarianceModel) -> Result<Population> {
    let k = cov.k();
    let w_idx: Vec<usize> = (0..k).map(w).collect();

    let mut y_preds = Vec::with_capacity(k + 1);
    y_preds.push(X);
    y_preds.extend_from_slice(&w_idx);
    let y_proj = project(&cov, Y, &y_preds)?;
    let beta_long = y_proj.coefficients[0];
    let gamma = y_proj.coefficients.slice(ndarray::s![1..]).to_owned();
    let r2_y_xw = y_proj.r_squared;

    let x_proj = project(&cov, X, &w_idx)?;
    let pi = x_proj.coefficients.clone();
    let r2_x_w = x_proj.r_squared;

    let cov_x_w = cov.cov_vector(X, &w_idx);
    let cov_y_w = cov.cov_vector(Y, &w_idx);

    let var_gamma_index = quad_form_full(&cov, &gamma);
    let var_pi_index = quad_form_full(&cov, &pi);

    let r2_y_x = {
        let c = cov.cov(Y, X);
        let vx = cov.var(X);
        let vy = cov.var(Y);
        if vx <= DEGENERATE_VARIANCE || vy <= DEGENERATE_VARIANCE {
            0.0
        } else {
            (c * c / vx / vy).clamp(0.0, 1.0)
        }
    };

    Ok(Population {
        cov,
        beta_long,
        gamma,
        pi,
        cov_x_w,
        cov_y_w,
        var_gamma_index,
        var_pi_index,
        r2_x_w,
        r2_y_xw,
        r2_y_x,
    })
}

fn quad_form_full(cov: &CovarianceModel, v: &Array1<f64>) -> f64 {
    let k = v.len();
    let mut acc = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            row += v[j] * cov.cov(w(i), w(j));
        }
        acc += v[i] * row;
    }
    acc
}

impl Population {
    pub fn cov(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn k(&self) -> usize {
        self.cov.k()
    }

    pub fn beta_long(&self) -> f64 {
        self.beta_long
    }

    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }

    pub fn pi(&self) -> &Array1<f64> {
        &self.pi
    }

    /// Cov(X, W_i) for all covariates.
    pub fn cov_x_w(&self) -> &Array1<f64> {
        &self.cov_x_w
    }

    /// Cov(Y, W_i) for all covariates.
    pub fn cov_y_w(&self) -> &Array1<f64> {
        &self.cov_y_w
    }

    pub fn var_gamma_index(&self) -> f64 {
        self.var_gamma_index
    }

    pub fn var_pi_index(&self) -> f64 {
        self.var_pi_index
    }

    /// True when Var(γ'W) is numerically zero: the outcome-side selection
    /// ratios are undefined and evaluate to failure codes.
    pub fn gamma_index_degenerate(&self) -> bool {
        self.var_gamma_index <= DEGENERATE_VARIANCE
    }

    pub fn pi_index_degenerate(&self) -> bool {
        self.var_pi_index <= DEGENERATE_VARIANCE
    }

    /// R² of X on the full covariate vector.
    pub fn r2_x_w(&self) -> f64 {
        self.r2_x_w
    }

    /// R² of Y on (X, W).
    pub fn r2_y_xw(&self) -> f64 {
        self.r2_y_xw
    }

    /// R² of Y on X alone.
    pub fn r2_y_x(&self) -> f64 {
        self.r2_y_x
    }

    /// Coefficient on X in the projection of Y on X and the observed
    /// covariates.
    pub fn beta_medium(&self, mask: &SelectionMask) -> Result<f64> {
        let observed = mask.observed();
        let mut preds = Vec::with_capacity(observed.len() + 1);
        preds.push(X);
        preds.extend(observed.iter().map(|&i| w(i)));
        let p = project(&self.cov, Y, &preds)?;
        Ok(p.coefficients[0])
    }

    /// Omitted variable bias from dropping the unobserved covariates:
    /// β_med − β_long.
    pub fn ovb(&self, mask: &SelectionMask) -> Result<f64> {
        Ok(self.beta_medium(mask)? - self.beta_long)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cov::{X, Y};
    use crate::design::SelectionMask;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn assemble(
        sigma_w: &Array2<f64>,
        pi: &Array1<f64>,
        gamma: &Array1<f64>,
        beta: f64,
        x_resid: f64,
        y_resid: f64,
    ) -> CovarianceModel {
        crate::dgp::assemble_model_from_parts(sigma_w, pi, gamma, beta, x_resid, y_resid).unwrap()
    }

    #[test]
    fn round_trip_identity_var_w() {
        let k = 4;
        let sigma_w = Array2::eye(k);
        let pi = array![0.1, 0.2, 0.3, 0.4];
        let gamma = array![0.4, 0.3, 0.2, 0.1];
        let m = assemble(&sigma_w, &pi, &gamma, 1.5, 1.0, 1.0);
        let pop = derive_population(m).unwrap();
        assert_abs_diff_eq!(pop.beta_long(), 1.5, epsilon = 1e-10);
        for i in 0..k {
            assert_abs_diff_eq!(pop.pi()[i], pi[i], epsilon = 1e-10);
            assert_abs_diff_eq!(pop.gamma()[i], gamma[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn single_uncorrelated_covariate() {
        let sigma = array![[2.0, 0.6, 0.0], [0.6, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let pop = derive_population(CovarianceModel::with_default_labels(sigma).unwrap()).unwrap();
        assert_abs_diff_eq!(pop.gamma()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pop.pi()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pop.beta_long(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn beta_medium_limits() {
        let sigma_w = array![[1.0, 0.3], [0.3, 1.0]];
        let m = assemble(&sigma_w, &array![0.5, -0.2], &array![0.3, 0.7], 2.0, 1.0, 1.0);
        let pop = derive_population(m).unwrap();
        let all = SelectionMask::from_indices(2, &[0, 1]).unwrap();
        assert_abs_diff_eq!(pop.beta_medium(&all).unwrap(), pop.beta_long(), epsilon = 1e-10);
        assert_abs_diff_eq!(pop.ovb(&all).unwrap(), 0.0, epsilon = 1e-10);
        let none = SelectionMask::from_indices(2, &[]).unwrap();
        let short = pop.cov().cov(Y, X) / pop.cov().var(X);
        assert_abs_diff_eq!(pop.beta_medium(&none).unwrap(), short, epsilon = 1e-10);
    }

    #[test]
    fn gamma_zero_means_no_ovb() {
        let sigma_w = array![[1.0, 0.4], [0.4, 1.0]];
        let m = assemble(&sigma_w, &array![0.5, 0.3], &array![0.0, 0.0], 1.0, 1.0, 1.0);
        let pop = derive_population(m).unwrap();
        for obs in [vec![0usize], vec![1], vec![0, 1], vec![]] {
            let mask = SelectionMask::from_indices(2, &obs).unwrap();
            assert_abs_diff_eq!(pop.ovb(&mask).unwrap(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn rescaling_x_and_y() {
        let sigma_w = array![[1.0, 0.2], [0.2, 1.5]];
        let pi = array![0.4, 0.1];
        let gamma = array![0.2, 0.5];
        let base = assemble(&sigma_w, &pi, &gamma, 1.2, 1.0, 1.0);
        let pop = derive_population(base.clone()).unwrap();

        // X -> 2X scales row/col X by 2: beta/2, pi*2, gamma unchanged.
        let mut s2 = base.sigma().clone();
        for i in 0..s2.nrows() {
            s2[(1, i)] *= 2.0;
            s2[(i, 1)] *= 2.0;
        }
        let pop2 =
            derive_population(CovarianceModel::with_default_labels(s2).unwrap()).unwrap();
        assert_abs_diff_eq!(pop2.beta_long(), pop.beta_long() / 2.0, epsilon = 1e-10);
        for i in 0..2 {
            assert_abs_diff_eq!(pop2.pi()[i], 2.0 * pop.pi()[i], epsilon = 1e-10);
            assert_abs_diff_eq!(pop2.gamma()[i], pop.gamma()[i], epsilon = 1e-10);
        }

        // Y -> 3Y: beta*3, gamma*3, pi unchanged.
        let mut s3 = base.sigma().clone();
        for i in 0..s3.nrows() {
            s3[(0, i)] *= 3.0;
            s3[(i, 0)] *= 3.0;
        }
        let pop3 =
            derive_population(CovarianceModel::with_default_labels(s3).unwrap()).unwrap();
        assert_abs_diff_eq!(pop3.beta_long(), 3.0 * pop.beta_long(), epsilon = 1e-10);
        for i in 0..2 {
            assert_abs_diff_eq!(pop3.gamma()[i], 3.0 * pop.gamma()[i], epsilon = 1e-10);
            assert_abs_diff_eq!(pop3.pi()[i], pop.pi()[i], epsilon = 1e-10);
        }
    }
}
