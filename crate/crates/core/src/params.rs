//! The eleven sensitivity parameters, evaluated as functions of a population
//! and a selection mask.
//!
//! All parameters are ratios of covariance-level quantities of the observed
//! and unobserved blocks. Undefined ratios never surface as NaN; they become
//! typed failure codes.

use ndarray::{Array1, Array2, OwnedRepr};
use ndarray_linalg::{CholeskyFactorized, FactorizeC, SolveC, UPLO};
use serde::{Deserialize, Serialize};

use crate::cov::{w, X, Y};
use crate::design::SelectionMask;
use crate::population::Population;
use crate::projection;

/// Absolute threshold below which a denominator counts as zero.
pub const EPS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamId {
    DeltaOrig,
    DeltaResid,
    DeltaAcet,
    RX,
    RY,
    KX,
    KY,
    KXAlt,
    KYAlt,
    KYAlt2,
    LambdaKrauth,
}

impl ParamId {
    pub const ALL: [ParamId; 11] = [
        ParamId::DeltaOrig,
        ParamId::DeltaResid,
        ParamId::DeltaAcet,
        ParamId::RX,
        ParamId::RY,
        ParamId::KX,
        ParamId::KY,
        ParamId::KXAlt,
        ParamId::KYAlt,
        ParamId::KYAlt2,
        ParamId::LambdaKrauth,
    ];

    /// The six parameters reported by default.
    pub const DEFAULT: [ParamId; 6] = [
        ParamId::RX,
        ParamId::RY,
        ParamId::KX,
        ParamId::DeltaOrig,
        ParamId::DeltaAcet,
        ParamId::DeltaResid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::DeltaOrig => "delta_orig",
            ParamId::DeltaResid => "delta_resid",
            ParamId::DeltaAcet => "delta_acet",
            ParamId::RX => "r_x",
            ParamId::RY => "r_y",
            ParamId::KX => "k_x",
            ParamId::KY => "k_y",
            ParamId::KXAlt => "k_x_alt",
            ParamId::KYAlt => "k_y_alt",
            ParamId::KYAlt2 => "k_y_alt2",
            ParamId::LambdaKrauth => "lambda_krauth",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Whether the distribution summary takes |·| by default: signed delta
    /// and lambda ratios are plotted in absolute value; r and k ratios are
    /// nonnegative by construction.
    pub fn abs_by_default(self) -> bool {
        matches!(
            self,
            ParamId::DeltaOrig
                | ParamId::DeltaResid
                | ParamId::DeltaAcet
                | ParamId::LambdaKrauth
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    ZeroDenominator,
    DegenerateIndex,
    SingularSplit,
}

impl Failure {
    pub fn name(self) -> &'static str {
        match self {
            Failure::ZeroDenominator => "zero_denominator",
            Failure::DegenerateIndex => "degenerate_index",
            Failure::SingularSplit => "singular_split",
        }
    }
}

/// Outcome of evaluating one parameter at one mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamEval {
    pub id: ParamId,
    pub result: Result<f64, Failure>,
}

type Fallible<T> = Result<T, Failure>;
type Chol = CholeskyFactorized<OwnedRepr<f64>>;

/// Per-mask view of the population split into observed/unobserved blocks,
/// with lazily computed and cached solves shared across parameters.
pub struct SplitView<'a> {
    pop: &'a Population,
    obs: Vec<usize>,
    unobs: Vec<usize>,
    g1: Array1<f64>,
    g2: Array1<f64>,
    p1: Array1<f64>,
    p2: Array1<f64>,
    cxw1: Array1<f64>,
    cxw2: Array1<f64>,
    // caches
    var_g1: Option<f64>,
    var_g2: Option<f64>,
    var_p1: Option<f64>,
    var_p2: Option<f64>,
    cov12_g: Option<f64>,
    a_mat: Option<Array2<f64>>,
    chol_a: Option<Fallible<Chol>>,
    b_mat: Option<Array2<f64>>,
    chol_b: Option<Fallible<Chol>>,
    c_g2: Option<Array1<f64>>,
    phi: Option<Fallible<Array1<f64>>>,
    a_inv_cxw1: Option<Fallible<Array1<f64>>>,
}

fn slice_by(v: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    Array1::from_iter(idx.iter().map(|&i| v[i]))
}

impl<'a> SplitView<'a> {
    pub fn new(pop: &'a Population, mask: &SelectionMask) -> SplitView<'a> {
        debug_assert_eq!(mask.k(), pop.k());
        let obs = mask.observed().to_vec();
        let unobs = mask.unobserved();
        SplitView {
            g1: slice_by(pop.gamma(), &obs),
            g2: slice_by(pop.gamma(), &unobs),
            p1: slice_by(pop.pi(), &obs),
            p2: slice_by(pop.pi(), &unobs),
            cxw1: slice_by(pop.cov_x_w(), &obs),
            cxw2: slice_by(pop.cov_x_w(), &unobs),
            pop,
            obs,
            unobs,
            var_g1: None,
            var_g2: None,
            var_p1: None,
            var_p2: None,
            cov12_g: None,
            a_mat: None,
            chol_a: None,
            b_mat: None,
            chol_b: None,
            c_g2: None,
            phi: None,
            a_inv_cxw1: None,
        }
    }

    /// Quadratic/bilinear form x' Sigma[rows, cols] y over covariate indices.
    fn qform(&self, rows: &[usize], x: &Array1<f64>, cols: &[usize], y: &Array1<f64>) -> f64 {
        let sigma = self.pop.cov().sigma();
        let mut acc = 0.0;
        for (a, &i) in rows.iter().enumerate() {
            let row = sigma.row(w(i));
            let row = row.as_slice().expect("row-major covariance");
            let mut s = 0.0;
            for (b, &j) in cols.iter().enumerate() {
                s += y[b] * row[w(j)];
            }
            acc += x[a] * s;
        }
        acc
    }

    fn var_g1(&mut self) -> f64 {
        if self.var_g1.is_none() {
            self.var_g1 = Some(self.qform(&self.obs, &self.g1, &self.obs, &self.g1));
        }
        self.var_g1.unwrap()
    }

    fn var_g2(&mut self) -> f64 {
        if self.var_g2.is_none() {
            self.var_g2 = Some(self.qform(&self.unobs, &self.g2, &self.unobs, &self.g2));
        }
        self.var_g2.unwrap()
    }

    fn var_p1(&mut self) -> f64 {
        if self.var_p1.is_none() {
            self.var_p1 = Some(self.qform(&self.obs, &self.p1, &self.obs, &self.p1));
        }
        self.var_p1.unwrap()
    }

    fn var_p2(&mut self) -> f64 {
        if self.var_p2.is_none() {
            self.var_p2 = Some(self.qform(&self.unobs, &self.p2, &self.unobs, &self.p2));
        }
        self.var_p2.unwrap()
    }

    /// Cov(γ₁'W₁, γ₂'W₂).
    fn cov12_g(&mut self) -> f64 {
        if self.cov12_g.is_none() {
            self.cov12_g = Some(self.qform(&self.obs, &self.g1, &self.unobs, &self.g2));
        }
        self.cov12_g.unwrap()
    }

    fn ensure_a(&mut self) {
        if self.a_mat.is_none() {
            self.a_mat = Some(self.pop.cov().block(
                &self.obs.iter().map(|&i| w(i)).collect::<Vec<_>>(),
                &self.obs.iter().map(|&i| w(i)).collect::<Vec<_>>(),
            ));
        }
    }

    fn ensure_chol_a(&mut self) -> Fallible<()> {
        if self.chol_a.is_none() {
            self.ensure_a();
            self.chol_a = Some(
                self.a_mat
                    .as_ref()
                    .unwrap()
                    .factorizec(UPLO::Lower)
                    .map_err(|_| Failure::SingularSplit),
            );
        }
        match self.chol_a.as_ref().unwrap() {
            Ok(_) => Ok(()),
            Err(f) => Err(*f),
        }
    }

    fn solve_a(&mut self, b: &Array1<f64>) -> Fallible<Array1<f64>> {
        self.ensure_chol_a()?;
        match self.chol_a.as_ref().unwrap() {
            Ok(f) => f.solvec(b).map_err(|_| Failure::SingularSplit),
            Err(e) => Err(*e),
        }
    }

    fn ensure_chol_b(&mut self) -> Fallible<()> {
        if self.chol_b.is_none() {
            if self.b_mat.is_none() {
                self.b_mat = Some(self.pop.cov().block(
                    &self.unobs.iter().map(|&i| w(i)).collect::<Vec<_>>(),
                    &self.unobs.iter().map(|&i| w(i)).collect::<Vec<_>>(),
                ));
            }
            self.chol_b = Some(
                self.b_mat
                    .as_ref()
                    .unwrap()
                    .factorizec(UPLO::Lower)
                    .map_err(|_| Failure::SingularSplit),
            );
        }
        match self.chol_b.as_ref().unwrap() {
            Ok(_) => Ok(()),
            Err(f) => Err(*f),
        }
    }

    fn solve_b(&mut self, b: &Array1<f64>) -> Fallible<Array1<f64>> {
        self.ensure_chol_b()?;
        match self.chol_b.as_ref().unwrap() {
            Ok(f) => f.solvec(b).map_err(|_| Failure::SingularSplit),
            Err(e) => Err(*e),
        }
    }

    /// Cov(W₁, γ₂'W₂): the observed-block covariance with the unobserved
    /// index.
    fn c_g2(&mut self) -> Array1<f64> {
        if self.c_g2.is_none() {
            let sigma = self.pop.cov().sigma();
            let v = Array1::from_iter(self.obs.iter().map(|&i| {
                let row = sigma.row(w(i));
                let row = row.as_slice().expect("row-major covariance");
                self.unobs
                    .iter()
                    .enumerate()
                    .map(|(b, &j)| self.g2[b] * row[w(j)])
                    .sum::<f64>()
            }));
            self.c_g2 = Some(v);
        }
        self.c_g2.clone().unwrap()
    }

    /// φ = Var(W₁)^{-1} Cov(W₁, γ₂'W₂): the adjustment to γ₁ from
    /// residualizing the unobserved index on the observed covariates.
    fn phi(&mut self) -> Fallible<Array1<f64>> {
        if self.phi.is_none() {
            let cg2 = self.c_g2();
            self.phi = Some(self.solve_a(&cg2));
        }
        self.phi.clone().unwrap()
    }

    fn a_inv_cxw1(&mut self) -> Fallible<Array1<f64>> {
        if self.a_inv_cxw1.is_none() {
            let c = self.cxw1.clone();
            self.a_inv_cxw1 = Some(self.solve_a(&c));
        }
        self.a_inv_cxw1.clone().unwrap()
    }

    /// Shared pieces of the residualized ratio: numerator covariance and
    /// variance of (γ₂'W₂)^⊥W₁ against X, and denominator covariance and
    /// variance of the adjusted observed index (γ₁+φ)'W₁.
    fn resid_pieces(&mut self) -> Fallible<(f64, f64, f64, f64)> {
        let phi = self.phi()?;
        let cg2 = self.c_g2();
        let cov_x2 = self.cxw2.dot(&self.g2);
        let cov_x1_phi = self.cxw1.dot(&phi);
        let num_cov = cov_x2 - cov_x1_phi;
        let num_var = self.var_g2() - cg2.dot(&phi);
        let adj = &self.g1 + &phi;
        let den_cov = self.cxw1.dot(&adj);
        self.ensure_a();
        let a = self.a_mat.as_ref().unwrap();
        let den_var = adj.dot(&a.dot(&adj));
        Ok((num_cov, num_var, den_cov, den_var))
    }

    fn delta_orig(&mut self) -> Fallible<f64> {
        let var1 = self.var_g1();
        let var2 = self.var_g2();
        let cov_x1 = self.cxw1.dot(&self.g1);
        let cov_x2 = self.cxw2.dot(&self.g2);
        if cov_x1.abs() <= EPS || var1 <= EPS || var2 <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok((cov_x2 / var2) / (cov_x1 / var1))
    }

    fn delta_resid(&mut self) -> Fallible<f64> {
        let (num_cov, num_var, den_cov, den_var) = self.resid_pieces()?;
        if num_var <= EPS || den_var <= EPS || den_cov.abs() <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok((num_cov / num_var) / (den_cov / den_var))
    }

    fn delta_acet(&mut self) -> Fallible<f64> {
        let var1 = self.var_g1();
        let var2 = self.var_g2();
        if var1 <= EPS || var2 <= EPS {
            return Err(Failure::DegenerateIndex);
        }
        let cov12 = self.cov12_g();
        let cov_x1 = self.cxw1.dot(&self.g1);
        let cov_x2 = self.cxw2.dot(&self.g2);
        // Each index residualized on the other (scalar projection).
        let num_var = var2 - cov12 * cov12 / var1;
        let den_var = var1 - cov12 * cov12 / var2;
        if num_var <= EPS || den_var <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        let num = (cov_x2 - cov12 * cov_x1 / var1) / num_var;
        let den = (cov_x1 - cov12 * cov_x2 / var2) / den_var;
        if den.abs() <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok(num / den)
    }

    fn r_x(&mut self) -> Fallible<f64> {
        let den = self.var_p1();
        if den <= EPS {
            return Err(Failure::DegenerateIndex);
        }
        Ok((self.var_p2().max(0.0) / den).sqrt())
    }

    fn r_y(&mut self) -> Fallible<f64> {
        let den = self.var_g1();
        if den <= EPS {
            return Err(Failure::DegenerateIndex);
        }
        Ok((self.var_g2().max(0.0) / den).sqrt())
    }

    /// R² of X on the observed covariates.
    fn r2_x_w1(&mut self) -> Fallible<f64> {
        let z = self.a_inv_cxw1()?;
        let var_x = self.pop.cov().var(X);
        Ok((self.cxw1.dot(&z) / var_x).clamp(0.0, 1.0))
    }

    fn k_x(&mut self) -> Fallible<f64> {
        let r2_w1 = self.r2_x_w1()?;
        if r2_w1 <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok((self.pop.r2_x_w() - r2_w1) / r2_w1)
    }

    fn k_x_alt(&mut self) -> Fallible<f64> {
        let r2_w1 = self.r2_x_w1()?;
        if r2_w1 <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        let c = self.cxw2.clone();
        let z = self.solve_b(&c)?;
        let var_x = self.pop.cov().var(X);
        let r2_w2 = (self.cxw2.dot(&z) / var_x).clamp(0.0, 1.0);
        Ok(r2_w2 / r2_w1)
    }

    fn k_y(&mut self) -> Fallible<f64> {
        let model = self.pop.cov();
        let var_x = model.var(X);
        let var_y = model.var(Y);
        let cov_yx = model.cov(Y, X);
        // Pieces of W₂ residualized on W₁.
        let cyw1 = slice_by(self.pop.cov_y_w(), &self.obs);
        let cyw2 = slice_by(self.pop.cov_y_w(), &self.unobs);
        let z_x = self.a_inv_cxw1()?;
        let z_y = self.solve_a(&cyw1)?;
        let wobs: Vec<usize> = self.obs.iter().map(|&i| w(i)).collect();
        let wunobs: Vec<usize> = self.unobs.iter().map(|&i| w(i)).collect();
        let c_mat = model.block(&wobs, &wunobs); // Cov(W₁, W₂)
        let b_mat = model.block(&wunobs, &wunobs);
        let cxw2p = &self.cxw2 - &c_mat.t().dot(&z_x);
        let cyw2p = &cyw2 - &c_mat.t().dot(&z_y);
        let a_inv_c = {
            self.ensure_chol_a()?;
            let f = match self.chol_a.as_ref().unwrap() {
                Ok(f) => f,
                Err(e) => return Err(*e),
            };
            projection::spd_solve_multi(f, &c_mat).map_err(|_| Failure::SingularSplit)?
        };
        let v2p = &b_mat - &c_mat.t().dot(&a_inv_c);
        // Control for X on both sides.
        let var_y_x = var_y - cov_yx * cov_yx / var_x;
        if var_y_x <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        let cyw2p_x = &cyw2p - &(&cxw2p * (cov_yx / var_x));
        let d2 = self.unobs.len();
        let mut v2p_x = v2p;
        for i in 0..d2 {
            for j in 0..d2 {
                v2p_x[(i, j)] -= cxw2p[i] * cxw2p[j] / var_x;
            }
        }
        let num = projection::r_squared_from_parts(var_y_x, &cyw2p_x, &v2p_x)
            .map_err(|_| Failure::SingularSplit)?;
        let den = projection::partial_r_squared(model, Y, &wobs, &[X])
            .map_err(|_| Failure::SingularSplit)?;
        if den <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok(num / den)
    }

    /// Plain R² of Y on X plus the given covariates.
    fn r2_y_x_and(&self, wset: &[usize]) -> Fallible<f64> {
        let model = self.pop.cov();
        let mut preds = Vec::with_capacity(wset.len() + 1);
        preds.push(X);
        preds.extend(wset.iter().map(|&i| w(i)));
        projection::project(model, Y, &preds)
            .map(|p| p.r_squared)
            .map_err(|_| Failure::SingularSplit)
    }

    fn k_y_alt(&mut self) -> Fallible<f64> {
        let num = self.r2_y_x_and(&self.unobs.clone())?;
        let den = self.r2_y_x_and(&self.obs.clone())?;
        if den <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok(num / den)
    }

    fn k_y_alt2(&mut self) -> Fallible<f64> {
        let r2_w1 = self.r2_y_x_and(&self.obs.clone())?;
        let den = r2_w1 - self.pop.r2_y_x();
        if den <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok((self.pop.r2_y_xw() - r2_w1) / den)
    }

    /// Index-generalized correlation ratio: corr(X, (γ₂'W₂)^⊥W₁) over
    /// corr(X, (γ₁+φ)'W₁). Reduces to the scalar-covariate display when both
    /// blocks are scalar; flagged non-canonical in output metadata.
    fn lambda_krauth(&mut self) -> Fallible<f64> {
        let (num_cov, num_var, den_cov, den_var) = self.resid_pieces()?;
        if num_var <= EPS || den_var <= EPS {
            return Err(Failure::DegenerateIndex);
        }
        if den_cov.abs() <= EPS {
            return Err(Failure::ZeroDenominator);
        }
        Ok((num_cov / num_var.sqrt()) / (den_cov / den_var.sqrt()))
    }

    pub fn eval(&mut self, id: ParamId) -> ParamEval {
        let result = match id {
            ParamId::DeltaOrig => self.delta_orig(),
            ParamId::DeltaResid => self.delta_resid(),
            ParamId::DeltaAcet => self.delta_acet(),
            ParamId::RX => self.r_x(),
            ParamId::RY => self.r_y(),
            ParamId::KX => self.k_x(),
            ParamId::KY => self.k_y(),
            ParamId::KXAlt => self.k_x_alt(),
            ParamId::KYAlt => self.k_y_alt(),
            ParamId::KYAlt2 => self.k_y_alt2(),
            ParamId::LambdaKrauth => self.lambda_krauth(),
        };
        debug_assert!(result.map(|v| v.is_finite()).unwrap_or(true));
        ParamEval { id, result }
    }
}

/// Evaluate a batch of parameters at one mask, sharing the per-mask solves.
pub fn evaluate(pop: &Population, mask: &SelectionMask, ids: &[ParamId]) -> Vec<ParamEval> {
    let mut view = SplitView::new(pop, mask);
    ids.iter().map(|&id| view.eval(id)).collect()
}

macro_rules! single {
    ($name:ident, $id:expr) => {
        pub fn $name(pop: &Population, mask: &SelectionMask) -> ParamEval {
            SplitView::new(pop, mask).eval($id)
        }
    };
}

single!(delta_orig, ParamId::DeltaOrig);
single!(delta_resid, ParamId::DeltaResid);
single!(delta_acet, ParamId::DeltaAcet);
single!(r_x, ParamId::RX);
single!(r_y, ParamId::RY);
single!(k_x, ParamId::KX);
single!(k_y, ParamId::KY);
single!(k_x_alt, ParamId::KXAlt);
single!(k_y_alt, ParamId::KYAlt);
single!(k_y_alt2, ParamId::KYAlt2);
single!(lambda_krauth, ParamId::LambdaKrauth);
