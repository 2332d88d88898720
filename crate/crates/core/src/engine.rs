//! Drivers that characterize the covariate sampling distribution of the
//! parameters: exact enumeration over all C(K, d1) masks, seeded Monte
//! Carlo over uniform draws, convergence studies along a K grid, and
//! empirical checks of the limit-curve properties.

use rayon::prelude::*;
use serde::Serialize;

use crate::design::{
    combination_count, draw_rng, sample_mask, MaskRange, DEFAULT_ENUMERATION_CAP,
};
use crate::dgp::{self, CoefRole, DgpSpec, Structure};
use crate::error::{Error, Result};
use crate::limits;
use crate::params::{self, ParamId};
use crate::population::Population;
use crate::summary::{DistributionSummary, SummaryAccumulator};

/// Masks (or draws) processed per work unit; chunks are merged in rank
/// order, so output is independent of the thread count.
pub const CHUNK: u64 = 4096;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Replace each parameter's default absolute-value treatment.
    pub abs_override: Option<bool>,
    /// Refuse enumeration beyond this many masks.
    pub cap: u128,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            abs_override: None,
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

fn abs_for(id: ParamId, opts: &RunOptions) -> bool {
    opts.abs_override.unwrap_or_else(|| id.abs_by_default())
}

fn fresh_accumulators(ids: &[ParamId], d1: usize, opts: &RunOptions) -> Vec<SummaryAccumulator> {
    ids.iter()
        .map(|&id| SummaryAccumulator::new(id, d1, abs_for(id, opts)))
        .collect()
}

fn merge_chunks(
    chunks: Vec<Vec<SummaryAccumulator>>,
    ids: &[ParamId],
    d1: usize,
    opts: &RunOptions,
) -> Vec<DistributionSummary> {
    let mut merged = fresh_accumulators(ids, d1, opts);
    for chunk in chunks {
        for (into, from) in merged.iter_mut().zip(chunk) {
            into.merge(from);
        }
    }
    merged.into_iter().map(|a| a.finalize()).collect()
}

/// Exact distribution over every covariate subset of size d1.
pub fn exact_distribution(
    pop: &Population,
    d1: usize,
    ids: &[ParamId],
    opts: &RunOptions,
) -> Result<Vec<DistributionSummary>> {
    let k = pop.k();
    if d1 == 0 || d1 >= k {
        return Err(Error::InvalidParameter(format!(
            "d1 must lie strictly between 0 and {k}, got {d1}"
        )));
    }
    let total = combination_count(k, d1).ok_or(Error::Overflow {
        size: u128::MAX,
        cap: opts.cap,
    })?;
    if total > opts.cap {
        return Err(Error::Overflow {
            size: total,
            cap: opts.cap,
        });
    }
    let total = total as u64;
    let n_chunks = (total + CHUNK - 1) / CHUNK;
    let chunks: Vec<Vec<SummaryAccumulator>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let start = ci * CHUNK;
            let len = CHUNK.min(total - start);
            let mut accs = fresh_accumulators(ids, d1, opts);
            for mask in MaskRange::new(k, d1, start as u128, len as u128) {
                for ev in params::evaluate(pop, &mask, ids) {
                    let slot = ids.iter().position(|&id| id == ev.id).unwrap();
                    accs[slot].record(ev.result);
                }
            }
            accs
        })
        .collect();
    Ok(merge_chunks(chunks, ids, d1, opts))
}

/// Monte Carlo distribution over n_draws uniform subsets. Draw i uses an
/// RNG stream keyed by (seed, i), so results do not depend on how draws
/// are split across threads.
pub fn monte_carlo_distribution(
    pop: &Population,
    d1: usize,
    ids: &[ParamId],
    n_draws: u64,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<DistributionSummary>> {
    let k = pop.k();
    if d1 == 0 || d1 >= k {
        return Err(Error::InvalidParameter(format!(
            "d1 must lie strictly between 0 and {k}, got {d1}"
        )));
    }
    if n_draws == 0 {
        return Err(Error::InvalidParameter("n_draws must be positive".into()));
    }
    let n_chunks = (n_draws + CHUNK - 1) / CHUNK;
    let chunks: Vec<Result<Vec<SummaryAccumulator>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let start = ci * CHUNK;
            let len = CHUNK.min(n_draws - start);
            let mut accs = fresh_accumulators(ids, d1, opts);
            for i in start..(start + len) {
                let mut rng = draw_rng(seed, i);
                let mask = sample_mask(k, d1, &mut rng)?;
                for ev in params::evaluate(pop, &mask, ids) {
                    let slot = ids.iter().position(|&id| id == ev.id).unwrap();
                    accs[slot].record(ev.result);
                }
            }
            Ok(accs)
        })
        .collect();
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(merge_chunks(chunks, ids, d1, opts))
}

/// One (parameter, K) cell of a convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergencePoint {
    pub param: String,
    pub k: usize,
    pub d1: usize,
    /// Realized unobserved-to-observed ratio d2/d1.
    pub r_realized: f64,
    pub mc_mean: f64,
    pub mc_sd: f64,
    /// Analytic prediction at the realized ratio, where a closed form
    /// exists for the structure.
    pub predicted_limit: Option<f64>,
    pub abs_gap: Option<f64>,
}

/// Analytic limit prediction at finite-K constants, where the structure
/// admits one for the parameter.
pub fn predicted_limit(spec: &DgpSpec, k: usize, id: ParamId, r: f64) -> Result<Option<f64>> {
    let d = dgp::d_constants(spec, k)?;
    let c_pi = match d.d_pi {
        Some(dp) => limits::prop_c_value(&spec.structure, Some(dp)).ok(),
        None => limits::prop_c_value(&spec.structure, None).ok(),
    };
    let c_gamma = match d.d_gamma {
        Some(dg) => limits::prop_c_value(&spec.structure, Some(dg)).ok(),
        None => limits::prop_c_value(&spec.structure, None).ok(),
    };
    Ok(match id {
        ParamId::RX => c_pi.map(|c| limits::limit_r_x(r, c)),
        ParamId::RY => c_gamma.map(|c| limits::limit_r_y(r, c)),
        ParamId::DeltaOrig => c_gamma.map(|c| limits::limit_delta_orig(r, c)),
        ParamId::DeltaAcet => Some(limits::limit_delta_acet()),
        ParamId::DeltaResid => {
            // Closed form only for independent covariates.
            if matches!(spec.structure, Structure::Ar1 { rho } if rho == 0.0) {
                let pi = dgp::build_coefficients(&spec.pi_rule, CoefRole::Pi, k)?;
                let gamma = dgp::build_coefficients(&spec.gamma_rule, CoefRole::Gamma, k)?;
                limits::delta_resid_finite_k(&pi, &gamma, r).ok()
            } else {
                None
            }
        }
        ParamId::KX => {
            // The k_X limit is derived only for the shrinking-exchangeable
            // structure.
            if let Structure::ExchangeableShrink { alpha } = spec.structure {
                d.d_pi.map(|dp| limits::limit_k_x(r, alpha, dp))
            } else {
                None
            }
        }
        _ => None,
    })
}

/// Monte Carlo means along a K grid with d1 chosen so d2/d1 ≈ r, compared
/// with the analytic limits where available.
pub fn convergence_study(
    spec: &DgpSpec,
    k_grid: &[usize],
    r: f64,
    ids: &[ParamId],
    n_draws: u64,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<ConvergencePoint>> {
    if r <= 0.0 {
        return Err(Error::InvalidParameter("r must be positive".into()));
    }
    if k_grid.len() < 2 || k_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InsufficientGrid(
            "need a strictly increasing K grid with at least two points".into(),
        ));
    }
    let mut out = Vec::new();
    for (gi, &k) in k_grid.iter().enumerate() {
        let d1 = ((k as f64 / (1.0 + r)).round() as usize).clamp(1, k - 1);
        let r_realized = (k - d1) as f64 / d1 as f64;
        let pop = dgp::assemble_population(spec, k)?;
        // Distinct seed per grid point keeps draws independent across K.
        let summaries =
            monte_carlo_distribution(&pop, d1, ids, n_draws, seed.wrapping_add(gi as u64), opts)?;
        for (slot, s) in summaries.into_iter().enumerate() {
            let limit = predicted_limit(spec, k, ids[slot], r_realized)?;
            out.push(ConvergencePoint {
                param: s.param.clone(),
                k,
                d1,
                r_realized,
                mc_mean: s.mean,
                mc_sd: s.sd,
                predicted_limit: limit,
                abs_gap: limit.map(|l| (s.mean - l).abs()),
            });
        }
    }
    Ok(out)
}

/// Empirical check of the limit-curve shape on simulated data: the mean at
/// r = 1 should sit at 1 and the means should move through 1 as r crosses
/// 1, up to Monte Carlo error.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalProperty {
    pub param: String,
    pub mean_at_r1: f64,
    pub margin: f64,
    pub consistent: bool,
    pub monotone_through_one: bool,
}

pub fn empirical_property_report(
    spec: &DgpSpec,
    k: usize,
    r_grid: &[f64],
    ids: &[ParamId],
    n_draws: u64,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<EmpiricalProperty>> {
    if !r_grid.contains(&1.0) {
        return Err(Error::InsufficientGrid(
            "r grid must include r = 1".into(),
        ));
    }
    let pop_cells: Vec<(f64, Vec<DistributionSummary>)> = r_grid
        .iter()
        .enumerate()
        .map(|(gi, &r)| {
            let d1 = ((k as f64 / (1.0 + r)).round() as usize).clamp(1, k - 1);
            let pop = dgp::assemble_population(spec, k)?;
            let s = monte_carlo_distribution(
                &pop,
                d1,
                ids,
                n_draws,
                seed.wrapping_add(gi as u64),
                opts,
            )?;
            Ok((r, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (slot, &id) in ids.iter().enumerate() {
        let cell = |r: f64| -> &DistributionSummary {
            &pop_cells.iter().find(|(rr, _)| *rr == r).unwrap().1[slot]
        };
        let at1 = cell(1.0);
        let margin = (3.0 * at1.sd / (n_draws as f64).sqrt()).max(0.02);
        let consistent = (at1.mean.abs() - 1.0).abs() <= margin;
        let monotone = pop_cells.iter().all(|(r, cells)| {
            let m = cells[slot].mean.abs();
            if *r > 1.0 {
                m > 1.0 - margin
            } else if *r < 1.0 {
                m < 1.0 + margin
            } else {
                true
            }
        });
        out.push(EmpiricalProperty {
            param: id.name().to_string(),
            mean_at_r1: at1.mean,
            margin,
            consistent,
            monotone_through_one: monotone,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{synthetic_population, CoefRule};

    fn small_pop() -> Population {
        synthetic_population(8, 7).unwrap()
    }

    #[test]
    fn enumeration_matches_direct_count() {
        let pop = small_pop();
        let ids = [ParamId::RX, ParamId::DeltaOrig];
        let out = exact_distribution(&pop, 3, &ids, &RunOptions::default()).unwrap();
        assert_eq!(out.len(), 2);
        for s in &out {
            assert_eq!(s.count, 56); // C(8,3)
        }
    }

    #[test]
    fn enumeration_overflow() {
        let pop = small_pop();
        let opts = RunOptions {
            cap: 10,
            ..RunOptions::default()
        };
        let err = exact_distribution(&pop, 4, &[ParamId::RX], &opts).unwrap_err();
        assert!(matches!(err, Error::Overflow { size: 70, cap: 10 }));
    }

    #[test]
    fn monte_carlo_reproducible() {
        let pop = small_pop();
        let ids = [ParamId::RX];
        let opts = RunOptions::default();
        let a = monte_carlo_distribution(&pop, 4, &ids, 500, 42, &opts).unwrap();
        let b = monte_carlo_distribution(&pop, 4, &ids, 500, 42, &opts).unwrap();
        assert_eq!(a[0].mean, b[0].mean);
        assert_eq!(a[0].median, b[0].median);
        let c = monte_carlo_distribution(&pop, 4, &ids, 500, 43, &opts).unwrap();
        assert_ne!(a[0].mean, c[0].mean);
    }

    #[test]
    fn monte_carlo_close_to_enumeration() {
        let pop = small_pop();
        let ids = [ParamId::RX];
        let opts = RunOptions::default();
        let exact = exact_distribution(&pop, 4, &ids, &opts).unwrap();
        let mc = monte_carlo_distribution(&pop, 4, &ids, 20_000, 9, &opts).unwrap();
        assert!((exact[0].mean - mc[0].mean).abs() < 0.02);
    }

    #[test]
    fn abs_override_changes_sign_handling() {
        let pop = small_pop();
        let ids = [ParamId::DeltaOrig];
        let on = RunOptions {
            abs_override: Some(true),
            ..RunOptions::default()
        };
        let off = RunOptions {
            abs_override: Some(false),
            ..RunOptions::default()
        };
        let a = exact_distribution(&pop, 4, &ids, &on).unwrap();
        let b = exact_distribution(&pop, 4, &ids, &off).unwrap();
        assert!(a[0].min >= 0.0);
        assert!(a[0].abs_applied);
        assert!(!b[0].abs_applied);
        assert!(a[0].mean >= b[0].mean);
    }

    #[test]
    fn convergence_gap_shrinks() {
        let spec = DgpSpec {
            structure: Structure::Ma1 { rho: 0.3 },
            pi_rule: CoefRule::Flat { c: 1.0 },
            gamma_rule: CoefRule::Flat { c: 1.0 },
            x_resid_var: 1.0,
            y_resid_var: 1.0,
            beta_long: 1.0,
        };
        let pts = convergence_study(
            &spec,
            &[60, 600],
            2.0,
            &[ParamId::RX],
            150,
            11,
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(pts.len(), 2);
        let g0 = pts[0].abs_gap.unwrap();
        let g1 = pts[1].abs_gap.unwrap();
        assert!(g1 < g0, "gaps {g0} -> {g1}");
        assert!(g1 < 0.05);
    }
}
