//! The covariate selection design: uniform distribution over size-d1 subsets.
//!
//! Masks enumerate in lexicographic order of the sorted observed-index tuple,
//! with rank-based unranking so parallel consumers can own contiguous rank
//! ranges without coordination.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on exhaustive enumeration size.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000_000;

/// One realization of the selection design: which covariates are observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    k: usize,
    observed: Vec<usize>, // sorted ascending
}

impl SelectionMask {
    /// Build from the set of observed covariate indices (order irrelevant).
    pub fn from_indices(k: usize, observed: &[usize]) -> Result<Self> {
        let mut obs = observed.to_vec();
        obs.sort_unstable();
        obs.dedup();
        if obs.len() != observed.len() {
            return Err(Error::Config("duplicate indices in mask".into()));
        }
        if let Some(&max) = obs.last() {
            if max >= k {
                return Err(Error::Config(format!("mask index {max} out of range for k={k}")));
            }
        }
        Ok(SelectionMask { k, observed: obs })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        SelectionMask {
            k: bits.len(),
            observed: bits
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d1(&self) -> usize {
        self.observed.len()
    }

    pub fn d2(&self) -> usize {
        self.k - self.observed.len()
    }

    /// Sorted indices of observed covariates.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Sorted indices of unobserved covariates.
    pub fn unobserved(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.d2());
        let mut it = self.observed.iter().peekable();
        for i in 0..self.k {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn complement(&self) -> SelectionMask {
        SelectionMask {
            k: self.k,
            observed: self.unobserved(),
        }
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed.binary_search(&i).is_ok()
    }
}

/// C(n, k) with overflow detection.
pub fn combination_count(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// The combination of the given lexicographic rank (0-based), as sorted
/// indices.
pub fn unrank_combination(k: usize, d1: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(d1);
    let mut next = 0usize;
    let mut remaining = d1;
    while remaining > 0 {
        // Count combinations starting with `next`.
        let with_next = combination_count(k - next - 1, remaining - 1).expect("count overflow");
        if rank < with_next {
            out.push(next);
            remaining -= 1;
        } else {
            rank -= with_next;
        }
        next += 1;
    }
    out
}

/// Advance sorted indices to the lexicographic successor; false at the end.
pub fn next_combination(indices: &mut [usize], k: usize) -> bool {
    let d = indices.len();
    if d == 0 {
        return false;
    }
    let mut i = d;
    while i > 0 {
        i -= 1;
        if indices[i] < k - d + i {
            indices[i] += 1;
            for j in (i + 1)..d {
                indices[j] = indices[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Lazy lexicographic enumeration over a contiguous rank range.
#[derive(Debug)]
pub struct MaskRange {
    k: usize,
    d1: usize,
    current: Option<Vec<usize>>,
    remaining: u128,
}

impl MaskRange {
    pub fn new(k: usize, d1: usize, start_rank: u128, len: u128) -> Self {
        let current = if len > 0 {
            Some(unrank_combination(k, d1, start_rank))
        } else {
            None
        };
        MaskRange {
            k,
            d1,
            current,
            remaining: len,
        }
    }

    pub fn d1(&self) -> usize {
        self.d1
    }
}

impl Iterator for MaskRange {
    type Item = SelectionMask;

    fn next(&mut self) -> Option<SelectionMask> {
        if self.remaining == 0 {
            return None;
        }
        let cur = self.current.as_mut()?;
        let mask = SelectionMask {
            k: self.k,
            observed: cur.clone(),
        };
        self.remaining -= 1;
        if self.remaining > 0 && !next_combination(cur, self.k) {
            self.remaining = 0;
        }
        Some(mask)
    }
}

/// All C(k, d1) masks in lexicographic order, or Overflow beyond `cap`.
pub fn enumerate_masks(k: usize, d1: usize, cap: u128) -> Result<MaskRange> {
    check_d1(k, d1)?;
    let total =
        combination_count(k, d1).ok_or(Error::Overflow { size: u128::MAX, cap })?;
    if total > cap {
        return Err(Error::Overflow { size: total, cap });
    }
    Ok(MaskRange::new(k, d1, 0, total))
}

fn check_d1(k: usize, d1: usize) -> Result<()> {
    if k < 2 || d1 == 0 || d1 >= k {
        return Err(Error::Config(format!(
            "selection design requires 1 <= d1 <= k-1, got d1={d1}, k={k}"
        )));
    }
    Ok(())
}

/// Deterministic per-draw generator: one RNG stream per draw index so the
/// sampled sequence is independent of worker count.
pub fn draw_rng(seed: u64, draw_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    rng
}

/// Uniform draw over size-d1 subsets via a Fisher-Yates partial shuffle.
pub fn sample_mask(k: usize, d1: usize, rng: &mut impl Rng) -> Result<SelectionMask> {
    check_d1(k, d1)?;
    let mut idx: Vec<usize> = (0..k).collect();
    let (chosen, _) = idx.partial_shuffle(rng, d1);
    let mut observed = chosen.to_vec();
    observed.sort_unstable();
    Ok(SelectionMask { k, observed })
}

/// (E[S_i], E[S_i S_j]) = (d1/K, d1(d1-1)/(K(K-1))).
pub fn inclusion_moments(k: usize, d1: usize) -> (f64, f64) {
    let kf = k as f64;
    let d = d1 as f64;
    (d / kf, d * (d - 1.0) / (kf * (kf - 1.0)))
}

/// Finite-population variance of Σ S_i ξ_i under the uniform design:
/// d1 d2 / (K(K-1)) · Σ (ξ_i − ξ̄)².
pub fn finite_pop_variance(xi: &[f64], d1: usize) -> f64 {
    let k = xi.len();
    assert!(k >= 2, "need at least two covariates");
    let d2 = k - d1;
    let mean = xi.iter().sum::<f64>() / k as f64;
    let ss: f64 = xi.iter().map(|x| (x - mean) * (x - mean)).sum();
    (d1 as f64) * (d2 as f64) / ((k as f64) * (k as f64 - 1.0)) * ss
}

/// Exact Var_S(Σ_i Σ_j S_i S_j M_ij) under the uniform size-d1 design, for a
/// symmetric matrix M.
///
/// E[(S'MS)²] expands over quadruples of indices; grouping quadruples by
/// their coincidence pattern (a set partition of the four slots) reduces the
/// fourth moment to 15 pattern sums, each expressible through O(K²)
/// aggregates of M, weighted by the falling-factorial inclusion
/// probabilities p_m = d1(d1-1)...(d1-m+1)/(K(K-1)...(K-m+1)).
pub fn selection_quadratic_variance(m: &ndarray::Array2<f64>, d1: usize) -> f64 {
    let k = m.nrows();
    assert_eq!(m.ncols(), k);
    assert!(d1 >= 1 && d1 < k);

    // Aggregates of M.
    let mut diag_sum = 0.0; // Σ M_ii
    let mut diag_sq = 0.0; // Σ M_ii²
    let mut frob = 0.0; // Σ M_ij²
    let mut diag_row = 0.0; // Σ M_ii r_i
    let mut row_sq = 0.0; // Σ r_i²
    let mut total = 0.0; // Σ M_ij
    for i in 0..k {
        let mut r = 0.0;
        for j in 0..k {
            let v = m[(i, j)];
            r += v;
            frob += v * v;
        }
        let d = m[(i, i)];
        diag_sum += d;
        diag_sq += d * d;
        diag_row += d * r;
        row_sq += r * r;
        total += r;
    }

    // The 15 set partitions of the four index slots (i, j, k, l), as block
    // labels per slot, with the corresponding unrestricted pattern sum.
    let partitions: [([usize; 4], f64); 15] = [
        ([0, 0, 0, 0], diag_sq),
        ([0, 0, 0, 1], diag_row),
        ([0, 0, 1, 0], diag_row),
        ([0, 1, 0, 0], diag_row),
        ([0, 1, 1, 1], diag_row),
        ([0, 0, 1, 1], diag_sum * diag_sum),
        ([0, 1, 0, 1], frob),
        ([0, 1, 1, 0], frob),
        ([0, 0, 1, 2], diag_sum * total),
        ([0, 1, 2, 2], diag_sum * total),
        ([0, 1, 0, 2], row_sq),
        ([0, 1, 2, 0], row_sq),
        ([0, 1, 1, 2], row_sq),
        ([0, 1, 2, 1], row_sq),
        ([0, 1, 2, 3], total * total),
    ];

    let blocks = |p: &[usize; 4]| p.iter().copied().max().unwrap() + 1;
    // Q coarser-or-equal P iff indices equal under P stay equal under Q.
    let coarser_eq = |q: &[usize; 4], p: &[usize; 4]| {
        for a in 0..4 {
            for b in (a + 1)..4 {
                if p[a] == p[b] && q[a] != q[b] {
                    return false;
                }
            }
        }
        true
    };

    // Möbius inversion from coarsest down: exact-pattern sums I_P.
    let mut exact = [0.0f64; 15];
    let mut order: Vec<usize> = (0..15).collect();
    order.sort_by_key(|&i| blocks(&partitions[i].0));
    for (pos, &pi) in order.iter().enumerate() {
        let mut v = partitions[pi].1;
        for &qi in &order[..pos] {
            if qi != pi && coarser_eq(&partitions[qi].0, &partitions[pi].0) {
                v -= exact[qi];
            }
        }
        exact[pi] = v;
    }

    let p_m = |m_distinct: usize| -> f64 {
        let mut p = 1.0;
        for j in 0..m_distinct {
            if j >= d1 {
                return 0.0;
            }
            p *= (d1 - j) as f64 / (k - j) as f64;
        }
        p
    };

    let e2: f64 = (0..15)
        .map(|i| p_m(blocks(&partitions[i].0)) * exact[i])
        .sum();
    let e1 = p_m(1) * diag_sum + p_m(2) * (total - diag_sum);
    e2 - e1 * e1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRegime {
    MoreObserved,
    EqualSelection,
    MoreUnobserved,
}

pub fn classify_regime(d1: usize, d2: usize) -> SelectionRegime {
    match d2.cmp(&d1) {
        std::cmp::Ordering::Less => SelectionRegime::MoreObserved,
        std::cmp::Ordering::Equal => SelectionRegime::EqualSelection,
        std::cmp::Ordering::Greater => SelectionRegime::MoreUnobserved,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts() {
        assert_eq!(combination_count(4, 2), Some(6));
        assert_eq!(combination_count(22, 11), Some(705_432));
        assert_eq!(combination_count(22, 19), Some(1_540));
        assert_eq!(combination_count(200, 100).is_some(), false);
    }

    #[test]
    fn enumeration_distinct_and_complete() {
        for k in 2..=8usize {
            for d1 in 1..k {
                let masks: Vec<_> = enumerate_masks(k, d1, 1 << 30).unwrap().collect();
                assert_eq!(masks.len() as u128, combination_count(k, d1).unwrap());
                let set: HashSet<_> = masks.iter().cloned().collect();
                assert_eq!(set.len(), masks.len());
                assert!(masks.iter().all(|m| m.d1() == d1));
            }
        }
    }

    #[test]
    fn enumeration_order_is_lexicographic() {
        let masks: Vec<_> = enumerate_masks(4, 2, 100).unwrap().collect();
        let obs: Vec<_> = masks.iter().map(|m| m.observed().to_vec()).collect();
        assert_eq!(
            obs,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
    }

    #[test]
    fn unrank_matches_sequential_order() {
        let k = 9;
        let d1 = 4;
        let all: Vec<_> = enumerate_masks(k, d1, 1 << 30).unwrap().collect();
        for (rank, mask) in all.iter().enumerate() {
            assert_eq!(
                unrank_combination(k, d1, rank as u128),
                mask.observed().to_vec()
            );
        }
    }

    #[test]
    fn range_splitting_covers_everything() {
        let k = 10;
        let d1 = 3;
        let total = combination_count(k, d1).unwrap();
        let full: Vec<_> = enumerate_masks(k, d1, 1 << 30).unwrap().collect();
        let mut glued = Vec::new();
        let chunk = 17u128;
        let mut start = 0u128;
        while start < total {
            let len = chunk.min(total - start);
            glued.extend(MaskRange::new(k, d1, start, len));
            start += len;
        }
        assert_eq!(full, glued);
    }

    #[test]
    fn overflow_cap() {
        match enumerate_masks(30, 15, 1000) {
            Err(Error::Overflow { size, cap }) => {
                assert_eq!(size, combination_count(30, 15).unwrap());
                assert_eq!(cap, 1000);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_d1_rejected() {
        assert!(enumerate_masks(5, 0, 100).is_err());
        assert!(enumerate_masks(5, 5, 100).is_err());
        let mut rng = draw_rng(0, 0);
        assert!(sample_mask(5, 0, &mut rng).is_err());
        assert!(sample_mask(5, 5, &mut rng).is_err());
    }

    #[test]
    fn complement_bijects_families() {
        let k = 7;
        let d1 = 3;
        let family: HashSet<_> = enumerate_masks(k, d1, 1 << 30).unwrap().collect();
        let image: HashSet<_> = family.iter().map(|m| m.complement()).collect();
        let target: HashSet<_> = enumerate_masks(k, k - d1, 1 << 30).unwrap().collect();
        assert_eq!(image, target);
    }

    #[test]
    fn sampling_is_uniform() {
        let k = 4;
        let d1 = 2;
        let mut counts = std::collections::HashMap::new();
        for draw in 0..60_000u64 {
            let mut rng = draw_rng(42, draw);
            let m = sample_mask(k, d1, &mut rng).unwrap();
            *counts.entry(m).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            let freq = c as f64 / 60_000.0;
            assert!((freq - 1.0 / 6.0).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let a: Vec<_> = (0..50)
            .map(|i| sample_mask(9, 4, &mut draw_rng(7, i)).unwrap())
            .collect();
        let b: Vec<_> = (0..50)
            .map(|i| sample_mask(9, 4, &mut draw_rng(7, i)).unwrap())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn inclusion_moment_values() {
        assert_eq!(inclusion_moments(2, 1), (0.5, 0.0));
        let (e1, e2) = inclusion_moments(22, 11);
        assert!((e1 - 0.5).abs() < 1e-15);
        assert!((e2 - 110.0 / 462.0).abs() < 1e-15);
    }

    #[test]
    fn inclusion_moments_match_enumeration() {
        for k in 2..=9usize {
            for d1 in 1..k {
                let masks: Vec<_> = enumerate_masks(k, d1, 1 << 30).unwrap().collect();
                let n = masks.len() as f64;
                let (e1, e2) = inclusion_moments(k, d1);
                let freq0 = masks.iter().filter(|m| m.is_observed(0)).count() as f64 / n;
                assert!((freq0 - e1).abs() < 1e-12);
                if k >= 2 {
                    let freq01 = masks
                        .iter()
                        .filter(|m| m.is_observed(0) && m.is_observed(1))
                        .count() as f64
                        / n;
                    assert!((freq01 - e2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn finite_pop_variance_bernoulli() {
        assert!((finite_pop_variance(&[1.0, 0.0], 1) - 0.25).abs() < 1e-15);
        assert_eq!(finite_pop_variance(&[3.0; 6], 2), 0.0);
    }

    #[test]
    fn finite_pop_variance_matches_enumeration() {
        let xi: Vec<f64> = (0..10).map(|i| ((i * 37 + 11) % 17) as f64 * 0.3 - 1.0).collect();
        let d1 = 4;
        let sums: Vec<f64> = enumerate_masks(10, d1, 1 << 30)
            .unwrap()
            .map(|m| m.observed().iter().map(|&i| xi[i]).sum())
            .collect();
        let n = sums.len() as f64;
        let mean = sums.iter().sum::<f64>() / n;
        let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        assert!((var - finite_pop_variance(&xi, d1)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_variance_matches_enumeration() {
        use ndarray::Array2;
        for (k, d1, seed) in [(6usize, 2usize, 1u64), (8, 3, 2), (9, 5, 3)] {
            let mut rng = draw_rng(seed, 0);
            let mut m = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..=i {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            let vals: Vec<f64> = enumerate_masks(k, d1, 1 << 30)
                .unwrap()
                .map(|mask| {
                    let obs = mask.observed();
                    let mut s = 0.0;
                    for &i in obs {
                        for &j in obs {
                            s += m[(i, j)];
                        }
                    }
                    s
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let exact = selection_quadratic_variance(&m, d1);
            assert!(
                (var - exact).abs() < 1e-10 * (1.0 + var.abs()),
                "k={k} d1={d1}: enumeration {var} vs closed form {exact}"
            );
        }
    }

    #[test]
    fn regimes() {
        assert_eq!(classify_regime(11, 11), SelectionRegime::EqualSelection);
        assert_eq!(classify_regime(19, 3), SelectionRegime::MoreObserved);
        assert_eq!(classify_regime(3, 19), SelectionRegime::MoreUnobserved);
    }
}
