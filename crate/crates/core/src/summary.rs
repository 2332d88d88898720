//! Streaming accumulation of parameter values over a mask population and
//! the serialized distribution summaries emitted in reports.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::params::{Failure, ParamId};

/// Values retained verbatim before the accumulator switches to a
/// fixed-memory compaction sketch.
pub const FULL_RETENTION_CAP: usize = 10_000_000;
pub const HISTOGRAM_BINS: usize = 60;

/// Serialized distribution of one parameter over the mask population.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionSummary {
    pub param: String,
    pub d1: usize,
    pub abs_applied: bool,
    pub count: u64,
    pub failures: BTreeMap<String, u64>,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
    pub frac_leq_1: f64,
    pub histogram: Histogram,
    /// True when quantiles come from the compaction sketch rather than
    /// exact order statistics.
    pub approximate_quantiles: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// One level of the compaction sketch: a sorted buffer at weight 2^level.
#[derive(Debug, Clone, Default)]
struct SketchLevel {
    items: Vec<f64>,
}

/// Deterministic quantile sketch: buffers of capacity `level_cap` are
/// compacted by keeping even-indexed entries of the sorted buffer and
/// pushing them one level up (doubling their weight). Deterministic
/// (always even offsets) so identical input order gives identical output.
#[derive(Debug, Clone)]
struct CompactionSketch {
    level_cap: usize,
    levels: Vec<SketchLevel>,
}

impl CompactionSketch {
    fn new(level_cap: usize) -> Self {
        CompactionSketch {
            level_cap,
            levels: vec![SketchLevel::default()],
        }
    }

    fn insert(&mut self, v: f64) {
        self.levels[0].items.push(v);
        self.compact_from(0);
    }

    fn compact_from(&mut self, start: usize) {
        let mut lvl = start;
        while lvl < self.levels.len() && self.levels[lvl].items.len() >= self.level_cap {
            self.levels[lvl]
                .items
                .sort_by(|a, b| a.partial_cmp(b).unwrap());
            let promoted: Vec<f64> = self.levels[lvl]
                .items
                .iter()
                .copied()
                .step_by(2)
                .collect();
            self.levels[lvl].items.clear();
            if lvl + 1 == self.levels.len() {
                self.levels.push(SketchLevel::default());
            }
            self.levels[lvl + 1].items.extend(promoted);
            lvl += 1;
        }
    }

    fn merge(&mut self, other: &CompactionSketch) {
        while self.levels.len() < other.levels.len() {
            self.levels.push(SketchLevel::default());
        }
        for (lvl, level) in other.levels.iter().enumerate() {
            self.levels[lvl].items.extend_from_slice(&level.items);
        }
        for lvl in 0..self.levels.len() {
            self.compact_from(lvl);
        }
    }

    /// Weighted (value, weight) pairs sorted by value.
    fn weighted(&self) -> Vec<(f64, u64)> {
        let mut out: Vec<(f64, u64)> = Vec::new();
        for (lvl, level) in self.levels.iter().enumerate() {
            let w = 1u64 << lvl;
            out.extend(level.items.iter().map(|&v| (v, w)));
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }
}

/// Running accumulator for one (parameter, d1) cell.
#[derive(Debug, Clone)]
pub struct SummaryAccumulator {
    param: ParamId,
    d1: usize,
    abs_applied: bool,
    count_total: u64,
    failures: BTreeMap<&'static str, u64>,
    // Welford running moments over successful evaluations.
    n: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
    leq_one: u64,
    values: Vec<f64>,
    sketch: Option<CompactionSketch>,
}

impl SummaryAccumulator {
    pub fn new(param: ParamId, d1: usize, abs_applied: bool) -> Self {
        SummaryAccumulator {
            param,
            d1,
            abs_applied,
            count_total: 0,
            failures: BTreeMap::new(),
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            leq_one: 0,
            values: Vec::new(),
            sketch: None,
        }
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn record(&mut self, result: Result<f64, Failure>) {
        self.count_total += 1;
        match result {
            Ok(raw) => {
                let v = if self.abs_applied { raw.abs() } else { raw };
                self.n += 1;
                let delta = v - self.mean;
                self.mean += delta / self.n as f64;
                self.m2 += delta * (v - self.mean);
                if v < self.min {
                    self.min = v;
                }
                if v > self.max {
                    self.max = v;
                }
                if v <= 1.0 {
                    self.leq_one += 1;
                }
                match &mut self.sketch {
                    Some(s) => s.insert(v),
                    None => {
                        self.values.push(v);
                        if self.values.len() > FULL_RETENTION_CAP {
                            let mut s = CompactionSketch::new(8192);
                            for &x in &self.values {
                                s.insert(x);
                            }
                            self.values = Vec::new();
                            self.sketch = Some(s);
                        }
                    }
                }
            }
            Err(f) => {
                *self.failures.entry(f.name()).or_insert(0) += 1;
            }
        }
    }

    /// Merge `other` into self. Chan's parallel update for the moments;
    /// retained values or sketches are concatenated/merged.
    pub fn merge(&mut self, other: SummaryAccumulator) {
        debug_assert_eq!(self.param, other.param);
        debug_assert_eq!(self.d1, other.d1);
        self.count_total += other.count_total;
        for (k, v) in other.failures {
            *self.failures.entry(k).or_insert(0) += v;
        }
        if other.n > 0 {
            if self.n == 0 {
                self.n = other.n;
                self.mean = other.mean;
                self.m2 = other.m2;
            } else {
                let na = self.n as f64;
                let nb = other.n as f64;
                let delta = other.mean - self.mean;
                let total = na + nb;
                self.mean += delta * nb / total;
                self.m2 += other.m2 + delta * delta * na * nb / total;
                self.n += other.n;
            }
            self.min = self.min.min(other.min);
            self.max = self.max.max(other.max);
            self.leq_one += other.leq_one;
        }
        match (&mut self.sketch, other.sketch) {
            (Some(a), Some(b)) => a.merge(&b),
            (Some(a), None) => {
                for v in other.values {
                    a.insert(v);
                }
            }
            (None, Some(b)) => {
                let mut s = b;
                for &v in &self.values {
                    s.insert(v);
                }
                self.values = Vec::new();
                self.sketch = Some(s);
            }
            (None, None) => {
                self.values.extend(other.values);
                if self.values.len() > FULL_RETENTION_CAP {
                    let mut s = CompactionSketch::new(8192);
                    for &x in &self.values {
                        s.insert(x);
                    }
                    self.values = Vec::new();
                    self.sketch = Some(s);
                }
            }
        }
    }

    pub fn finalize(mut self) -> DistributionSummary {
        let failures: BTreeMap<String, u64> = self
            .failures
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let sd = if self.n > 1 {
            (self.m2 / (self.n as f64 - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        let (q25, median, q75, histogram, approx) = if let Some(sketch) = self.sketch.take() {
            let weighted = sketch.weighted();
            let q = |p: f64| weighted_quantile(&weighted, p);
            (
                q(0.25),
                q(0.5),
                q(0.75),
                weighted_histogram(&weighted, self.min, self.max),
                true,
            )
        } else {
            self.values
                .sort_by(|a, b| a.partial_cmp(b).unwrap());
            (
                exact_quantile(&self.values, 0.25),
                exact_quantile(&self.values, 0.5),
                exact_quantile(&self.values, 0.75),
                exact_histogram(&self.values, self.min, self.max),
                false,
            )
        };
        DistributionSummary {
            param: self.param.name().to_string(),
            d1: self.d1,
            abs_applied: self.abs_applied,
            count: self.count_total,
            failures,
            min: if self.n > 0 { self.min } else { f64::NAN },
            q25,
            median,
            q75,
            max: if self.n > 0 { self.max } else { f64::NAN },
            mean: if self.n > 0 { self.mean } else { f64::NAN },
            sd,
            frac_leq_1: if self.n > 0 {
                self.leq_one as f64 / self.n as f64
            } else {
                f64::NAN
            },
            histogram,
            approximate_quantiles: approx,
        }
    }
}

/// Linear-interpolation quantile on sorted data: h = (n-1)p,
/// value = x[⌊h⌋] + (h − ⌊h⌋)(x[⌊h⌋+1] − x[⌊h⌋]).
fn exact_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn weighted_quantile(weighted: &[(f64, u64)], p: f64) -> f64 {
    if weighted.is_empty() {
        return f64::NAN;
    }
    let total: u64 = weighted.iter().map(|&(_, w)| w).sum();
    let target = (total as f64 - 1.0) * p;
    let mut acc = 0u64;
    for &(v, w) in weighted {
        acc += w;
        if acc as f64 > target {
            return v;
        }
    }
    weighted.last().unwrap().0
}

fn histogram_edges(min: f64, max: f64) -> Vec<f64> {
    let span = if max > min { max - min } else { 1.0 };
    (0..=HISTOGRAM_BINS)
        .map(|i| min + span * i as f64 / HISTOGRAM_BINS as f64)
        .collect()
}

fn bin_index(v: f64, min: f64, max: f64) -> usize {
    let span = if max > min { max - min } else { 1.0 };
    (((v - min) / span * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

fn exact_histogram(sorted: &[f64], min: f64, max: f64) -> Histogram {
    let edges = histogram_edges(min, max);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    if !sorted.is_empty() {
        for &v in sorted {
            counts[bin_index(v, min, max)] += 1;
        }
    }
    Histogram { edges, counts }
}

fn weighted_histogram(weighted: &[(f64, u64)], min: f64, max: f64) -> Histogram {
    let edges = histogram_edges(min, max);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &(v, w) in weighted {
        counts[bin_index(v, min, max)] += w;
    }
    Histogram { edges, counts }
}
