//! Calibrating a population from a dataset: CSV loading, fixed-effect
//! demeaning, and the empirical covariance taken as the population model.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cov::CovarianceModel;
use crate::error::{Error, Result};

/// Column roles for a tabular dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub weight: Option<String>,
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Config("at least one covariate required".into()));
        }
        let mut names: Vec<&String> = vec![&self.outcome, &self.treatment];
        names.extend(self.covariates.iter());
        names.extend(self.fixed_effects.iter());
        if let Some(w) = &self.weight {
            names.push(w);
        }
        let mut seen = std::collections::HashSet::new();
        for n in names {
            if !seen.insert(n) {
                return Err(Error::Config(format!(
                    "column '{n}' assigned to more than one role"
                )));
            }
        }
        Ok(())
    }
}

/// Complete-case numeric table in role order (Y, X, W...), with the raw
/// fixed-effect keys retained for demeaning.
#[derive(Debug, Clone)]
pub struct Table {
    /// Column-major: data[c] is the full column; order Y, X, covariates.
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub fe_keys: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub rows: usize,
    pub dropped_rows: usize,
    /// Number of fixed-effect groups of size one (those rows residualize
    /// to exactly zero).
    pub singleton_groups: usize,
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Load the CSV, keep complete cases on every role column, and parse the
/// numeric roles. Non-numeric entries in numeric roles are hard errors.
pub fn load_table(spec: &DatasetSpec) -> Result<Table> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&spec.path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let mut numeric_cols: Vec<(String, usize)> = Vec::new();
    numeric_cols.push((spec.outcome.clone(), find(&spec.outcome)?));
    numeric_cols.push((spec.treatment.clone(), find(&spec.treatment)?));
    for c in &spec.covariates {
        numeric_cols.push((c.clone(), find(c)?));
    }
    let fe_idx: Vec<usize> = spec
        .fixed_effects
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;
    let weight_idx = spec.weight.as_deref().map(find).transpose()?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); numeric_cols.len()];
    let mut fe_keys: Vec<String> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut dropped = 0usize;

    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_no + 1; // 1-based data row for messages
        let mut complete = true;
        for (_, idx) in &numeric_cols {
            if is_missing(record.get(*idx).unwrap_or("")) {
                complete = false;
            }
        }
        for &idx in &fe_idx {
            if is_missing(record.get(idx).unwrap_or("")) {
                complete = false;
            }
        }
        if let Some(wi) = weight_idx {
            if is_missing(record.get(wi).unwrap_or("")) {
                complete = false;
            }
        }
        if !complete {
            dropped += 1;
            continue;
        }
        for (slot, (name, idx)) in numeric_cols.iter().enumerate() {
            let field = record.get(*idx).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("expected a number, got '{field}'"),
            })?;
            columns[slot].push(v);
        }
        let key = fe_idx
            .iter()
            .map(|&i| record.get(i).unwrap_or("").trim())
            .collect::<Vec<_>>()
            .join("\u{1f}");
        fe_keys.push(key);
        if let Some(wi) = weight_idx {
            let field = record.get(wi).unwrap_or("");
            let w: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: spec.weight.clone().unwrap(),
                message: format!("expected a number, got '{field}'"),
            })?;
            if w < 0.0 {
                return Err(Error::Parse {
                    row,
                    column: spec.weight.clone().unwrap(),
                    message: "negative weight".into(),
                });
            }
            weights.push(w);
        }
    }

    let rows = columns[0].len();
    let mut labels = vec!["Y".to_string(), "X".to_string()];
    labels.extend(spec.covariates.iter().cloned());
    Ok(Table {
        columns,
        labels,
        fe_keys,
        weights: weight_idx.map(|_| weights),
        rows,
        dropped_rows: dropped,
        singleton_groups: 0,
    })
}

/// Replace every numeric column by its residual from group-mean demeaning
/// on the full interaction of the fixed-effect columns. Identity when no
/// fixed effects were declared. Counts singleton groups, whose rows
/// residualize to exactly zero.
pub fn project_out_fixed_effects(table: &mut Table) -> Result<()> {
    if table.fe_keys.iter().all(|k| k.is_empty()) {
        return Ok(());
    }
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, key) in table.fe_keys.iter().enumerate() {
        groups.entry(key.as_str()).or_default().push(i);
    }
    table.singleton_groups = groups.values().filter(|v| v.len() == 1).count();
    let members: Vec<Vec<usize>> = groups.into_values().collect();
    for col in table.columns.iter_mut() {
        for rows in &members {
            let mean: f64 = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
            for &i in rows {
                col[i] -= mean;
            }
        }
    }
    Ok(())
}

/// Sample covariance of (Y, X, W...) with denominator n−1 (or the weighted
/// analogue Σw − Σw²/Σw), validated as a covariance model.
pub fn empirical_covariance(table: &Table) -> Result<CovarianceModel> {
    let p = table.columns.len();
    let n = table.rows;
    let k = p - 2;
    if n < k + 3 {
        return Err(Error::Config(format!(
            "need at least {} complete rows for {} covariates, got {n}",
            k + 3,
            k
        )));
    }
    let (w, denom) = match &table.weights {
        Some(w) => {
            let sw: f64 = w.iter().sum();
            let sw2: f64 = w.iter().map(|x| x * x).sum();
            if sw <= 0.0 {
                return Err(Error::Config("weights sum to zero".into()));
            }
            (Some((w, sw)), sw - sw2 / sw)
        }
        None => (None, n as f64 - 1.0),
    };
    if denom <= 0.0 {
        return Err(Error::Config("effective sample size too small".into()));
    }
    let means: Vec<f64> = table
        .columns
        .iter()
        .map(|col| match &w {
            Some((wv, sw)) => col.iter().zip(wv.iter()).map(|(x, wi)| x * wi).sum::<f64>() / sw,
            None => col.iter().sum::<f64>() / n as f64,
        })
        .collect();
    let mut sigma = Array2::zeros((p, p));
    for a in 0..p {
        for b in a..p {
            let s: f64 = match &w {
                Some((wv, _)) => (0..n)
                    .map(|i| wv[i] * (table.columns[a][i] - means[a]) * (table.columns[b][i] - means[b]))
                    .sum(),
                None => (0..n)
                    .map(|i| (table.columns[a][i] - means[a]) * (table.columns[b][i] - means[b]))
                    .sum(),
            };
            sigma[(a, b)] = s / denom;
            sigma[(b, a)] = sigma[(a, b)];
        }
    }
    CovarianceModel::new(table.labels.clone(), sigma)
}

/// Full pipeline: load, demean fixed effects, covariance.
pub fn calibrate(spec: &DatasetSpec) -> Result<(CovarianceModel, Table)> {
    let mut table = load_table(spec)?;
    project_out_fixed_effects(&mut table)?;
    let model = empirical_covariance(&table)?;
    Ok((model, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn spec_for(path: PathBuf, covs: &[&str]) -> DatasetSpec {
        DatasetSpec {
            path,
            outcome: "y".into(),
            treatment: "x".into(),
            covariates: covs.iter().map(|s| s.to_string()).collect(),
            fixed_effects: vec![],
            weight: None,
        }
    }

    #[test]
    fn round_trip_small_file() {
        let f = write_csv("y,x,w1\n1.0,2.0,3.0\n4.0,5.0,6.0\n7.0,8.0,9.5\n");
        let t = load_table(&spec_for(f.path().into(), &["w1"])).unwrap();
        assert_eq!(t.rows, 3);
        assert_eq!(t.dropped_rows, 0);
        assert_eq!(t.columns[0], vec![1.0, 4.0, 7.0]);
        assert_eq!(t.columns[2], vec![3.0, 6.0, 9.5]);
        assert_eq!(t.labels, vec!["Y", "X", "w1"]);
    }

    #[test]
    fn missing_column_named() {
        let f = write_csv("y,x\n1,2\n");
        let err = load_table(&spec_for(f.path().into(), &["w1"])).unwrap_err();
        match err {
            Error::MissingColumn(c) => assert_eq!(c, "w1"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn incomplete_rows_dropped_with_count() {
        let f = write_csv("y,x,w1\n1,2,3\n,2,3\n1,2,\n4,5,6\n");
        let t = load_table(&spec_for(f.path().into(), &["w1"])).unwrap();
        assert_eq!(t.rows, 2);
        assert_eq!(t.dropped_rows, 2);
    }

    #[test]
    fn non_numeric_is_parse_error() {
        let f = write_csv("y,x,w1\n1,2,3\n1,oops,3\n");
        let err = load_table(&spec_for(f.path().into(), &["w1"])).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn duplicate_roles_rejected() {
        let f = write_csv("y,x\n1,2\n");
        let mut s = spec_for(f.path().into(), &["x"]);
        s.covariates = vec!["x".into()];
        assert!(matches!(load_table(&s), Err(Error::Config(_))));
    }

    #[test]
    fn two_group_demeaning() {
        let f = write_csv(
            "y,x,w1,st\n1,10,5,a\n3,14,7,a\n10,0,1,b\n14,8,3,b\n",
        );
        let mut s = spec_for(f.path().into(), &["w1"]);
        s.fixed_effects = vec!["st".into()];
        let mut t = load_table(&s).unwrap();
        project_out_fixed_effects(&mut t).unwrap();
        // group a means: y=2, x=12, w1=6; group b: y=12, x=4, w1=2
        assert_eq!(t.columns[0], vec![-1.0, 1.0, -2.0, 2.0]);
        assert_eq!(t.columns[1], vec![-2.0, 2.0, -4.0, 4.0]);
        assert_eq!(t.columns[2], vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(t.singleton_groups, 0);
    }

    #[test]
    fn residuals_orthogonal_to_group_dummies() {
        let mut rows = String::from("y,x,w1,g\n");
        for i in 0..30 {
            rows.push_str(&format!(
                "{},{},{},g{}\n",
                (i as f64 * 1.3).sin() * 4.0,
                (i as f64 * 0.7).cos() * 2.0 + i as f64 * 0.1,
                i as f64 * 0.37 % 3.0,
                i % 4
            ));
        }
        let f = write_csv(&rows);
        let mut s = spec_for(f.path().into(), &["w1"]);
        s.fixed_effects = vec!["g".into()];
        let mut t = load_table(&s).unwrap();
        project_out_fixed_effects(&mut t).unwrap();
        // within-group means are zero
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, k) in t.fe_keys.iter().enumerate() {
            groups.entry(k.clone()).or_default().push(i);
        }
        for col in &t.columns {
            for members in groups.values() {
                let m: f64 = members.iter().map(|&i| col[i]).sum::<f64>();
                assert!(m.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singleton_groups_counted() {
        let f = write_csv("y,x,w1,st\n1,2,3,a\n4,5,6,b\n7,8,9,b\n");
        let mut s = spec_for(f.path().into(), &["w1"]);
        s.fixed_effects = vec!["st".into()];
        let mut t = load_table(&s).unwrap();
        project_out_fixed_effects(&mut t).unwrap();
        assert_eq!(t.singleton_groups, 1);
        assert_eq!(t.columns[0][0], 0.0);
    }

    #[test]
    fn hand_covariance() {
        let f = write_csv("y,x,w1\n1,1,1\n2,3,2\n3,2,4\n4,5,3\n5,4,6\n6,6,5\n");
        let t = load_table(&spec_for(f.path().into(), &["w1"])).unwrap();
        let m = empirical_covariance(&t).unwrap();
        // all three columns are permutations of 1..6: mean 3.5, Var 3.5
        assert_abs_diff_eq!(m.var(0), 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.var(1), 3.5, epsilon = 1e-12);
        // Cov(y,x): Σ dev products = 15.5, /5 = 3.1
        assert_abs_diff_eq!(m.cov(0, 1), 3.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.cov(0, 2), 3.1, epsilon = 1e-12);
    }

    #[test]
    fn collinear_covariates_rejected() {
        let f = write_csv(
            "y,x,w1,w2\n1,2,3,3\n2,4,5,5\n3,1,7,7\n5,3,2,2\n4,6,8,8\n7,5,1,1\n8,9,4,4\n",
        );
        let t = load_table(&spec_for(f.path().into(), &["w1", "w2"])).unwrap();
        match empirical_covariance(&t) {
            Err(Error::NotPositiveDefinite(ev)) => assert!(ev.abs() < 1e-8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let f = write_csv("y,x,w1\n1,2,3\n4,5,6\n7,8,9\n");
        let t = load_table(&spec_for(f.path().into(), &["w1"])).unwrap();
        assert!(matches!(empirical_covariance(&t), Err(Error::Config(_))));
    }

    #[test]
    fn shift_invariance_after_demeaning() {
        let base = "y,x,w1,g\n1,4,2,a\n3,6,5,a\n2,9,4,b\n6,1,8,b\n5,3,9,a\n7,2,1,b\n";
        let shifted = "y,x,w1,g\n101,4,2,a\n103,6,5,a\n102,9,4,b\n106,1,8,b\n105,3,9,a\n107,2,1,b\n";
        let run = |content: &str| {
            let f = write_csv(content);
            let mut s = spec_for(f.path().into(), &["w1"]);
            s.fixed_effects = vec!["g".into()];
            let mut t = load_table(&s).unwrap();
            project_out_fixed_effects(&mut t).unwrap();
            empirical_covariance(&t).unwrap()
        };
        let a = run(base);
        let b = run(shifted);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a.sigma()[(i, j)], b.sigma()[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn weighted_covariance_matches_replication() {
        // Integer weights equal replication up to the df convention:
        // compare against direct computation with the weighted denominator.
        let f = write_csv("y,x,w1,wt\n1,2,3,1\n4,1,6,2\n2,5,9,1\n8,3,2,3\n5,7,4,1\n");
        let mut s = spec_for(f.path().into(), &["w1"]);
        s.weight = Some("wt".into());
        let t = load_table(&s).unwrap();
        let m = empirical_covariance(&t).unwrap();
        let w = [1.0, 2.0, 1.0, 3.0, 1.0];
        let y = [1.0, 4.0, 2.0, 8.0, 5.0];
        let sw: f64 = w.iter().sum();
        let mean = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let denom = sw - w.iter().map(|x| x * x).sum::<f64>() / sw;
        let var = y
            .iter()
            .zip(&w)
            .map(|(a, b)| b * (a - mean).powi(2))
            .sum::<f64>()
            / denom;
        assert_abs_diff_eq!(m.var(0), var, epsilon = 1e-12);
    }
}
