//! Dataset representation, CSV ingestion and covariate preprocessing.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::DataError;
use crate::io::write_atomic;

/// Pooled randomized-experiment and external-control rows.
///
/// Rows with `s[i] == 1` come from the randomized experiment; rows with
/// `s[i] == 0` are external controls and always have `a[i] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub s: Vec<u8>,
    pub column_names: Vec<String>,
    /// Per-column `(min, max)` recorded by [`scale_unit_interval`].
    pub scaling: Option<Vec<(f64, f64)>>,
    /// Columns removed by preprocessing, with the reason.
    pub dropped_columns: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and checks the row-level invariants. Constant columns
    /// are allowed here; [`load_csv`] removes them.
    pub fn new(
        x: DMatrix<f64>,
        a: Vec<u8>,
        y: Vec<f64>,
        s: Vec<u8>,
        column_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = x.nrows();
        if a.len() != n || y.len() != n || s.len() != n {
            return Err(DataError::Invalid(format!(
                "row counts disagree: x {n}, a {}, y {}, s {}",
                a.len(),
                y.len(),
                s.len()
            )));
        }
        if column_names.len() != x.ncols() {
            return Err(DataError::Invalid(format!(
                "{} column names for {} covariates",
                column_names.len(),
                x.ncols()
            )));
        }
        for i in 0..n {
            if a[i] > 1 || s[i] > 1 {
                return Err(DataError::Validity {
                    row: i + 1,
                    message: "treatment and study indicators must be 0 or 1".into(),
                });
            }
            if s[i] == 0 && a[i] == 1 {
                return Err(DataError::Validity {
                    row: i + 1,
                    message: "external control (study=0) cannot be treated".into(),
                });
            }
        }
        Ok(Dataset {
            x,
            a,
            y,
            s,
            column_names,
            scaling: None,
            dropped_columns: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Number of randomized-experiment rows.
    pub fn n_re(&self) -> usize {
        self.s.iter().filter(|&&s| s == 1).count()
    }

    /// Number of external-control rows.
    pub fn n_ec(&self) -> usize {
        self.n_rows() - self.n_re()
    }

    pub fn rows_where(&self, pred: impl Fn(u8, u8) -> bool) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| pred(self.a[i], self.s[i]))
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            s: rows.iter().map(|&i| self.s[i]).collect(),
            column_names: self.column_names.clone(),
            scaling: self.scaling.clone(),
            dropped_columns: self.dropped_columns.clone(),
        }
    }

    /// Randomized-experiment rows only.
    pub fn re_rows(&self) -> Dataset {
        self.subset(&self.rows_where(|_, s| s == 1))
    }

    /// Row-wise concatenation; covariate names must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.column_names != other.column_names {
            return Err(DataError::Invalid(
                "cannot concatenate datasets with different covariates".into(),
            ));
        }
        let (n1, n2, d) = (self.n_rows(), other.n_rows(), self.n_covariates());
        let mut x = DMatrix::zeros(n1 + n2, d);
        x.rows_mut(0, n1).copy_from(&self.x);
        x.rows_mut(n1, n2).copy_from(&other.x);
        let cat = |p: &[u8], q: &[u8]| p.iter().chain(q).copied().collect::<Vec<u8>>();
        let mut out = Dataset::new(
            x,
            cat(&self.a, &other.a),
            self.y.iter().chain(&other.y).copied().collect(),
            cat(&self.s, &other.s),
            self.column_names.clone(),
        )?;
        out.dropped_columns = self.dropped_columns.clone();
        Ok(out)
    }

    /// Divides the named columns (covariates and/or the outcome) by `factor`.
    pub fn divide_columns(
        &mut self,
        factor: f64,
        names: &[String],
        outcome_name: &str,
    ) -> Result<(), DataError> {
        for name in names {
            if name == outcome_name {
                self.y.iter_mut().for_each(|v| *v /= factor);
            } else if let Some(j) = self.column_names.iter().position(|c| c == name) {
                self.x.column_mut(j).iter_mut().for_each(|v| *v /= factor);
            } else if !self.dropped_columns.iter().any(|d| d.starts_with(name.as_str())) {
                return Err(DataError::MissingColumn(name.clone()));
            }
        }
        Ok(())
    }

    /// Writes the dataset back as CSV with covariates first, then the
    /// outcome, treatment and study columns. Values use Rust's shortest
    /// round-trip float formatting, so re-reading is exact.
    pub fn write_csv(
        &self,
        path: &Path,
        outcome: &str,
        treatment: &str,
        study: &str,
    ) -> Result<(), DataError> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
            header.extend([outcome, treatment, study]);
            w.write_record(&header)?;
            for i in 0..self.n_rows() {
                let mut rec: Vec<String> = (0..self.n_covariates())
                    .map(|j| format!("{}", self.x[(i, j)]))
                    .collect();
                rec.push(format!("{}", self.y[i]));
                rec.push(self.a[i].to_string());
                rec.push(self.s[i].to_string());
                w.write_record(&rec)?;
            }
            w.flush().map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        write_atomic(path, &buf).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A numeric table read from CSV: headers plus row-major values.
#[derive(Debug, Clone)]
pub struct NumericTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn column_index(&self, name: &str) -> Result<usize, DataError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

/// Reads a headed, comma-separated, all-numeric file. Row numbers in parse
/// errors count data rows from 1.
pub fn read_numeric_csv(path: &Path) -> Result<NumericTable, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(headers.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                row: r + 1,
                column: headers.get(j).cloned().unwrap_or_default(),
                value: field.to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(NumericTable { headers, rows })
}

fn indicator(v: f64, row: usize, column: &str) -> Result<u8, DataError> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(DataError::Validity {
            row,
            message: format!("column `{column}` must contain only 0/1, found {v}"),
        })
    }
}

fn is_constant(col: impl Iterator<Item = f64>) -> bool {
    let mut it = col;
    match it.next() {
        None => true,
        Some(first) => it.all(|v| v == first),
    }
}

/// Loads a dataset from CSV. All columns other than the three named ones are
/// covariates; constant covariates are dropped and listed in
/// `dropped_columns`.
pub fn load_csv(
    path: &Path,
    outcome_col: &str,
    treat_col: &str,
    study_col: &str,
) -> Result<Dataset, DataError> {
    let table = read_numeric_csv(path)?;
    let ds = dataset_from_table(&table, outcome_col, treat_col, study_col)?;
    if ds.n_re() == 0 {
        return Err(DataError::Invalid("no randomized-experiment rows (study=1)".into()));
    }
    Ok(ds)
}

/// Builds a dataset from a parsed table. Unlike [`load_csv`] this accepts
/// tables made only of external controls.
pub fn dataset_from_table(
    table: &NumericTable,
    outcome_col: &str,
    treat_col: &str,
    study_col: &str,
) -> Result<Dataset, DataError> {
    let yj = table.column_index(outcome_col)?;
    let aj = table.column_index(treat_col)?;
    let sj = table.column_index(study_col)?;
    let n = table.rows.len();
    let mut a = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for (i, row) in table.rows.iter().enumerate() {
        a.push(indicator(row[aj], i + 1, treat_col)?);
        s.push(indicator(row[sj], i + 1, study_col)?);
    }
    let y = table.column(yj);
    let cov_idx: Vec<usize> = (0..table.headers.len())
        .filter(|&j| j != yj && j != aj && j != sj)
        .collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &j in &cov_idx {
        if is_constant(table.rows.iter().map(|r| r[j])) {
            dropped.push(format!("{} (constant)", table.headers[j]));
        } else {
            kept.push(j);
        }
    }
    let x = DMatrix::from_fn(n, kept.len(), |i, c| table.rows[i][kept[c]]);
    let names = kept.iter().map(|&j| table.headers[j].clone()).collect();
    let mut ds = Dataset::new(x, a, y, s, names)?;
    ds.dropped_columns = dropped;
    Ok(ds)
}

/// Min–max scales every covariate to `[0, 1]`, recording `(min, max)`.
pub fn scale_unit_interval(ds: &Dataset) -> Result<Dataset, DataError> {
    let mut out = ds.clone();
    let mut ranges = Vec::with_capacity(ds.n_covariates());
    for j in 0..ds.n_covariates() {
        let col = ds.x.column(j);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(DataError::ConstantColumn(ds.column_names[j].clone()));
        }
        let span = hi - lo;
        for v in out.x.column_mut(j).iter_mut() {
            *v = if *v == hi { 1.0 } else { (*v - lo) / span };
        }
        ranges.push((lo, hi));
    }
    out.scaling = Some(ranges);
    Ok(out)
}

/// Appends pairwise products `x_i * x_j` (i < j) and, optionally, squares.
/// Candidates that are constant or exactly equal to an earlier column are
/// dropped and recorded.
pub fn pairwise_interactions(ds: &Dataset, include_squares: bool) -> Result<Dataset, DataError> {
    let d = ds.n_covariates();
    if d < 2 {
        return Err(DataError::Invalid(format!(
            "interactions need at least 2 covariates, got {d}"
        )));
    }
    let n = ds.n_rows();
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| ds.x.column(j).iter().copied().collect()).collect();
    let mut names = ds.column_names.clone();
    let mut candidates: Vec<(String, Vec<f64>)> = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = (0..n).map(|r| ds.x[(r, i)] * ds.x[(r, j)]).collect();
            candidates.push((format!("{}*{}", names[i], names[j]), v));
        }
    }
    if include_squares {
        for i in 0..d {
            let v = (0..n).map(|r| ds.x[(r, i)] * ds.x[(r, i)]).collect();
            candidates.push((format!("{}^2", names[i]), v));
        }
    }
    let mut seen: HashSet<Vec<u64>> = cols
        .iter()
        .map(|c| c.iter().map(|v| canonical_bits(*v)).collect())
        .collect();
    let mut dropped = ds.dropped_columns.clone();
    for (name, v) in candidates {
        if is_constant(v.iter().copied()) {
            dropped.push(format!("{name} (constant)"));
            continue;
        }
        let key: Vec<u64> = v.iter().map(|x| canonical_bits(*x)).collect();
        if !seen.insert(key) {
            dropped.push(format!("{name} (duplicate)"));
            continue;
        }
        cols.push(v);
        names.push(name);
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let mut out = Dataset::new(x, ds.a.clone(), ds.y.clone(), ds.s.clone(), names)?;
    out.dropped_columns = dropped;
    Ok(out)
}

// -0.0 and 0.0 compare equal, so they must hash equal too.
fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Renders `(cc_row, ec_row, distance)` triples as CSV.
pub fn match_report_csv(pairs: &[(usize, usize, f64)]) -> Vec<u8> {
    let mut buf = Vec::new();
    writeln!(buf, "cc_row,ec_row,distance").unwrap();
    for (c, e, dist) in pairs {
        writeln!(buf, "{c},{e},{dist}").unwrap();
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ds_from_cols(cols: &[&[f64]]) -> Dataset {
        let n = cols[0].len();
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let names = (0..cols.len()).map(|j| format!("x{j}")).collect();
        Dataset::new(x, vec![0; n], vec![0.0; n], vec![1; n], names).unwrap()
    }

    #[test]
    fn constant_column_is_dropped() {
        let f = write_tmp("u,k,v,y,a,s\n1,7,2,0.5,1,1\n2,7,1,0.1,0,1\n3,7,5,0.2,0,0\n4,7,3,0.9,0,1\n");
        let ds = load_csv(f.path(), "y", "a", "s").unwrap();
        assert_eq!(ds.n_covariates(), 2);
        assert_eq!(ds.column_names, vec!["u", "v"]);
        assert_eq!(ds.dropped_columns, vec!["k (constant)"]);
        assert_eq!(ds.n_re(), 3);
        assert_eq!(ds.n_ec(), 1);
    }

    #[test]
    fn treated_external_control_is_rejected_with_row() {
        let f = write_tmp("u,y,a,s\n1,0,1,1\n2,0,0,1\n3,0,1,0\n4,0,0,0\n");
        match load_csv(f.path(), "y", "a", "s") {
            Err(DataError::Validity { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected validity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp("u,y,a\n1,0,1\n");
        match load_csv(f.path(), "y", "a", "study") {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "study"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let f = write_tmp("u,y,a,s\n1,0,1,1\n2,abc,0,1\n");
        match load_csv(f.path(), "y", "a", "s") {
            Err(DataError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_indicator_rejected() {
        let f = write_tmp("u,y,a,s\n1,0,2,1\n2,0,0,1\n");
        assert!(matches!(
            load_csv(f.path(), "y", "a", "s"),
            Err(DataError::Validity { row: 1, .. })
        ));
    }

    #[test]
    fn scaling_examples() {
        let ds = ds_from_cols(&[&[2.0, 4.0, 6.0], &[0.0, 1.0, 1.0], &[-1.0, 0.0, 3.0]]);
        let sc = scale_unit_interval(&ds).unwrap();
        assert_eq!(sc.x.column(0).as_slice(), &[0.0, 0.5, 1.0]);
        assert_eq!(sc.x.column(1).as_slice(), &[0.0, 1.0, 1.0]);
        assert_eq!(sc.x.column(2).as_slice(), &[0.0, 0.25, 1.0]);
        assert_eq!(sc.scaling.as_ref().unwrap()[2], (-1.0, 3.0));
    }

    #[test]
    fn scaling_rejects_constant() {
        let ds = ds_from_cols(&[&[2.0, 2.0, 2.0]]);
        assert!(matches!(scale_unit_interval(&ds), Err(DataError::ConstantColumn(_))));
    }

    #[test]
    fn interaction_counts() {
        let ds = ds_from_cols(&[&[1.0, 2.0, 3.0, 5.0], &[0.5, 0.1, 0.7, 0.2], &[3.0, 1.0, 4.0, 1.5]]);
        let out = pairwise_interactions(&ds, false).unwrap();
        assert_eq!(out.n_covariates(), 6);
        assert_eq!(out.column_names[3], "x0*x1");
    }

    #[test]
    fn binary_square_dropped_as_duplicate() {
        let ds = ds_from_cols(&[&[0.0, 1.0, 1.0, 0.0], &[0.3, 0.1, 0.7, 0.2]]);
        let out = pairwise_interactions(&ds, true).unwrap();
        assert!(out.dropped_columns.contains(&"x0^2 (duplicate)".to_string()));
        assert!(out.column_names.contains(&"x1^2".to_string()));
        assert_eq!(out.n_covariates(), 4);
    }

    #[test]
    fn eight_covariates_yield_44_candidates() {
        // two binary columns: their squares duplicate; their product is kept
        let n = 12;
        let cols: Vec<Vec<f64>> = (0..8)
            .map(|j| {
                (0..n)
                    .map(|i| if j < 2 { ((i + j) % 2) as f64 } else { ((i * (j + 3)) % 7) as f64 + 0.5 * j as f64 })
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let ds = ds_from_cols(&refs);
        let out = pairwise_interactions(&ds, true).unwrap();
        assert_eq!(out.n_covariates() + out.dropped_columns.len(), 44);
        assert!(out.dropped_columns.iter().any(|d| d == "x0^2 (duplicate)"));
    }

    #[test]
    fn concat_and_subset() {
        let ds = ds_from_cols(&[&[1.0, 2.0, 3.0]]);
        let both = ds.concat(&ds.subset(&[2])).unwrap();
        assert_eq!(both.n_rows(), 4);
        assert_eq!(both.x[(3, 0)], 3.0);
    }
}
