//! Cross-validated choice of the two penalty levels.
//!
//! The search is over `sc = λ2/λ1` and, for each `sc`, a log-spaced path of
//! `λ2` values. Each cell is scored by the held-out squared error of the
//! post-selection OLS refit.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{ColumnGroup, DesignMatrix};
use crate::data::Dataset;
use crate::error::{SolverError, TuningError};
use crate::solver::{coordinate_descent, refit_from_moments, CenteredDesign, Moments, PenaltyConfig, StdProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVPlan {
    pub folds: usize,
    /// Candidate ratios `λ2/λ1`.
    pub sc_grid: Vec<f64>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub seed: u64,
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl Default for CVPlan {
    fn default() -> Self {
        CVPlan {
            folds: 10,
            sc_grid: log_grid(1e-2, 1e2, 13),
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            seed: 1,
        }
    }
}

impl CVPlan {
    pub fn validate(&self) -> Result<(), TuningError> {
        if self.folds < 2 {
            return Err(TuningError::Plan(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.sc_grid.is_empty() || self.sc_grid.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(TuningError::Plan("sc grid must be non-empty and strictly positive".into()));
        }
        if self.n_lambda == 0 {
            return Err(TuningError::Plan("n_lambda must be positive".into()));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(TuningError::Plan(format!(
                "lambda_min_ratio must lie in (0, 1), got {}",
                self.lambda_min_ratio
            )));
        }
        Ok(())
    }

    /// The same plan with the ratio pinned to one (single shared penalty).
    pub fn single_penalty(&self) -> Self {
        CVPlan {
            sc_grid: vec![1.0],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folds {
    pub k: usize,
    /// Fold index of every row.
    pub assignment: Vec<usize>,
}

impl Folds {
    pub fn test_rows(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    pub fn train_rows(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }
}

const STRATA: [(u8, u8, &str); 3] = [
    (1, 1, "treated (A=1, S=1)"),
    (0, 1, "concurrent control (A=0, S=1)"),
    (0, 0, "external control (A=0, S=0)"),
];

/// Stratified fold assignment: rows of each (A, S) stratum are shuffled and
/// dealt round-robin. Empty strata are skipped.
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<Folds, TuningError> {
    if k < 2 {
        return Err(TuningError::Plan(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignment = vec![0; ds.n_rows()];
    for (a, s, name) in STRATA {
        let mut rows = ds.rows_where(|ai, si| ai == a && si == s);
        if rows.is_empty() {
            continue;
        }
        if rows.len() < k {
            return Err(TuningError::StratumTooSmall {
                stratum: name,
                size: rows.len(),
                folds: k,
            });
        }
        rows.shuffle(&mut rng);
        for (pos, &i) in rows.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    Ok(Folds { k, assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub sc: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mean_err: f64,
    pub se: f64,
    pub valid_folds: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub best_sc: f64,
    pub cv_table: Vec<CvCell>,
    pub folds_used: Folds,
}

impl CVResult {
    pub fn table_csv(&self) -> Vec<u8> {
        let mut out = String::from("sc,lambda2,lambda1,mean_err,se,valid\n");
        for c in &self.cv_table {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.sc, c.lambda2, c.lambda1, c.mean_err, c.se, c.valid
            ));
        }
        out.into_bytes()
    }
}

/// Largest standardized score of each penalized group at the fit with only
/// the unpenalized columns. Returns `(mu group, bias group)`.
fn null_scores(p: &StdProblem, groups: &[ColumnGroup], cfg: &PenaltyConfig) -> (f64, f64) {
    let unit = cfg.with_lambdas(1.0, 1.0);
    let lam = p.lambdas(groups, &unit);
    let mask: Vec<bool> = lam.iter().map(|&l| l == 0.0).collect();
    let g = p.null_gradient(&mask);
    let (mut mu, mut bias) = (0.0f64, 0.0f64);
    for (a, &j) in p.free.iter().enumerate() {
        if mask[a] {
            continue;
        }
        if groups[j] == ColumnGroup::BiasBasis {
            bias = bias.max(g[a].abs());
        } else {
            mu = mu.max(g[a].abs());
        }
    }
    (mu, bias)
}

/// Smallest `λ2` at which every penalized coefficient is zero when
/// `λ1 = λ2 / sc`.
fn lambda2_max(scores: (f64, f64), sc: f64) -> f64 {
    let v = (sc * scores.0).max(scores.1);
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

struct FoldData {
    train: StdProblem,
    train_mom: Moments,
    test_mom: Moments,
}

/// Selects `(λ1, λ2)` by k-fold cross-validation.
///
/// Within a fold and ratio the path is traversed from the largest `λ2`
/// downward with warm starts. A cell is invalid only when every fold fails
/// (non-convergence or a singular refit).
pub fn cv_select(
    d: &DesignMatrix,
    y: &[f64],
    ds: &Dataset,
    plan: &CVPlan,
    cfg_base: &PenaltyConfig,
) -> Result<CVResult, TuningError> {
    plan.validate()?;
    cfg_base.validate()?;
    if d.n_rows() != y.len() || d.n_rows() != ds.n_rows() {
        return Err(TuningError::Solver(SolverError::NonConformant {
            rows: d.n_rows(),
            len: y.len().min(ds.n_rows()),
        }));
    }
    let folds = make_folds(ds, plan.folds, plan.seed)?;
    let cd = CenteredDesign::new(d, y);
    let k = cd.n_cols();
    let full = cd.moments(None);
    let scores = null_scores(&StdProblem::new(&cd, &full), &cd.groups, cfg_base);

    let fold_data: Vec<FoldData> = (0..folds.k)
        .map(|f| {
            let test_mom = cd.moments(Some(&folds.test_rows(f)));
            let train_mom = full.minus(&test_mom);
            FoldData {
                train: StdProblem::new(&cd, &train_mom),
                train_mom,
                test_mom,
            }
        })
        .collect();

    let mut table = Vec::with_capacity(plan.sc_grid.len() * plan.n_lambda);
    for &sc in &plan.sc_grid {
        let lmax = lambda2_max(scores, sc);
        let path = log_grid(lmax, lmax * plan.lambda_min_ratio, plan.n_lambda);
        // errs[i][f]: held-out error of path point i on fold f
        let mut errs: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(folds.k); path.len()];
        for fd in &fold_data {
            let p = &fd.train;
            let mut warm = DVector::zeros(p.free.len());
            for (i, &l2) in path.iter().enumerate() {
                let cfg = cfg_base.with_lambdas(l2 / sc, l2);
                let lam = p.lambdas(&cd.groups, &cfg);
                let out = coordinate_descent(p, &lam, cfg.a, cfg.tol, cfg.max_sweeps, warm.clone());
                warm = out.gamma.clone();
                if !out.converged {
                    errs[i].push(None);
                    continue;
                }
                let mut active = vec![0];
                for (a, &j) in p.free.iter().enumerate() {
                    if out.gamma[a] != 0.0 || lam[a] == 0.0 {
                        active.push(j);
                    }
                }
                let e = refit_from_moments(&fd.train_mom, &active, k)
                    .ok()
                    .map(|theta| fd.test_mom.rss(&theta) / fd.test_mom.n);
                errs[i].push(e);
            }
        }
        for (i, &l2) in path.iter().enumerate() {
            let ok: Vec<f64> = errs[i].iter().flatten().copied().collect();
            let n = ok.len();
            let (mean, se) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = ok.iter().sum::<f64>() / n as f64;
                let se = if n > 1 {
                    (ok.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
                } else {
                    0.0
                };
                (mean, se)
            };
            table.push(CvCell {
                sc,
                lambda1: l2 / sc,
                lambda2: l2,
                mean_err: mean,
                se,
                valid_folds: n,
                valid: n > 0,
            });
        }
    }

    let best = table
        .iter()
        .filter(|c| c.valid)
        .fold(None::<&CvCell>, |acc, c| match acc {
            Some(b) if b.mean_err <= c.mean_err => Some(b),
            _ => Some(c),
        })
        .ok_or(TuningError::NoValidCell)?;
    Ok(CVResult {
        best_lambda1: best.lambda1,
        best_lambda2: best.lambda2,
        best_sc: best.sc,
        cv_table: table.clone(),
        folds_used: folds,
    })
}
