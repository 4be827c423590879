//! Penalized least squares with two SCAD penalty groups.
//!
//! The objective minimized is
//!
//! ```text
//! (1/2N) ‖y − Dθ‖²  +  Σ_{j ∈ mu}   P_λ1(s_j |θ_j|)
//!                   +  Σ_{j ∈ bias} P_λ2(s_j |θ_j|)
//! ```
//!
//! where `s_j` is the (1/N) standard deviation of column `j`, i.e. the
//! penalty acts on standardized coefficients. The intercept is never
//! penalized; other groups can be exempted through [`PenaltyConfig`].
//!
//! All work happens on Gram moments of globally centered columns, so a fit
//! costs O(K²) per sweep regardless of the number of rows. Cross-validation
//! reuses the same moments split by fold.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::basis::{ColumnGroup, DesignMatrix};
use crate::error::{LinalgError, SolverError};
use crate::linalg;
use crate::penalty::{scad_univariate_update, value_unchecked, DEFAULT_A};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Applies to the outcome-model (`mu_basis`, and `treatment` if not exempt) columns.
    pub lambda1: f64,
    /// Applies to the `bias_basis` columns.
    pub lambda2: f64,
    pub a: f64,
    /// Groups never penalized. The intercept is always unpenalized.
    pub exempt: BTreeSet<ColumnGroup>,
    pub tol: f64,
    pub max_sweeps: usize,
    pub n_starts: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            a: DEFAULT_A,
            exempt: [ColumnGroup::Intercept, ColumnGroup::Treatment].into_iter().collect(),
            tol: 1e-7,
            max_sweeps: 10_000,
            n_starts: 3,
        }
    }
}

impl PenaltyConfig {
    /// One shared penalty level for both groups.
    pub fn single(lambda: f64) -> Self {
        PenaltyConfig {
            lambda1: lambda,
            lambda2: lambda,
            ..Default::default()
        }
    }

    pub fn with_lambdas(&self, lambda1: f64, lambda2: f64) -> Self {
        PenaltyConfig {
            lambda1,
            lambda2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.a > 2.0) {
            return Err(SolverError::Parameter(format!("a must exceed 2, got {}", self.a)));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::Parameter(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(SolverError::Parameter("penalty levels must be nonnegative".into()));
        }
        if self.max_sweeps == 0 || self.n_starts == 0 {
            return Err(SolverError::Parameter("max_sweeps and n_starts must be positive".into()));
        }
        Ok(())
    }

    /// Penalty level for a column of the given group.
    pub fn lambda_for(&self, group: ColumnGroup) -> f64 {
        if group == ColumnGroup::Intercept || self.exempt.contains(&group) {
            return 0.0;
        }
        match group {
            ColumnGroup::BiasBasis => self.lambda2,
            _ => self.lambda1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Coefficients on the original column scale, outcome-model part first.
    pub theta: Vec<f64>,
    pub active_beta: Vec<usize>,
    pub active_delta: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub n_sweeps: usize,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Union of both active sets, sorted.
    pub fn active(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.active_beta.iter().chain(&self.active_delta).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Evaluates the penalized objective directly from residuals. This is an
/// independent route to the quantity the solver minimizes.
pub fn penalized_objective(d: &DesignMatrix, y: &[f64], cfg: &PenaltyConfig, theta: &[f64]) -> f64 {
    let n = d.n_rows() as f64;
    let fitted = &d.m * DVector::from_column_slice(theta);
    let rss: f64 = y.iter().zip(fitted.iter()).map(|(yi, fi)| (yi - fi).powi(2)).sum();
    let mut pen = 0.0;
    for j in 0..d.n_cols() {
        let lam = cfg.lambda_for(d.groups[j]);
        if lam == 0.0 || d.degenerate[j] {
            continue;
        }
        let col = d.m.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        pen += value_unchecked(sd * theta[j].abs(), lam, cfg.a);
    }
    rss / (2.0 * n) + pen
}

/// Design columns and response centered by their full-sample means. The
/// intercept column stays a column of ones.
#[derive(Debug, Clone)]
pub(crate) struct CenteredDesign {
    pub m: DMatrix<f64>,
    pub y: DVector<f64>,
    pub col_mean: Vec<f64>,
    pub y_mean: f64,
    pub groups: Vec<ColumnGroup>,
    pub degenerate: Vec<bool>,
    /// Full-sample (1/N) variance of every column.
    pub col_var: Vec<f64>,
}

impl CenteredDesign {
    pub fn new(d: &DesignMatrix, y: &[f64]) -> Self {
        let n = d.n_rows() as f64;
        let k = d.n_cols();
        let y_mean = y.iter().sum::<f64>() / n;
        let mut m = d.m.clone();
        let mut col_mean = vec![0.0; k];
        let mut col_var = vec![0.0; k];
        for j in 0..k {
            if d.groups[j] == ColumnGroup::Intercept {
                continue;
            }
            let mean = d.m.column(j).mean();
            col_mean[j] = mean;
            let mut ss = 0.0;
            for v in m.column_mut(j).iter_mut() {
                *v -= mean;
                ss += *v * *v;
            }
            col_var[j] = ss / n;
        }
        CenteredDesign {
            m,
            y: DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean)),
            col_mean,
            y_mean,
            groups: d.groups.clone(),
            degenerate: d.degenerate.clone(),
            col_var,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.m.ncols()
    }

    pub fn moments(&self, rows: Option<&[usize]>) -> Moments {
        match rows {
            None => Moments {
                n: self.m.nrows() as f64,
                xtx: self.m.tr_mul(&self.m),
                xty: self.m.tr_mul(&self.y),
                yty: self.y.dot(&self.y),
            },
            Some(rows) => {
                let sub = self.m.select_rows(rows);
                let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
                Moments {
                    n: rows.len() as f64,
                    xtx: sub.tr_mul(&sub),
                    xty: sub.tr_mul(&ys),
                    yty: ys.dot(&ys),
                }
            }
        }
    }

    /// Converts coefficients of the centered problem back to the original
    /// column scale (only the intercept changes).
    pub fn uncenter(&self, mut theta: Vec<f64>) -> Vec<f64> {
        let shift: f64 = (1..theta.len()).map(|j| theta[j] * self.col_mean[j]).sum();
        theta[0] += self.y_mean - shift;
        theta
    }
}

/// Sufficient statistics `(n, XᵀX, Xᵀy, yᵀy)` over a set of rows.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub n: f64,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
}

impl Moments {
    pub fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            xtx: &self.xtx - &other.xtx,
            xty: &self.xty - &other.xty,
            yty: self.yty - other.yty,
        }
    }

    /// Residual sum of squares of `θ` (intercept column included) on these rows.
    pub fn rss(&self, theta: &DVector<f64>) -> f64 {
        (self.yty - 2.0 * theta.dot(&self.xty) + (&self.xtx * theta).dot(theta)).max(0.0)
    }
}

/// Standardized problem over the free (non-intercept, non-degenerate)
/// columns of a row subset.
#[derive(Debug, Clone)]
pub(crate) struct StdProblem {
    /// Design column index of each free coordinate.
    pub free: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub y_mean: f64,
    /// Correlation-type matrix of standardized columns (unit diagonal).
    pub r: DMatrix<f64>,
    /// Standardized column/response cross moments.
    pub c: DVector<f64>,
    pub yvar: f64,
    pub k: usize,
}

impl StdProblem {
    pub fn new(cd: &CenteredDesign, mom: &Moments) -> Self {
        let k = cd.n_cols();
        let n = mom.n;
        let mean_all: Vec<f64> = (0..k).map(|j| mom.xtx[(0, j)] / n).collect();
        let y_mean = mom.xty[0] / n;
        let mut free = Vec::new();
        let mut scale = Vec::new();
        for j in 0..k {
            if cd.groups[j] == ColumnGroup::Intercept || cd.degenerate[j] {
                continue;
            }
            let var = mom.xtx[(j, j)] / n - mean_all[j] * mean_all[j];
            if var > 1e-10 * cd.col_var[j] && var > 0.0 {
                free.push(j);
                scale.push(var.sqrt());
            }
        }
        let p = free.len();
        let mut r = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        for (a, &ja) in free.iter().enumerate() {
            for (b, &jb) in free.iter().enumerate().skip(a) {
                let cov = mom.xtx[(ja, jb)] / n - mean_all[ja] * mean_all[jb];
                let v = if a == b { 1.0 } else { cov / (scale[a] * scale[b]) };
                r[(a, b)] = v;
                r[(b, a)] = v;
            }
            c[a] = (mom.xty[ja] / n - mean_all[ja] * y_mean) / scale[a];
        }
        let yvar = (mom.yty / n - y_mean * y_mean).max(0.0);
        StdProblem {
            mean: free.iter().map(|&j| mean_all[j]).collect(),
            free,
            scale,
            y_mean,
            r,
            c,
            yvar,
            k,
        }
    }

    pub fn lambdas(&self, groups: &[ColumnGroup], cfg: &PenaltyConfig) -> Vec<f64> {
        self.free.iter().map(|&j| cfg.lambda_for(groups[j])).collect()
    }

    #[cfg(test)]
    pub fn objective(&self, gamma: &DVector<f64>, lambdas: &[f64], a: f64) -> f64 {
        let rg = &self.r * gamma;
        let loss = 0.5 * (self.yvar - 2.0 * gamma.dot(&self.c) + gamma.dot(&rg)).max(0.0);
        let pen: f64 = gamma
            .iter()
            .zip(lambdas)
            .filter(|(_, &l)| l > 0.0)
            .map(|(g, &l)| value_unchecked(g.abs(), l, a))
            .sum();
        loss + pen
    }

    /// Same value as [`StdProblem::objective`] given the current gradient
    /// `g = c − Rγ`, in O(p).
    fn objective_from_grad(&self, gamma: &DVector<f64>, grad: &DVector<f64>, lambdas: &[f64], a: f64) -> f64 {
        let loss = 0.5 * (self.yvar - gamma.dot(&self.c) - gamma.dot(grad)).max(0.0);
        let pen: f64 = gamma
            .iter()
            .zip(lambdas)
            .filter(|(g, &l)| l > 0.0 && **g != 0.0)
            .map(|(g, &l)| value_unchecked(g.abs(), l, a))
            .sum();
        loss + pen
    }

    /// Coefficients in centered-design coordinates (intercept at index 0).
    pub fn to_centered_theta(&self, gamma: &DVector<f64>) -> Vec<f64> {
        let mut theta = vec![0.0; self.k];
        let mut shift = 0.0;
        for (a, &j) in self.free.iter().enumerate() {
            theta[j] = gamma[a] / self.scale[a];
            shift += theta[j] * self.mean[a];
        }
        theta[0] = self.y_mean - shift;
        theta
    }

    /// Max absolute standardized inner product per penalty group, after
    /// fitting the unpenalized coordinates. Used to anchor lambda paths.
    pub fn null_gradient(&self, lambdas_zero_mask: &[bool]) -> DVector<f64> {
        let unpen: Vec<usize> = (0..self.free.len()).filter(|&a| lambdas_zero_mask[a]).collect();
        let mut gamma = DVector::zeros(self.free.len());
        if !unpen.is_empty() {
            let sub = DMatrix::from_fn(unpen.len(), unpen.len(), |i, j| self.r[(unpen[i], unpen[j])]);
            let rhs = DVector::from_iterator(unpen.len(), unpen.iter().map(|&a| self.c[a]));
            let (pinv, _) = linalg::pseudo_inverse(&sub, 1e-12);
            let sol = pinv * rhs;
            for (i, &a) in unpen.iter().enumerate() {
                gamma[a] = sol[i];
            }
        }
        &self.c - &self.r * gamma
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CdOutcome {
    pub gamma: DVector<f64>,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

fn sweep(
    p: &StdProblem,
    coords: &[usize],
    gamma: &mut DVector<f64>,
    grad: &mut DVector<f64>,
    lambdas: &[f64],
    a: f64,
) -> f64 {
    let mut max_change: f64 = 0.0;
    for &j in coords {
        let z = grad[j] + gamma[j];
        let new = scad_univariate_update(z, 1.0, lambdas[j], a);
        let delta = new - gamma[j];
        if delta != 0.0 {
            gamma[j] = new;
            grad.axpy(-delta, &p.r.column(j), 1.0);
            max_change = max_change.max(delta.abs());
        }
    }
    max_change
}

/// Exact minimizer of the objective over the active coordinates with their
/// signs and SCAD regions held fixed, where that piece is a convex quadratic.
/// The move is clipped at the first region boundary, so the objective never
/// increases. Returns `None` when the piece is not convex or no move is made.
fn pattern_step(p: &StdProblem, active: &[usize], gamma: &DVector<f64>, lambdas: &[f64], a: f64) -> Option<DVector<f64>> {
    let active: Vec<usize> = active.iter().copied().filter(|&j| gamma[j] != 0.0).collect();
    let k = active.len();
    if k == 0 {
        return None;
    }
    let mut h = DMatrix::from_fn(k, k, |i, j| p.r[(active[i], active[j])]);
    let mut rhs = DVector::from_iterator(k, active.iter().map(|&j| p.c[j]));
    // admissible interval of each coordinate inside its current piece
    let mut lo = vec![f64::NEG_INFINITY; k];
    let mut hi = vec![f64::INFINITY; k];
    for (i, &j) in active.iter().enumerate() {
        let lam = lambdas[j];
        if lam == 0.0 {
            continue;
        }
        let g = gamma[j];
        let sgn = g.signum();
        let t = g.abs();
        let (tl, th) = if t <= lam {
            rhs[i] -= lam * sgn;
            (0.0, lam)
        } else if t <= a * lam {
            rhs[i] -= a * lam * sgn / (a - 1.0);
            h[(i, i)] -= 1.0 / (a - 1.0);
            (lam, a * lam)
        } else {
            (a * lam, f64::INFINITY)
        };
        if sgn > 0.0 {
            lo[i] = tl;
            hi[i] = th;
        } else {
            lo[i] = -th;
            hi[i] = -tl;
        }
    }
    let target = h.cholesky()?.solve(&rhs);
    let mut step: f64 = 1.0;
    for i in 0..k {
        let cur = gamma[active[i]];
        let d = target[i] - cur;
        if d > 0.0 && target[i] > hi[i] {
            step = step.min(((hi[i] - cur) / d).max(0.0));
        } else if d < 0.0 && target[i] < lo[i] {
            step = step.min(((lo[i] - cur) / d).max(0.0));
        }
    }
    if step <= 0.0 {
        return None;
    }
    let mut out = gamma.clone();
    for i in 0..k {
        let j = active[i];
        let v = if step == 1.0 { target[i] } else { gamma[j] + step * (target[i] - gamma[j]) };
        out[j] = v.clamp(lo[i], hi[i]);
    }
    Some(out)
}

const PATTERN_EVERY: usize = 4;

/// Cyclic coordinate descent with active-set cycling: full sweeps alternate
/// with sweeps over the nonzero coordinates until a full sweep moves no
/// coordinate by more than `tol`. Inner cycles are periodically shortcut by
/// [`pattern_step`].
pub(crate) fn coordinate_descent(
    p: &StdProblem,
    lambdas: &[f64],
    a: f64,
    tol: f64,
    max_sweeps: usize,
    start: DVector<f64>,
) -> CdOutcome {
    let nf = p.free.len();
    let all: Vec<usize> = (0..nf).collect();
    let mut gamma = start;
    let mut grad = &p.c - &p.r * &gamma;
    let mut trace = vec![p.objective_from_grad(&gamma, &grad, lambdas, a)];
    let mut sweeps = 0;
    let mut converged = nf == 0;
    while !converged && sweeps < max_sweeps {
        let change = sweep(p, &all, &mut gamma, &mut grad, lambdas, a);
        sweeps += 1;
        trace.push(p.objective_from_grad(&gamma, &grad, lambdas, a));
        if change < tol {
            converged = true;
            break;
        }
        let active: Vec<usize> = all.iter().copied().filter(|&j| gamma[j] != 0.0).collect();
        let mut inner = 0;
        while sweeps < max_sweeps {
            let change = sweep(p, &active, &mut gamma, &mut grad, lambdas, a);
            sweeps += 1;
            inner += 1;
            trace.push(p.objective_from_grad(&gamma, &grad, lambdas, a));
            if change < tol {
                break;
            }
            if inner % PATTERN_EVERY == 0 {
                if let Some(next) = pattern_step(p, &active, &gamma, lambdas, a) {
                    let next_grad = &p.c - &p.r * &next;
                    let f = p.objective_from_grad(&next, &next_grad, lambdas, a);
                    if f <= *trace.last().unwrap() {
                        gamma = next;
                        grad = next_grad;
                        trace.push(f);
                    }
                }
            }
        }
        grad = &p.c - &p.r * &gamma;
    }
    CdOutcome {
        gamma,
        trace,
        converged,
        sweeps,
    }
}

/// Starting points for multi-start fits: zeros, a near-least-squares ridge
/// solution, then small deterministic jitters around zero.
pub(crate) fn starting_points(p: &StdProblem, n_starts: usize) -> Vec<DVector<f64>> {
    let nf = p.free.len();
    let mut starts = vec![DVector::zeros(nf)];
    if n_starts >= 2 {
        let ridge = &p.r + DMatrix::identity(nf, nf) * 1e-3;
        let g = match linalg::cholesky(&ridge, &linalg::default_names(nf)) {
            Ok(l) => linalg::chol_solve(&l, &p.c),
            Err(_) => linalg::pseudo_inverse(&ridge, 1e-12).0 * &p.c,
        };
        starts.push(g);
    }
    for s in 2..n_starts {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0x9e37_79b9 + s as u64);
        starts.push(DVector::from_fn(nf, |_, _| rng.random_range(-0.1..0.1)));
    }
    starts
}

/// Runs coordinate descent from each start and keeps the lowest objective
/// (earliest start on ties).
pub(crate) fn multi_start(
    p: &StdProblem,
    lambdas: &[f64],
    cfg: &PenaltyConfig,
    extra_start: Option<DVector<f64>>,
) -> CdOutcome {
    let mut starts = starting_points(p, cfg.n_starts);
    if let Some(w) = extra_start {
        starts.push(w);
    }
    let mut best: Option<CdOutcome> = None;
    for s in starts {
        let out = coordinate_descent(p, lambdas, cfg.a, cfg.tol, cfg.max_sweeps, s);
        let better = match &best {
            None => true,
            Some(b) => out.trace.last().unwrap() < b.trace.last().unwrap(),
        };
        if better {
            best = Some(out);
        }
    }
    best.expect("at least one start")
}

pub(crate) fn fit_result(cd: &CenteredDesign, p: &StdProblem, out: CdOutcome) -> FitResult {
    let theta = cd.uncenter(p.to_centered_theta(&out.gamma));
    let mut active_beta = Vec::new();
    let mut active_delta = Vec::new();
    for (j, &t) in theta.iter().enumerate() {
        if t != 0.0 {
            if cd.groups[j] == ColumnGroup::BiasBasis {
                active_delta.push(j);
            } else {
                active_beta.push(j);
            }
        }
    }
    FitResult {
        theta,
        active_beta,
        active_delta,
        objective_trace: out.trace,
        converged: out.converged,
        n_sweeps: out.sweeps,
    }
}

fn check_conformant(d: &DesignMatrix, y: &[f64]) -> Result<(), SolverError> {
    if d.n_rows() != y.len() {
        return Err(SolverError::NonConformant {
            rows: d.n_rows(),
            len: y.len(),
        });
    }
    Ok(())
}

/// Double-penalty SCAD least squares by coordinate descent.
///
/// Degenerate columns are pinned at zero. Non-convergence within
/// `max_sweeps` is reported through `converged`, not as an error.
pub fn fit_penalized_ls(d: &DesignMatrix, y: &[f64], cfg: &PenaltyConfig) -> Result<FitResult, SolverError> {
    cfg.validate()?;
    check_conformant(d, y)?;
    let cd = CenteredDesign::new(d, y);
    let mom = cd.moments(None);
    let p = StdProblem::new(&cd, &mom);
    let lambdas = p.lambdas(&cd.groups, cfg);
    let out = multi_start(&p, &lambdas, cfg, None);
    Ok(fit_result(&cd, &p, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refit {
    pub theta: Vec<f64>,
    /// K×K covariance, zero outside the active block.
    pub cov: Vec<Vec<f64>>,
    pub sigma2_hat: f64,
    pub active: Vec<usize>,
}

impl Refit {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[j][j].max(0.0).sqrt()
    }
}

/// Ordinary least squares on the active columns.
///
/// `σ̂² = RSS / (N − |active|)` and `cov = σ̂² (DₐᵀDₐ)⁻¹`; inactive
/// coefficients are zero.
pub fn refit_ols(d: &DesignMatrix, y: &[f64], active: &[usize]) -> Result<Refit, SolverError> {
    check_conformant(d, y)?;
    let mut active: Vec<usize> = active.to_vec();
    active.sort_unstable();
    active.dedup();
    if !active.contains(&0) {
        return Err(SolverError::Parameter("refit requires the intercept column".into()));
    }
    if let Some(&j) = active.iter().find(|&&j| j >= d.n_cols()) {
        return Err(SolverError::Parameter(format!("column {j} out of range")));
    }
    let n = d.n_rows();
    if n <= active.len() {
        return Err(SolverError::Linalg(LinalgError::Dimension(format!(
            "{} rows cannot support {} active columns",
            n,
            active.len()
        ))));
    }
    let da = d.m.select_columns(&active);
    let names: Vec<String> = active.iter().map(|&j| d.names[j].clone()).collect();
    let g = da.tr_mul(&da);
    let l = linalg::cholesky(&g, &names)?;
    let yv = DVector::from_column_slice(y);
    let coef = linalg::chol_solve(&l, &da.tr_mul(&yv));
    let resid = &yv - &da * &coef;
    let sigma2 = resid.dot(&resid) / (n - active.len()) as f64;
    let ginv = linalg::chol_inverse(&l);
    let k = d.n_cols();
    let mut theta = vec![0.0; k];
    let mut cov = vec![vec![0.0; k]; k];
    for (a, &ja) in active.iter().enumerate() {
        theta[ja] = coef[a];
        for (b, &jb) in active.iter().enumerate() {
            cov[ja][jb] = sigma2 * ginv[(a, b)];
        }
    }
    Ok(Refit {
        theta,
        cov,
        sigma2_hat: sigma2,
        active,
    })
}

/// OLS restricted to `active` computed from moments (CV training folds).
/// Returns centered-design coefficients with the intercept at index 0.
pub(crate) fn refit_from_moments(mom: &Moments, active: &[usize], k: usize) -> Result<DVector<f64>, LinalgError> {
    let p = active.len();
    let g = DMatrix::from_fn(p, p, |i, j| mom.xtx[(active[i], active[j])]);
    let b = DVector::from_iterator(p, active.iter().map(|&j| mom.xty[j]));
    let l = linalg::cholesky(&g, &linalg::default_names(p))?;
    let coef = linalg::chol_solve(&l, &b);
    let mut theta = DVector::zeros(k);
    for (i, &j) in active.iter().enumerate() {
        theta[j] = coef[i];
    }
    Ok(theta)
}
