//! Treatment-effect estimators: the penalized integration estimators, the
//! randomized-only ANCOVA, the plug-in variance comparison, and the two
//! baselines (matching with bias adjustment, weighted power prior).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{assemble_design, assemble_mu_design, power_basis, BasisSpec, ColumnGroup, DesignMatrix};
use crate::data::Dataset;
use crate::error::{EstimateError, LinalgError, SolverError};
use crate::linalg;
use crate::matching::{greedy_match, whitening, MatchSpec};
use crate::solver::{fit_penalized_ls, refit_ols, FitResult, PenaltyConfig, Refit};
use crate::tuning::{cv_select, CVPlan, CVResult};

pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Dpie,
    Spie,
    Re,
    Mba,
    Bpp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dpie, Method::Spie, Method::Re, Method::Mba, Method::Bpp];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dpie => "DPIE",
            Method::Spie => "SPIE",
            Method::Re => "RE",
            Method::Mba => "MBA",
            Method::Bpp => "BPP",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method `{s}` (expected dpie, spie, re, mba or bpp)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub method: Method,
    pub tau_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n_selected_mu: usize,
    pub n_selected_bias: usize,
    pub lambda_used: Option<(f64, f64)>,
    pub converged: bool,
    /// Caveats attached to this result (delegation, clipping, ...).
    pub notes: Vec<String>,
}

impl AteResult {
    pub fn new(method: Method, tau_hat: f64, se: f64) -> Self {
        AteResult {
            method,
            tau_hat,
            se,
            ci95: (tau_hat - Z_975 * se, tau_hat + Z_975 * se),
            n_selected_mu: 0,
            n_selected_bias: 0,
            lambda_used: None,
            converged: true,
            notes: Vec::new(),
        }
    }

    pub fn covers(&self, tau: f64) -> bool {
        self.ci95.0 <= tau && tau <= self.ci95.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub v_combined: f64,
    pub v_re_only: f64,
    pub sigma2_hat: f64,
    /// The external-control bias block was singular and a pseudo-inverse was used.
    pub pseudo_inverse_used: bool,
}

/// Everything produced on the way to a penalized estimate.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub method: Method,
    pub design: DesignMatrix,
    pub cv: CVResult,
    pub fit: FitResult,
    pub refit: Refit,
    pub notes: Vec<String>,
}

impl Pipeline {
    pub fn selected_in(&self, group: ColumnGroup) -> Vec<usize> {
        self.fit
            .active()
            .into_iter()
            .filter(|&j| self.design.groups[j] == group)
            .collect()
    }

    pub fn ate(&self) -> Result<AteResult, EstimateError> {
        let t = self
            .design
            .treatment_col()
            .filter(|&t| !self.design.degenerate[t])
            .ok_or_else(|| EstimateError::Precondition("treatment indicator has no variation".into()))?;
        let mut r = AteResult::new(self.method, self.refit.theta[t], self.refit.se(t));
        r.n_selected_mu = self.selected_in(ColumnGroup::MuBasis).len();
        r.n_selected_bias = self.selected_in(ColumnGroup::BiasBasis).len();
        r.lambda_used = Some((self.cv.best_lambda1, self.cv.best_lambda2));
        r.converged = self.fit.converged;
        r.notes = self.notes.clone();
        Ok(r)
    }
}

/// Columns kept in the post-selection refit: the intercept, every
/// non-degenerate exempt column, and the selected columns.
fn refit_columns(d: &DesignMatrix, fit: &FitResult, cfg: &PenaltyConfig) -> Vec<usize> {
    (0..d.n_cols())
        .filter(|&j| j == 0 || (!d.degenerate[j] && (fit.theta[j] != 0.0 || cfg.exempt.contains(&d.groups[j]))))
        .collect()
}

fn penalized_pipeline(
    method: Method,
    ds: &Dataset,
    d: DesignMatrix,
    plan: &CVPlan,
    cfg: &PenaltyConfig,
) -> Result<Pipeline, EstimateError> {
    let cv = cv_select(&d, &ds.y, ds, plan, cfg)?;
    let fit = fit_penalized_ls(&d, &ds.y, &cfg.with_lambdas(cv.best_lambda1, cv.best_lambda2))?;
    let cols = refit_columns(&d, &fit, cfg);
    let refit = refit_ols(&d, &ds.y, &cols)?;
    Ok(Pipeline {
        method,
        design: d,
        cv,
        fit,
        refit,
        notes: Vec::new(),
    })
}

/// Integration pipeline on pooled data. `single_penalty` pins `λ1 = λ2`.
/// Without external controls this runs the randomized-only pipeline.
pub fn integrate(
    ds: &Dataset,
    mu_spec: &BasisSpec,
    b_spec: &BasisSpec,
    plan: &CVPlan,
    cfg: &PenaltyConfig,
    single_penalty: bool,
) -> Result<Pipeline, EstimateError> {
    let method = if single_penalty { Method::Spie } else { Method::Dpie };
    if ds.n_ec() == 0 {
        let mut p = re_pipeline(ds, mu_spec, plan, cfg)?;
        p.method = method;
        p.notes.push("no external controls: randomized-only fit".into());
        return Ok(p);
    }
    let plan = if single_penalty { plan.single_penalty() } else { plan.clone() };
    penalized_pipeline(method, ds, assemble_design(ds, mu_spec, b_spec), &plan, cfg)
}

/// Randomized-only pipeline: external rows are dropped and a single penalty
/// is tuned.
pub fn re_pipeline(ds: &Dataset, mu_spec: &BasisSpec, plan: &CVPlan, cfg: &PenaltyConfig) -> Result<Pipeline, EstimateError> {
    let re = ds.re_rows();
    let d = assemble_mu_design(&re, mu_spec);
    penalized_pipeline(Method::Re, &re, d, &plan.single_penalty(), cfg)
}

pub fn dpie(ds: &Dataset, mu_spec: &BasisSpec, b_spec: &BasisSpec, plan: &CVPlan, cfg: &PenaltyConfig) -> Result<AteResult, EstimateError> {
    integrate(ds, mu_spec, b_spec, plan, cfg, false)?.ate()
}

pub fn spie(ds: &Dataset, mu_spec: &BasisSpec, b_spec: &BasisSpec, plan: &CVPlan, cfg: &PenaltyConfig) -> Result<AteResult, EstimateError> {
    integrate(ds, mu_spec, b_spec, plan, cfg, true)?.ate()
}

pub fn re_only(ds: &Dataset, mu_spec: &BasisSpec, plan: &CVPlan, cfg: &PenaltyConfig) -> Result<AteResult, EstimateError> {
    re_pipeline(ds, mu_spec, plan, cfg)?.ate()
}

/// Plug-in variances of the treatment coefficient with and without the
/// external controls, sharing the `σ̂²` of the combined refit on `active`.
///
/// With `p_mu` the active outcome-model columns (intercept and treatment
/// included) and `p_b` the active bias columns,
///
/// ```text
/// V_re       = σ² [ Σ_{S=1} p_mu p_muᵀ ]⁻¹
/// V_combined = σ² [ Σ_{S=1} p_mu p_muᵀ + Rᵀ R ]⁻¹,   R = (I − P_b) P_mu,ec
/// ```
///
/// where `R` holds the external-control `p_mu` rows residualized on their
/// `p_b` rows. The reduction is computed as a nonnegative correction
/// subtracted from `V_re`, so `V_combined ≤ V_re` holds exactly.
pub fn plugin_variance(d: &DesignMatrix, y: &[f64], s: &[u8], active: &[usize]) -> Result<VarianceReport, EstimateError> {
    if s.len() != d.n_rows() {
        return Err(EstimateError::Precondition(format!(
            "design has {} rows but {} study indicators",
            d.n_rows(),
            s.len()
        )));
    }
    let (sigma2, active, mut pseudo) = match refit_ols(d, y, active) {
        Ok(r) => (r.sigma2_hat, r.active, false),
        Err(SolverError::Linalg(LinalgError::RankDeficient { .. } | LinalgError::Dimension(_))) => {
            pinv_sigma2(d, y, active)?
        }
        Err(e) => return Err(e.into()),
    };
    let mu_cols: Vec<usize> = active.iter().copied().filter(|&j| d.groups[j] != ColumnGroup::BiasBasis).collect();
    let b_cols: Vec<usize> = active.iter().copied().filter(|&j| d.groups[j] == ColumnGroup::BiasBasis).collect();
    let t = d
        .treatment_col()
        .and_then(|t| mu_cols.iter().position(|&j| j == t))
        .ok_or_else(|| EstimateError::Precondition("treatment column must be active".into()))?;
    let re_rows: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 1).collect();
    let ec_rows: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 0).collect();

    let p_re = d.m.select_rows(&re_rows).select_columns(&mu_cols);
    let a = p_re.tr_mul(&p_re);
    let names: Vec<String> = mu_cols.iter().map(|&j| d.names[j].clone()).collect();
    let la = linalg::cholesky(&a, &names)?;
    let k1 = mu_cols.len();
    let mut e_t = DVector::zeros(k1);
    e_t[t] = 1.0;
    let a_inv_et = linalg::chol_solve(&la, &e_t);
    let base = a_inv_et[t];

    let mut corr = 0.0;
    if !ec_rows.is_empty() {
        let e = d.m.select_rows(&ec_rows).select_columns(&mu_cols);
        let resid = if b_cols.is_empty() {
            e
        } else {
            let b = d.m.select_rows(&ec_rows).select_columns(&b_cols);
            let (pinv, rank) = linalg::pseudo_inverse(&b, 1e-12);
            pseudo |= rank < b_cols.len();
            &e - &b * (pinv * &e)
        };
        // any T with TᵀT = RᵀR will do; the QR factor keeps it k1 × k1
        let tmat = if resid.nrows() > k1 { resid.qr().r() } else { resid };
        let u = &tmat * &a_inv_et;
        let a_inv_tt = DMatrix::from_columns(
            &tmat
                .row_iter()
                .map(|row| linalg::chol_solve(&la, &row.transpose()))
                .collect::<Vec<_>>(),
        );
        let mmat = DMatrix::identity(tmat.nrows(), tmat.nrows()) + &tmat * a_inv_tt;
        let mmat = (&mmat + mmat.transpose()) * 0.5;
        let lm = linalg::cholesky(&mmat, &linalg::default_names(tmat.nrows()))?;
        let w = linalg::forward_sub(&lm, &u);
        corr = w.dot(&w);
    }
    let v_re = sigma2 * base;
    let v_comb = sigma2 * (base - corr).max(0.0);
    Ok(VarianceReport {
        v_combined: v_comb,
        v_re_only: v_re,
        sigma2_hat: sigma2,
        pseudo_inverse_used: pseudo,
    })
}

/// Residual variance from a minimum-norm least-squares fit, for active sets
/// whose bias block is too wide for the external controls available.
fn pinv_sigma2(d: &DesignMatrix, y: &[f64], active: &[usize]) -> Result<(f64, Vec<usize>, bool), EstimateError> {
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    let da = d.m.select_columns(&active);
    let (pinv, rank) = linalg::pseudo_inverse(&da, 1e-12);
    if d.n_rows() <= rank {
        return Err(LinalgError::Dimension(format!("{} rows cannot support rank {rank}", d.n_rows())).into());
    }
    let yv = DVector::from_column_slice(y);
    let resid = &yv - &da * (pinv * &yv);
    Ok((resid.dot(&resid) / (d.n_rows() - rank) as f64, active, true))
}

/// OLS of `y − offset` on `[1, A, p_mu(X)]` over all rows.
pub fn ancova_with_offset(ds: &Dataset, mu_spec: &BasisSpec, offset: &[f64]) -> Result<AteResult, EstimateError> {
    if offset.len() != ds.n_rows() {
        return Err(EstimateError::Precondition("offset length differs from row count".into()));
    }
    let d = assemble_mu_design(ds, mu_spec);
    let y: Vec<f64> = ds.y.iter().zip(offset).map(|(y, o)| y - o).collect();
    let cols: Vec<usize> = (0..d.n_cols()).collect();
    let r = refit_ols(&d, &y, &cols)?;
    Ok(AteResult::new(Method::Re, r.theta[1], r.se(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbaOutcome {
    pub ate: AteResult,
    pub delta_hat: f64,
    pub delta_se: f64,
    pub stage1_pairs: usize,
    pub stage2_pairs: usize,
    pub stage3_pairs: usize,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Three-stage matching with a constant bias adjustment.
///
/// Stage 1 pairs treated with concurrent controls, stage 2 pairs concurrent
/// with external controls to estimate the constant bias `δ̂`, stage 3 pairs
/// leftover treated units with unused external controls whose outcomes are
/// shifted by `δ̂`. The estimate is the mean paired difference.
pub fn mba_details(ds: &Dataset, spec: &MatchSpec) -> Result<MbaOutcome, EstimateError> {
    let ct = ds.rows_where(|a, s| a == 1 && s == 1);
    let cc = ds.rows_where(|a, s| a == 0 && s == 1);
    let ec = ds.rows_where(|_, s| s == 0);
    if ct.is_empty() || cc.is_empty() || ec.is_empty() {
        return Err(EstimateError::Precondition(format!(
            "matching needs treated, concurrent and external controls (got {}, {}, {})",
            ct.len(),
            cc.len(),
            ec.len()
        )));
    }
    let w = whitening(&ds.x, spec.distance);
    let pts = |rows: &[usize]| -> Vec<DVector<f64>> { rows.iter().map(|&i| &w * ds.x.row(i).transpose()).collect() };
    let (p_ct, p_cc, p_ec) = (pts(&ct), pts(&cc), pts(&ec));

    let s1 = greedy_match(&p_ct, &p_cc, 1, false, true)?;
    let mut diffs = Vec::new();
    let mut unmatched = Vec::new();
    for (t, list) in s1.iter().enumerate() {
        match list.first() {
            Some(&(c, _)) => diffs.push(ds.y[ct[t]] - ds.y[cc[c]]),
            None => unmatched.push(t),
        }
    }
    let stage1 = diffs.len();

    let s2 = greedy_match(&p_cc, &p_ec, 1, false, true)?;
    let mut used = vec![false; ec.len()];
    let mut bias = Vec::new();
    for (c, list) in s2.iter().enumerate() {
        if let Some(&(e, _)) = list.first() {
            used[e] = true;
            bias.push(ds.y[ec[e]] - ds.y[cc[c]]);
        }
    }
    if bias.is_empty() {
        return Err(EstimateError::InsufficientControls {
            unmatched: cc.len(),
            available: 0,
        });
    }
    let (delta_hat, delta_se) = mean_and_se(&bias);

    let free: Vec<usize> = (0..ec.len()).filter(|&e| !used[e]).collect();
    if free.len() < unmatched.len() {
        return Err(EstimateError::InsufficientControls {
            unmatched: unmatched.len(),
            available: free.len(),
        });
    }
    let targets: Vec<DVector<f64>> = unmatched.iter().map(|&t| p_ct[t].clone()).collect();
    let cands: Vec<DVector<f64>> = free.iter().map(|&e| p_ec[e].clone()).collect();
    let s3 = greedy_match(&targets, &cands, 1, false, false)?;
    for (k, list) in s3.iter().enumerate() {
        let e = free[list[0].0];
        diffs.push(ds.y[ct[unmatched[k]]] - (ds.y[ec[e]] - delta_hat));
    }
    let (tau, se) = mean_and_se(&diffs);
    let mut ate = AteResult::new(Method::Mba, tau, se);
    ate.notes.push("se from paired differences".into());
    Ok(MbaOutcome {
        ate,
        delta_hat,
        delta_se,
        stage1_pairs: stage1,
        stage2_pairs: bias.len(),
        stage3_pairs: unmatched.len(),
    })
}

pub fn mba_estimate(ds: &Dataset, spec: &MatchSpec) -> Result<AteResult, EstimateError> {
    Ok(mba_details(ds, spec)?.ate)
}

const LOGIT_MAX_ITER: usize = 100;
const WEIGHT_CLIP: f64 = 1e-6;

/// Logistic regression by iteratively reweighted least squares. Returns
/// fitted probabilities.
pub fn logistic_fit(x: &DMatrix<f64>, s: &[u8]) -> Result<Vec<f64>, EstimateError> {
    let (n, p) = x.shape();
    let yv = DVector::from_iterator(n, s.iter().map(|&v| v as f64));
    let mut beta = DVector::zeros(p);
    let mut dev_old = f64::INFINITY;
    let deviance = |eta: &DVector<f64>| -> f64 {
        eta.iter()
            .zip(yv.iter())
            .map(|(&e, &yi)| {
                // log(1 + exp(e)) − y e, stable for large |e|
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                2.0 * (softplus - yi * e)
            })
            .sum()
    };
    for _ in 0..LOGIT_MAX_ITER {
        let eta = x * &beta;
        let prob: Vec<f64> = eta.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect();
        let wts: Vec<f64> = prob.iter().map(|&q| (q * (1.0 - q)).max(1e-10)).collect();
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let row = x.row(i);
            let z = eta[i] + (yv[i] - prob[i]) / wts[i];
            xtwx.ger(wts[i], &row.transpose(), &row.transpose(), 1.0);
            xtwz.axpy(wts[i] * z, &row.transpose(), 1.0);
        }
        for j in 0..p {
            xtwx[(j, j)] += 1e-8;
        }
        let new_beta = match xtwx.clone().cholesky() {
            Some(c) => c.solve(&xtwz),
            None => linalg::pseudo_inverse(&xtwx, 1e-12).0 * xtwz,
        };
        // step halving keeps the deviance from increasing
        let mut step = new_beta - &beta;
        let mut dev = deviance(&(x * (&beta + &step)));
        let mut halvings = 0;
        while dev > dev_old && halvings < 30 {
            step *= 0.5;
            dev = deviance(&(x * (&beta + &step)));
            halvings += 1;
        }
        beta += step;
        if (dev_old - dev).abs() < 1e-10 * (dev.abs() + 0.1) {
            let eta = x * &beta;
            return Ok(eta.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect());
        }
        dev_old = dev;
    }
    Err(EstimateError::LogisticNonConvergence(LOGIT_MAX_ITER))
}

/// Weighted ANCOVA on pooled rows: randomized rows get weight 1 and
/// external row `k` gets `ec_weights[k]`.
///
/// `σ̂² = Σ w r² / (n_eff − p)` with `n_eff` the number of positively
/// weighted rows; `cov = σ̂² (DᵀWD)⁻¹`.
pub fn bpp_weighted(ds: &Dataset, basis: &BasisSpec, ec_weights: &[f64]) -> Result<AteResult, EstimateError> {
    let ec = ds.rows_where(|_, s| s == 0);
    if ec.len() != ec_weights.len() {
        return Err(EstimateError::Precondition("one weight per external control required".into()));
    }
    let mut w = vec![1.0; ds.n_rows()];
    for (k, &i) in ec.iter().enumerate() {
        w[i] = ec_weights[k];
    }
    let d = assemble_mu_design(ds, basis);
    let keep: Vec<usize> = (0..d.n_cols()).filter(|&j| j == 0 || !d.degenerate[j]).collect();
    let m = d.m.select_columns(&keep);
    let names: Vec<String> = keep.iter().map(|&j| d.names[j].clone()).collect();
    let p = keep.len();
    let mut g = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for i in 0..ds.n_rows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = m.row(i).transpose();
        g.ger(w[i], &row, &row, 1.0);
        b.axpy(w[i] * ds.y[i], &row, 1.0);
    }
    let l = linalg::cholesky(&g, &names)?;
    let coef = linalg::chol_solve(&l, &b);
    let n_eff = w.iter().filter(|&&v| v > 0.0).count();
    if n_eff <= p {
        return Err(EstimateError::Linalg(LinalgError::Dimension(format!(
            "{n_eff} weighted rows cannot support {p} columns"
        ))));
    }
    let fitted = &m * &coef;
    let wrss: f64 = (0..ds.n_rows()).map(|i| w[i] * (ds.y[i] - fitted[i]).powi(2)).sum();
    let sigma2 = wrss / (n_eff - p) as f64;
    let t = keep
        .iter()
        .position(|&j| j == 1)
        .ok_or_else(|| EstimateError::Precondition("treatment indicator has no variation".into()))?;
    let ginv = linalg::chol_inverse(&l);
    Ok(AteResult::new(Method::Bpp, coef[t], (sigma2 * ginv[(t, t)]).sqrt()))
}

/// Power-prior baseline in its weighted least-squares form: external rows
/// are down-weighted by their estimated probability of trial inclusion.
pub fn bpp_estimate(ds: &Dataset, inclusion_basis: &BasisSpec) -> Result<AteResult, EstimateError> {
    if ds.n_re() == 0 || ds.n_ec() == 0 {
        return Err(EstimateError::Precondition("both randomized and external rows are required".into()));
    }
    let pb = power_basis(&ds.x, inclusion_basis);
    let mut x = DMatrix::from_element(ds.n_rows(), pb.ncols() + 1, 1.0);
    x.columns_mut(1, pb.ncols()).copy_from(&pb);
    let prob = logistic_fit(&x, &ds.s)?;
    let ec = ds.rows_where(|_, s| s == 0);
    let mut clipped = false;
    let weights: Vec<f64> = ec
        .iter()
        .map(|&i| {
            let p = prob[i];
            let c = p.clamp(WEIGHT_CLIP, 1.0 - WEIGHT_CLIP);
            clipped |= c != p;
            c
        })
        .collect();
    let mut ate = bpp_weighted(ds, inclusion_basis, &weights)?;
    ate.notes.push("se from weighted least squares".into());
    if clipped {
        ate.notes.push("inclusion probabilities clipped".into());
    }
    Ok(ate)
}
