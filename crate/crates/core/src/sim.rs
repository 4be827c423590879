//! Data generators for the two simulation designs and the Monte Carlo driver.
//!
//! Every replicate draws from its own `ChaCha20Rng` seeded with
//! `base_seed ^ r`, so results do not depend on scheduling.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ColumnGroup};
use crate::data::Dataset;
use crate::error::{EstimateError, SimError};
use crate::estimators::{bpp_estimate, integrate, mba_estimate, re_pipeline, AteResult, Method, Pipeline};
use crate::matching::MatchSpec;
use crate::solver::PenaltyConfig;
use crate::tuning::CVPlan;

pub const STUDY1_DIM: usize = 50;
pub const TAU: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study1Spec {
    pub n: usize,
    pub m: usize,
    /// Ratio `‖δ₀‖₁ / ‖β₀‖₁`.
    pub c: f64,
    pub zero_fraction_delta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Study1Data {
    pub ds: Dataset,
    pub beta0: Vec<f64>,
    pub delta0: Vec<f64>,
}

pub fn study1_beta0() -> Vec<f64> {
    (1..=STUDY1_DIM).map(|j| j as f64 / STUDY1_DIM as f64).collect()
}

/// Number of exactly-zero entries of `δ₀` for a zero fraction.
pub fn study1_zero_count(zero_fraction: f64) -> usize {
    let raw = STUDY1_DIM as f64 * zero_fraction.clamp(0.0, 1.0);
    let near = raw.round();
    if (raw - near).abs() < 1e-9 {
        near as usize
    } else {
        raw.ceil() as usize
    }
}

/// `δ₀`: the first `50 − z` entries are proportional to `1, 2, …`, the last
/// `z` are zero, and `‖δ₀‖₁ = c ‖β₀‖₁`.
pub fn study1_delta0(c: f64, zero_fraction: f64) -> Vec<f64> {
    let zeros = study1_zero_count(zero_fraction);
    let k = STUDY1_DIM - zeros;
    let target = c * study1_beta0().iter().sum::<f64>();
    let raw_sum = (k * (k + 1) / 2) as f64;
    (0..STUDY1_DIM)
        .map(|j| if j < k { (j + 1) as f64 * target / raw_sum } else { 0.0 })
        .collect()
}

pub fn gen_study1(spec: &Study1Spec) -> Study1Data {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let r3 = 3f64.sqrt();
    let unif = Uniform::new(1.0 - r3, 1.0 + r3).expect("valid range");
    let beta0 = study1_beta0();
    let delta0 = study1_delta0(spec.c, spec.zero_fraction_delta);
    let total = spec.n + spec.m;
    let mut x = DMatrix::zeros(total, STUDY1_DIM);
    let mut y = Vec::with_capacity(total);
    for i in 0..total {
        let mut mean = 0.0;
        for j in 0..STUDY1_DIM {
            let v = unif.sample(&mut rng);
            x[(i, j)] = v;
            mean += v * beta0[j];
            if i >= spec.n {
                mean += v * delta0[j];
            }
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        y.push(mean + e);
    }
    let s = (0..total).map(|i| u8::from(i < spec.n)).collect();
    let names = (1..=STUDY1_DIM).map(|j| format!("x{j}")).collect();
    let ds = Dataset::new(x, vec![0; total], y, s, names).expect("generated data are valid");
    Study1Data { ds, beta0, delta0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    S1,
    S2,
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            other => Err(format!("unknown setting `{other}` (expected S1 or S2)")),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study2Spec {
    pub setting: Setting,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

/// Bias of the external controls in both settings.
pub fn study2_bias(x1: f64, x2: f64) -> f64 {
    10.0 * x1 * x1 + 4.0 * x2.powi(3)
}

/// Noise-free outcome.
pub fn study2_mean(setting: Setting, x1: f64, x2: f64, a: u8, s: u8) -> f64 {
    let base = match setting {
        Setting::S1 => -1.5 * x1 * x1 - 1.5 * x2,
        Setting::S2 => -1.5 * x1 * x1 - 1.5 * x2.exp(),
    };
    base + TAU * a as f64 + (1 - s) as f64 * study2_bias(x1, x2)
}

/// Returns the dataset; the true effect is [`TAU`].
pub fn gen_study2(spec: &Study2Spec) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let unif = Uniform::new(-1.5, 1.5).expect("valid range");
    let total = spec.n + spec.m;
    let mut x = DMatrix::zeros(total, 2);
    let mut a = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let s: Vec<u8> = (0..total).map(|i| u8::from(i < spec.n)).collect();
    for i in 0..total {
        let x1 = unif.sample(&mut rng);
        let x2 = unif.sample(&mut rng);
        let ai = if s[i] == 1 { u8::from(rng.random_bool(0.5)) } else { 0 };
        let e: f64 = StandardNormal.sample(&mut rng);
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        a.push(ai);
        y.push(study2_mean(spec.setting, x1, x2, ai, s[i]) + e);
    }
    Dataset::new(x, a, y, s, vec!["x1".into(), "x2".into()]).expect("generated data are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    Study1(Study1Spec),
    Study2(Study2Spec),
}

impl Scenario {
    fn with_seed(&self, seed: u64) -> Scenario {
        match self {
            Scenario::Study1(s) => Scenario::Study1(Study1Spec { seed, ..s.clone() }),
            Scenario::Study2(s) => Scenario::Study2(Study2Spec { seed, ..s.clone() }),
        }
    }
}

/// Estimator settings shared by all replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub mu_spec: BasisSpec,
    pub b_spec: BasisSpec,
    pub plan: CVPlan,
    pub penalty: PenaltyConfig,
    pub match_spec: MatchSpec,
    pub inclusion_basis: BasisSpec,
}

impl MethodConfig {
    /// Linear terms without interactions, one per covariate.
    pub fn study1() -> Self {
        MethodConfig {
            mu_spec: BasisSpec::linear(),
            b_spec: BasisSpec::linear(),
            plan: CVPlan::default(),
            penalty: PenaltyConfig::default(),
            match_spec: MatchSpec::default(),
            inclusion_basis: BasisSpec::total_degree(3),
        }
    }

    /// Cubic power series with cross terms for every function.
    pub fn study2() -> Self {
        MethodConfig {
            mu_spec: BasisSpec::total_degree(3),
            b_spec: BasisSpec::total_degree(3),
            ..MethodConfig::study1()
        }
    }
}

/// Per-replicate, per-method summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub tau_hat: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub mse_beta: Option<f64>,
    pub over_select: Option<bool>,
    pub under_select: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCMetrics {
    pub method: Method,
    /// Replicates that contributed.
    #[serde(rename = "T")]
    pub t: usize,
    pub failed: usize,
    /// More than 10% of replicates failed.
    pub invalid: bool,
    pub abs_bias: Option<f64>,
    pub true_var: Option<f64>,
    pub mse_tau: Option<f64>,
    pub mean_est_var: Option<f64>,
    pub coverage: Option<f64>,
    pub mse_beta: Option<f64>,
    pub pct_over_select: Option<f64>,
    pub pct_under_select: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn frac(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Aggregates one method's replicates. Entries are ordered by replicate
/// index first, so the result does not depend on input order.
pub fn aggregate(method: Method, tau: f64, mut reps: Vec<(usize, Option<Replicate>)>) -> MCMetrics {
    reps.sort_by_key(|(i, _)| *i);
    let total = reps.len();
    let ok: Vec<Replicate> = reps.into_iter().filter_map(|(_, r)| r).collect();
    let t = ok.len();
    let failed = total - t;
    let collect_f = |f: fn(&Replicate) -> Option<f64>| -> Option<Vec<f64>> {
        let v: Vec<f64> = ok.iter().filter_map(f).collect();
        (t > 0 && v.len() == t).then_some(v)
    };
    let collect_b = |f: fn(&Replicate) -> Option<bool>| -> Option<Vec<bool>> {
        let v: Vec<bool> = ok.iter().filter_map(f).collect();
        (t > 0 && v.len() == t).then_some(v)
    };
    let taus = collect_f(|r| r.tau_hat).filter(|v| v.len() >= 2);
    let (abs_bias, true_var, mse_tau) = match &taus {
        Some(v) => {
            let m = mean(v);
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            let mse = mean(&v.iter().map(|x| (x - tau).powi(2)).collect::<Vec<_>>());
            (Some((m - tau).abs()), Some(var), Some(mse))
        }
        None => (None, None, None),
    };
    MCMetrics {
        method,
        t,
        failed,
        invalid: failed * 10 > total,
        abs_bias,
        true_var,
        mse_tau,
        mean_est_var: collect_f(|r| r.se.map(|s| s * s)).map(|v| mean(&v)),
        coverage: collect_b(|r| r.covered).map(|v| frac(&v)),
        mse_beta: collect_f(|r| r.mse_beta).map(|v| mean(&v)),
        pct_over_select: collect_b(|r| r.over_select).map(|v| frac(&v)),
        pct_under_select: collect_b(|r| r.under_select).map(|v| frac(&v)),
    }
}

fn ate_replicate(r: &AteResult) -> Replicate {
    Replicate {
        tau_hat: Some(r.tau_hat),
        se: Some(r.se),
        covered: Some(r.covers(TAU)),
        mse_beta: None,
        over_select: None,
        under_select: None,
    }
}

/// Coefficient recovery summary of a Study 1 fit.
pub fn study1_replicate(p: &Pipeline, beta0: &[f64], delta0: &[f64]) -> Replicate {
    let mu = p.design.columns_in(ColumnGroup::MuBasis);
    let bias = p.design.columns_in(ColumnGroup::BiasBasis);
    let sq: f64 = mu.iter().zip(beta0).map(|(&j, b)| (p.refit.theta[j] - b).powi(2)).sum();
    let mut over = false;
    let mut under = false;
    for (cols, truth) in [(&mu, beta0), (&bias, delta0)] {
        for (&j, &t) in cols.iter().zip(truth) {
            let sel = p.fit.theta[j] != 0.0;
            over |= sel && t == 0.0;
            under |= !sel && t != 0.0;
        }
    }
    Replicate {
        tau_hat: None,
        se: None,
        covered: None,
        mse_beta: Some((sq / beta0.len() as f64).sqrt()),
        over_select: Some(over),
        under_select: Some(under),
    }
}

fn run_method(method: Method, scenario: &Scenario, cfg: &MethodConfig, seed: u64) -> Result<Replicate, EstimateError> {
    let plan = CVPlan { seed, ..cfg.plan.clone() };
    match scenario.with_seed(seed) {
        Scenario::Study1(spec) => {
            let data = gen_study1(&spec);
            let p = match method {
                Method::Dpie => integrate(&data.ds, &cfg.mu_spec, &cfg.b_spec, &plan, &cfg.penalty, false)?,
                Method::Spie => integrate(&data.ds, &cfg.mu_spec, &cfg.b_spec, &plan, &cfg.penalty, true)?,
                Method::Re => re_pipeline(&data.ds, &cfg.mu_spec, &plan, &cfg.penalty)?,
                other => return Err(EstimateError::Precondition(format!("{other} needs a treatment"))),
            };
            if !p.fit.converged {
                return Err(EstimateError::Precondition("solver did not converge".into()));
            }
            Ok(study1_replicate(&p, &data.beta0, &data.delta0))
        }
        Scenario::Study2(spec) => {
            let ds = gen_study2(&spec);
            let r = match method {
                Method::Dpie | Method::Spie => {
                    integrate(&ds, &cfg.mu_spec, &cfg.b_spec, &plan, &cfg.penalty, method == Method::Spie)?.ate()?
                }
                Method::Re => re_pipeline(&ds, &cfg.mu_spec, &plan, &cfg.penalty)?.ate()?,
                Method::Mba => mba_estimate(&ds, &cfg.match_spec)?,
                Method::Bpp => bpp_estimate(&ds, &cfg.inclusion_basis)?,
            };
            if !r.converged {
                return Err(EstimateError::Precondition("solver did not converge".into()));
            }
            Ok(ate_replicate(&r))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRun {
    pub scenario: Scenario,
    pub replicates: usize,
    pub base_seed: u64,
    pub metrics: Vec<MCMetrics>,
}

/// Runs `t` replicates of every method. Replicates run in parallel on the
/// current rayon pool; failures are counted and excluded.
pub fn run_monte_carlo(
    scenario: &Scenario,
    methods: &[Method],
    t: usize,
    base_seed: u64,
    cfg: &MethodConfig,
) -> Result<MonteCarloRun, SimError> {
    if t < 2 {
        return Err(SimError::TooFewReplicates(t));
    }
    if methods.is_empty() {
        return Err(SimError::NoMethods);
    }
    if let Scenario::Study1(_) = scenario {
        if let Some(m) = methods.iter().find(|m| matches!(m, Method::Mba | Method::Bpp)) {
            return Err(SimError::Report(format!("{m} is not defined for study 1 (no treatment)")));
        }
    }
    let per_rep: Vec<Vec<Option<Replicate>>> = (0..t)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed ^ r as u64;
            methods.iter().map(|&m| run_method(m, scenario, cfg, seed).ok()).collect()
        })
        .collect();
    let metrics = methods
        .iter()
        .enumerate()
        .map(|(k, &m)| aggregate(m, TAU, per_rep.iter().enumerate().map(|(r, v)| (r, v[k].clone())).collect()))
        .collect();
    Ok(MonteCarloRun {
        scenario: scenario.clone(),
        replicates: t,
        base_seed,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study1_marginals() {
        let d = gen_study1(&Study1Spec {
            n: 1000,
            m: 1000,
            c: 1.0,
            zero_fraction_delta: 0.5,
            seed: 3,
        });
        let n = d.ds.n_rows() as f64;
        for j in 0..STUDY1_DIM {
            let col = d.ds.x.column(j);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((m - 1.0).abs() < 0.1);
            assert!((v - 1.0).abs() < 0.15);
        }
        assert_eq!(d.ds.n_re(), 1000);
        assert!(d.ds.a.iter().all(|&a| a == 0));
    }

    #[test]
    fn delta_norm_matches_ratio() {
        let b1: f64 = study1_beta0().iter().sum();
        assert!((b1 - 25.5).abs() < 1e-12);
        let d = study1_delta0(1.0, 0.5);
        assert!((d.iter().map(|v| v.abs()).sum::<f64>() - 25.5).abs() < 1e-12);
        for c in [0.1, 0.3, 1.0, 3.0, 5.0, 7.0, 9.0] {
            for z in (2..=47).step_by(3) {
                let d = study1_delta0(c, z as f64 / 50.0);
                let norm: f64 = d.iter().map(|v| v.abs()).sum();
                assert!((norm - c * 25.5).abs() <= 1e-12 * c * 25.5);
                assert_eq!(d.iter().filter(|&&v| v == 0.0).count(), z);
                assert!(d[STUDY1_DIM - 1] == 0.0);
            }
        }
    }

    #[test]
    fn zero_count_rounding() {
        assert_eq!(study1_zero_count(0.5), 25);
        assert_eq!(study1_zero_count(0.1), 5);
        assert_eq!(study1_zero_count(0.51), 26);
        assert_eq!(study1_zero_count(0.0), 0);
    }

    #[test]
    fn study2_hand_values() {
        assert_eq!(study2_mean(Setting::S1, 0.0, 0.0, 0, 0), 0.0);
        assert_eq!(study2_mean(Setting::S1, 1.0, 1.0, 1, 1), -1.0);
        assert_eq!(study2_mean(Setting::S2, 1.0, 0.0, 0, 0), 7.0);
    }

    #[test]
    fn study2_shapes_and_determinism() {
        let spec = Study2Spec {
            setting: Setting::S2,
            n: 300,
            m: 200,
            seed: 9,
        };
        let a = gen_study2(&spec);
        assert_eq!(a, gen_study2(&spec));
        assert_eq!((a.n_re(), a.n_ec()), (300, 200));
        assert!(a.rows_where(|_, s| s == 0).iter().all(|&i| a.a[i] == 0));
        let treated = a.a.iter().filter(|&&v| v == 1).count();
        assert!((100..200).contains(&treated));
        assert!(a.x.iter().all(|v| (-1.5..1.5).contains(v)));
    }

    fn rep(tau: f64) -> Replicate {
        Replicate {
            tau_hat: Some(tau),
            se: Some(0.1),
            covered: Some((tau - TAU).abs() < 0.196),
            mse_beta: None,
            over_select: None,
            under_select: None,
        }
    }

    #[test]
    fn constant_estimator_metrics() {
        let m = aggregate(Method::Dpie, TAU, vec![(0, Some(rep(TAU))), (1, Some(rep(TAU)))]);
        assert_eq!(m.abs_bias, Some(0.0));
        assert_eq!(m.true_var, Some(0.0));
        assert_eq!(m.coverage, Some(1.0));
        assert_eq!(m.t, 2);
    }

    #[test]
    fn mse_identity_and_order_invariance() {
        let vals = [1.8, 2.3, 2.05, 1.6, 2.9, 2.2, 1.95];
        let reps: Vec<(usize, Option<Replicate>)> = vals.iter().enumerate().map(|(i, &v)| (i, Some(rep(v)))).collect();
        let m = aggregate(Method::Re, TAU, reps.clone());
        let t = vals.len() as f64;
        let lhs = m.mse_tau.unwrap();
        let rhs = m.true_var.unwrap() * (t - 1.0) / t + m.abs_bias.unwrap().powi(2);
        assert!((lhs - rhs).abs() < 1e-12);
        let mut shuffled = reps;
        shuffled.reverse();
        shuffled.swap(1, 4);
        assert_eq!(aggregate(Method::Re, TAU, shuffled), m);
    }

    #[test]
    fn failures_counted_and_flagged() {
        let mut reps: Vec<(usize, Option<Replicate>)> = (0..10).map(|i| (i, Some(rep(2.0 + i as f64 * 0.01)))).collect();
        reps[3].1 = None;
        let m = aggregate(Method::Dpie, TAU, reps.clone());
        assert_eq!((m.t, m.failed, m.invalid), (9, 1, false));
        reps[5].1 = None;
        let m = aggregate(Method::Dpie, TAU, reps);
        assert!(m.invalid);
    }

    #[test]
    fn too_few_replicates_rejected() {
        let sc = Scenario::Study2(Study2Spec {
            setting: Setting::S1,
            n: 50,
            m: 50,
            seed: 0,
        });
        assert!(matches!(
            run_monte_carlo(&sc, &[Method::Re], 1, 0, &MethodConfig::study2()),
            Err(SimError::TooFewReplicates(1))
        ));
        assert!(matches!(run_monte_carlo(&sc, &[], 5, 0, &MethodConfig::study2()), Err(SimError::NoMethods)));
    }

    #[test]
    fn small_monte_carlo_runs() {
        let sc = Scenario::Study2(Study2Spec {
            setting: Setting::S1,
            n: 200,
            m: 200,
            seed: 0,
        });
        let cfg = MethodConfig {
            plan: CVPlan {
                folds: 3,
                sc_grid: vec![0.1, 1.0, 10.0],
                n_lambda: 6,
                lambda_min_ratio: 1e-2,
                seed: 0,
            },
            ..MethodConfig::study2()
        };
        let run = run_monte_carlo(&sc, &[Method::Dpie, Method::Re, Method::Mba, Method::Bpp], 3, 11, &cfg).unwrap();
        assert_eq!(run.metrics.len(), 4);
        for m in &run.metrics {
            assert_eq!(m.t + m.failed, 3);
        }
        assert_eq!(run, run_monte_carlo(&sc, &[Method::Dpie, Method::Re, Method::Mba, Method::Bpp], 3, 11, &cfg).unwrap());
    }

    #[test]
    fn oracle_selection_has_no_errors() {
        let beta0 = study1_beta0();
        let delta0 = study1_delta0(3.0, 0.5);
        let data = gen_study1(&Study1Spec {
            n: 300,
            m: 300,
            c: 3.0,
            zero_fraction_delta: 0.5,
            seed: 1,
        });
        let d = crate::basis::assemble_design(&data.ds, &BasisSpec::linear(), &BasisSpec::linear());
        let mut theta = vec![0.0; d.n_cols()];
        theta[2..52].copy_from_slice(&beta0);
        theta[52..102].copy_from_slice(&delta0);
        let fit = crate::solver::FitResult {
            theta: theta.clone(),
            active_beta: vec![],
            active_delta: vec![],
            objective_trace: vec![0.0],
            converged: true,
            n_sweeps: 0,
        };
        let active: Vec<usize> = (0..d.n_cols()).filter(|&j| j == 0 || theta[j] != 0.0).collect();
        let refit = crate::solver::refit_ols(&d, &data.ds.y, &active).unwrap();
        let p = Pipeline {
            method: Method::Dpie,
            design: d,
            cv: crate::tuning::CVResult {
                best_lambda1: 0.0,
                best_lambda2: 0.0,
                best_sc: 1.0,
                cv_table: vec![],
                folds_used: crate::tuning::Folds { k: 2, assignment: vec![] },
            },
            fit,
            refit,
            notes: vec![],
        };
        let r = study1_replicate(&p, &beta0, &delta0);
        assert_eq!(r.over_select, Some(false));
        assert_eq!(r.under_select, Some(false));
    }
}
