//! Command-line front end: configuration layering and the four commands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisScheme, BasisSpec};
use crate::data::{self, Dataset};
use crate::error::{DataError, Error};
use crate::estimators::{self, AteResult, Method};
use crate::io::write_atomic;
use crate::matching::{match_external_controls, Distance, MatchSpec};
use crate::report::{emit_report, Report, ReportFormat, ReportRow, SCHEMA_VERSION};
use crate::sim::{self, MethodConfig, Scenario, Setting, Study1Spec, Study2Spec, STUDY1_DIM};
use crate::solver::PenaltyConfig;
use crate::tuning::CVPlan;

pub const DEFAULT_SEED: u64 = 1;
pub const SEED_ENV: &str = "DPIE_SEED";

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Compute(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Compute(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Study 1 sweep presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// c in {1,3,5,7,9}, half of the bias coefficients zero.
    A,
    /// c in {0.1,0.3,0.5,0.7,0.9}, half of the bias coefficients zero.
    B,
    /// c = 1, zero count 2, 5, ..., 47.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivideBy {
    pub factor: f64,
    pub columns: Vec<String>,
}

/// Every setting a command can read. A JSON config file deserializes into
/// this directly; absent fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub external: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub study: String,
    /// `None` means the per-command default set.
    pub methods: Option<Vec<Method>>,
    /// `None` means the per-command default degree.
    pub basis_q: Option<u32>,
    pub basis_scheme: BasisScheme,
    pub sc_grid: Vec<f64>,
    pub n_lambda: usize,
    pub folds: usize,
    pub lambda_min_ratio: f64,
    pub scad_a: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub scale01: bool,
    pub interactions: bool,
    pub squares: bool,
    pub divide_by: Option<DivideBy>,
    pub reference_value: Option<f64>,
    pub n: usize,
    pub m: usize,
    pub case: Option<Case>,
    pub c: Option<Vec<f64>>,
    pub zero_fraction: Option<Vec<f64>>,
    pub settings: Vec<Setting>,
    pub ratio: usize,
    pub distance: Distance,
    pub with_replacement: bool,
    pub formats: Vec<ReportFormat>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = CVPlan::default();
        RunConfig {
            input: None,
            external: None,
            pool: None,
            output_dir: PathBuf::from("."),
            outcome: "y".into(),
            treatment: "a".into(),
            study: "s".into(),
            methods: None,
            basis_q: None,
            basis_scheme: BasisScheme::TotalDegree,
            sc_grid: plan.sc_grid,
            n_lambda: plan.n_lambda,
            folds: plan.folds,
            lambda_min_ratio: plan.lambda_min_ratio,
            scad_a: crate::penalty::DEFAULT_A,
            t: 100,
            seed: None,
            jobs: None,
            scale01: false,
            interactions: false,
            squares: false,
            divide_by: None,
            reference_value: None,
            n: 1000,
            m: 1000,
            case: None,
            c: None,
            zero_fraction: None,
            settings: vec![Setting::S1, Setting::S2],
            ratio: 2,
            distance: Distance::Mahalanobis,
            with_replacement: false,
            formats: vec![ReportFormat::Csv, ReportFormat::Json, ReportFormat::Plotdata],
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<RunConfig, CliError> {
        let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
    }

    /// `--seed`/config seed, else `DPIE_SEED`, else the built-in default.
    pub fn resolved_seed(&self) -> Result<u64, CliError> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    pub fn basis(&self, default_q: u32) -> Result<BasisSpec, CliError> {
        let q = self.basis_q.unwrap_or(default_q);
        if q == 0 {
            return Err(usage("--basis-q must be at least 1"));
        }
        Ok(match self.basis_scheme {
            BasisScheme::TotalDegree => BasisSpec::total_degree(q),
            BasisScheme::TensorProduct => BasisSpec::tensor_product(q),
        })
    }

    pub fn plan(&self, seed: u64) -> Result<CVPlan, CliError> {
        let plan = CVPlan {
            folds: self.folds,
            sc_grid: self.sc_grid.clone(),
            n_lambda: self.n_lambda,
            lambda_min_ratio: self.lambda_min_ratio,
            seed,
        };
        plan.validate().map_err(|e| usage(e.to_string()))?;
        Ok(plan)
    }

    pub fn penalty(&self) -> Result<PenaltyConfig, CliError> {
        let cfg = PenaltyConfig {
            a: self.scad_a,
            ..PenaltyConfig::default()
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn match_spec(&self) -> Result<MatchSpec, CliError> {
        MatchSpec::new(self.ratio, self.distance, self.with_replacement).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "dpie", version, about = "Treatment-effect estimation combining randomized and external controls")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the treatment effect on a CSV dataset.
    Fit(FitArgs),
    /// Run a Monte Carlo study and write reports.
    Simulate(SimulateArgs),
    /// Build an external-control file by matching concurrent controls to a pool.
    Match(MatchArgs),
    /// Re-render a JSON report as CSV or plot series.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config file; command-line flags take precedence over it
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for output files [default: .]
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Random seed [default: $DPIE_SEED, else 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: number of cores]
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Comma-separated methods: dpie, spie, re, mba, bpp [default: per command]
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Maximum power of the sieve basis [default: 1 for fit and study1, 3 for study2]
    #[arg(long)]
    pub basis_q: Option<u32>,
    /// Basis scheme: total_degree or tensor_product [default: total_degree]
    #[arg(long)]
    pub basis_scheme: Option<BasisScheme>,
    /// Comma-separated candidate ratios lambda2/lambda1 [default: 13 log-spaced points in 0.01..100]
    #[arg(long, value_delimiter = ',')]
    pub sc_grid: Option<Vec<f64>>,
    /// Lambda values per path [default: 50]
    #[arg(long)]
    pub n_lambda: Option<usize>,
    /// Smallest lambda as a fraction of the largest [default: 0.001]
    #[arg(long)]
    pub lambda_min_ratio: Option<f64>,
    /// Cross-validation folds [default: 10]
    #[arg(long)]
    pub folds: Option<usize>,
    /// SCAD shape parameter [default: 3.7]
    #[arg(long)]
    pub scad_a: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct PrepArgs {
    /// Outcome column [default: y]
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment indicator column [default: a]
    #[arg(long)]
    pub treatment: Option<String>,
    /// Study indicator column, 1 for randomized rows [default: s]
    #[arg(long)]
    pub study: Option<String>,
    /// Scale every covariate to [0, 1] [default: off]
    #[arg(long)]
    pub scale01: bool,
    /// Append pairwise covariate products [default: off]
    #[arg(long)]
    pub interactions: bool,
    /// With --interactions, also append squares [default: off]
    #[arg(long)]
    pub squares: bool,
    /// Divide the listed comma-separated columns by FACTOR [default: none]
    #[arg(long, num_args = 2, value_names = ["FACTOR", "COLS"])]
    pub divide_by: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV with randomized rows and optionally external controls
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Extra CSV of external controls appended to the input [default: none]
    #[arg(long, value_name = "FILE")]
    pub external: Option<PathBuf>,
    /// Benchmark value; the summary reports |Est - value| as bias [default: none]
    #[arg(long)]
    pub reference_value: Option<f64>,
    /// Controls per unit for the matching baseline [default: 2]
    #[arg(long)]
    pub ratio: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Study1,
    Study2,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Which simulation study to run
    #[arg(value_enum)]
    pub study: Study,
    /// Monte Carlo replicates per sweep point [default: 100]
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Randomized sample size [default: 1000]
    #[arg(long)]
    pub n: Option<usize>,
    /// External-control sample size [default: 1000]
    #[arg(long)]
    pub m: Option<usize>,
    /// Study 1 sweep preset [default: a]
    #[arg(long, value_enum)]
    pub case: Option<Case>,
    /// Study 1: comma-separated magnitude ratios, overrides the preset
    #[arg(long, value_delimiter = ',')]
    pub c: Option<Vec<f64>>,
    /// Study 1: comma-separated fractions of zero bias coefficients, overrides the preset
    #[arg(long, value_delimiter = ',')]
    pub zero_fraction: Option<Vec<f64>>,
    /// Study 2: comma-separated settings [default: S1,S2]
    #[arg(long = "setting", value_delimiter = ',')]
    pub settings: Option<Vec<Setting>>,
    /// Comma-separated report formats: csv, json, plotdata [default: all]
    #[arg(long = "format", value_delimiter = ',')]
    pub formats: Option<Vec<ReportFormat>>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Trial CSV; its concurrent controls are matched
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Pool CSV of candidate external controls
    #[arg(long, value_name = "FILE")]
    pub pool: Option<PathBuf>,
    /// Pool rows matched per concurrent control [default: 2]
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Distance: mahalanobis or euclidean [default: mahalanobis]
    #[arg(long)]
    pub distance: Option<Distance>,
    /// Allow a pool row to be used more than once [default: off]
    #[arg(long)]
    pub with_replacement: bool,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report written by `simulate`
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Comma-separated output formats: csv, json, plotdata [default: csv,plotdata]
    #[arg(long = "format", value_delimiter = ',')]
    pub formats: Option<Vec<ReportFormat>>,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.output_dir, common.output_dir.clone());
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if m.methods.is_some() {
        cfg.methods = m.methods.clone();
    }
    if m.basis_q.is_some() {
        cfg.basis_q = m.basis_q;
    }
    set(&mut cfg.basis_scheme, m.basis_scheme);
    set(&mut cfg.sc_grid, m.sc_grid.clone());
    set(&mut cfg.n_lambda, m.n_lambda);
    set(&mut cfg.lambda_min_ratio, m.lambda_min_ratio);
    set(&mut cfg.folds, m.folds);
    set(&mut cfg.scad_a, m.scad_a);
}

fn apply_prep(cfg: &mut RunConfig, p: &PrepArgs) -> Result<(), CliError> {
    set(&mut cfg.outcome, p.outcome.clone());
    set(&mut cfg.treatment, p.treatment.clone());
    set(&mut cfg.study, p.study.clone());
    cfg.scale01 |= p.scale01;
    cfg.interactions |= p.interactions;
    cfg.squares |= p.squares;
    if let Some(v) = &p.divide_by {
        let factor: f64 = v[0]
            .parse()
            .map_err(|_| usage(format!("--divide-by FACTOR must be a number, got `{}`", v[0])))?;
        let columns: Vec<String> = v[1].split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        cfg.divide_by = Some(DivideBy { factor, columns });
    }
    if let Some(d) = &cfg.divide_by {
        if !(d.factor.is_finite() && d.factor != 0.0) {
            return Err(usage("--divide-by FACTOR must be finite and nonzero"));
        }
    }
    Ok(())
}

/// Resolves the effective configuration of a parsed command line.
pub fn resolve(cmd: &Command) -> Result<RunConfig, CliError> {
    match cmd {
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_model(&mut cfg, &a.model);
            apply_prep(&mut cfg, &a.prep)?;
            if a.input.is_some() {
                cfg.input = a.input.clone();
            }
            if a.external.is_some() {
                cfg.external = a.external.clone();
            }
            if a.reference_value.is_some() {
                cfg.reference_value = a.reference_value;
            }
            set(&mut cfg.ratio, a.ratio);
            Ok(cfg)
        }
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_model(&mut cfg, &a.model);
            set(&mut cfg.t, a.t);
            set(&mut cfg.n, a.n);
            set(&mut cfg.m, a.m);
            if a.case.is_some() {
                cfg.case = a.case;
            }
            if a.c.is_some() {
                cfg.c = a.c.clone();
            }
            if a.zero_fraction.is_some() {
                cfg.zero_fraction = a.zero_fraction.clone();
            }
            set(&mut cfg.settings, a.settings.clone());
            set(&mut cfg.formats, a.formats.clone());
            Ok(cfg)
        }
        Command::Match(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_prep(&mut cfg, &a.prep)?;
            if a.input.is_some() {
                cfg.input = a.input.clone();
            }
            if a.pool.is_some() {
                cfg.pool = a.pool.clone();
            }
            set(&mut cfg.ratio, a.ratio);
            set(&mut cfg.distance, a.distance);
            cfg.with_replacement |= a.with_replacement;
            Ok(cfg)
        }
        Command::Report(a) => {
            let mut cfg = base_config(&a.common)?;
            if a.input.is_some() {
                cfg.input = a.input.clone();
            }
            cfg.formats = a
                .formats
                .clone()
                .unwrap_or_else(|| vec![ReportFormat::Csv, ReportFormat::Plotdata]);
            Ok(cfg)
        }
    }
}

fn install_pool(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(j) = jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::from(DataError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|source| {
        CliError::from(DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = p.as_deref().ok_or_else(|| usage(format!("{flag} is required")))?;
    if !p.is_file() {
        return Err(usage(format!("{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

/// Reads a CSV of external controls whose treatment and study columns may
/// be missing; missing indicators are filled with 0.
fn load_external(path: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let mut table = data::read_numeric_csv(path)?;
    for name in [&cfg.treatment, &cfg.study] {
        if table.column_index(name).is_err() {
            table.headers.push(name.clone());
            table.rows.iter_mut().for_each(|r| r.push(0.0));
        }
    }
    Ok(data::dataset_from_table(&table, &cfg.outcome, &cfg.treatment, &cfg.study)?)
}

fn preprocess(mut ds: Dataset, cfg: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(d) = &cfg.divide_by {
        ds.divide_columns(d.factor, &d.columns, &cfg.outcome)?;
    }
    if cfg.scale01 {
        ds = data::scale_unit_interval(&ds)?;
    }
    if cfg.interactions {
        ds = data::pairwise_interactions(&ds, cfg.squares)?;
    }
    Ok(ds)
}

/// Text summary with one row per method.
pub fn summary_table(results: &[AteResult], reference: Option<f64>) -> String {
    let mut out = format!(
        "{:<6} {:>12} {:>12} {:>12} {:>6} {:>6}\n",
        "Method", "Est", "se", "bias", "#v_mu", "#v_b"
    );
    for r in results {
        let bias = reference.map(|v| format!("{:.4}", (r.tau_hat - v).abs())).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<6} {:>12.4} {:>12.4} {:>12} {:>6} {:>6}\n",
            r.method.name(),
            r.tau_hat,
            r.se,
            bias,
            r.n_selected_mu,
            r.n_selected_bias
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    schema_version: u32,
    n_randomized: usize,
    n_external: usize,
    covariates: &'a [String],
    dropped_columns: &'a [String],
    reference_value: Option<f64>,
    results: &'a [AteResult],
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String, CliError> {
    let input = required(&cfg.input, "--input")?;
    let seed = cfg.resolved_seed()?;
    let plan = cfg.plan(seed)?;
    let pen = cfg.penalty()?;
    let basis = cfg.basis(1)?;
    let methods = cfg.methods.clone().unwrap_or_else(|| vec![Method::Dpie, Method::Spie, Method::Re]);
    if methods.is_empty() {
        return Err(usage("--method needs at least one method"));
    }
    let mut ds = data::load_csv(input, &cfg.outcome, &cfg.treatment, &cfg.study)?;
    if cfg.external.is_some() {
        let ext = required(&cfg.external, "--external")?;
        let ec = load_external(ext, cfg)?;
        let ec = align_columns(&ec, &ds.column_names)?;
        ds = ds.concat(&ec)?;
    }
    let ds = preprocess(ds, cfg)?;
    let match_spec = cfg.match_spec()?;
    let mut results = Vec::with_capacity(methods.len());
    for &m in &methods {
        let r = match m {
            Method::Dpie => estimators::dpie(&ds, &basis, &basis, &plan, &pen),
            Method::Spie => estimators::spie(&ds, &basis, &basis, &plan, &pen),
            Method::Re => estimators::re_only(&ds, &basis, &plan, &pen),
            Method::Mba => estimators::mba_estimate(&ds, &match_spec),
            Method::Bpp => estimators::bpp_estimate(&ds, &basis),
        };
        results.push(r.map_err(Error::from)?);
    }
    ensure_dir(&cfg.output_dir)?;
    let out = FitOutput {
        schema_version: SCHEMA_VERSION,
        n_randomized: ds.n_re(),
        n_external: ds.n_ec(),
        covariates: &ds.column_names,
        dropped_columns: &ds.dropped_columns,
        reference_value: cfg.reference_value,
        results: &results,
    };
    let mut json = serde_json::to_vec_pretty(&out).expect("fit output serializes");
    json.push(b'\n');
    write_file(&cfg.output_dir.join("ate.json"), &json)?;
    let table = summary_table(&results, cfg.reference_value);
    write_file(&cfg.output_dir.join("summary.txt"), table.as_bytes())?;
    Ok(table)
}

/// Reorders the covariates of `ds` to `names`, failing on any missing one.
fn align_columns(ds: &Dataset, names: &[String]) -> Result<Dataset, CliError> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            ds.column_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| CliError::from(DataError::MissingColumn(n.clone())))
        })
        .collect::<Result<_, _>>()?;
    let x = nalgebra::DMatrix::from_fn(ds.n_rows(), idx.len(), |i, j| ds.x[(i, idx[j])]);
    Ok(Dataset::new(x, ds.a.clone(), ds.y.clone(), ds.s.clone(), names.to_vec())?)
}

/// Sweep points of a Study 1 run: `(label, x, c, zero_fraction)` plus the
/// name of the swept variable.
pub fn study1_sweep(cfg: &RunConfig) -> Result<(String, Vec<(f64, f64)>), CliError> {
    let case = cfg.case.unwrap_or(Case::A);
    let (mut cs, mut zs) = match case {
        Case::A => (vec![1.0, 3.0, 5.0, 7.0, 9.0], vec![0.5]),
        Case::B => (vec![0.1, 0.3, 0.5, 0.7, 0.9], vec![0.5]),
        Case::C => (
            vec![1.0],
            (2..STUDY1_DIM).step_by(3).map(|z| z as f64 / STUDY1_DIM as f64).collect(),
        ),
    };
    if let Some(c) = &cfg.c {
        cs = c.clone();
    }
    if let Some(z) = &cfg.zero_fraction {
        zs = z.clone();
    }
    if cs.is_empty() || zs.is_empty() {
        return Err(usage("sweep lists must be non-empty"));
    }
    if cs.len() > 1 && zs.len() > 1 {
        return Err(usage("sweep either --c or --zero-fraction, not both"));
    }
    if let Some(&c) = cs.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
        return Err(usage(format!("--c values must be positive, got {c}")));
    }
    if let Some(&z) = zs.iter().find(|&&z| !(0.0..1.0).contains(&z)) {
        return Err(usage(format!("--zero-fraction values must lie in [0, 1), got {z}")));
    }
    if zs.len() > 1 {
        Ok(("zero_fraction".into(), zs.iter().map(|&z| (cs[0], z)).collect()))
    } else {
        Ok(("c".into(), cs.iter().map(|&c| (c, zs[0])).collect()))
    }
}

pub fn cmd_simulate(study: Study, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if cfg.t < 2 {
        return Err(usage(format!("--T must be at least 2 (variance needs two replicates), got {}", cfg.t)));
    }
    if cfg.n == 0 {
        return Err(usage("--n must be positive"));
    }
    if cfg.formats.is_empty() {
        return Err(usage("--format needs at least one format"));
    }
    let seed = cfg.resolved_seed()?;
    let mut mc = match study {
        Study::Study1 => MethodConfig::study1(),
        Study::Study2 => MethodConfig::study2(),
    };
    if cfg.basis_q.is_some() || cfg.basis_scheme != BasisScheme::TotalDegree {
        let b = cfg.basis(mc.mu_spec.max_power)?;
        mc.mu_spec = b;
        mc.b_spec = b;
        mc.inclusion_basis = b;
    }
    mc.plan = cfg.plan(seed)?;
    mc.penalty = cfg.penalty()?;
    mc.match_spec = cfg.match_spec()?;
    let (study_name, x_label, points, methods): (&str, String, Vec<(String, Option<f64>, Scenario)>, Vec<Method>) =
        match study {
            Study::Study1 => {
                let (label, pts) = study1_sweep(cfg)?;
                let scen = pts
                    .into_iter()
                    .map(|(c, z)| {
                        let x = if label == "c" { c } else { z };
                        (
                            format!("{label}={x}"),
                            Some(x),
                            Scenario::Study1(Study1Spec {
                                n: cfg.n,
                                m: cfg.m,
                                c,
                                zero_fraction_delta: z,
                                seed,
                            }),
                        )
                    })
                    .collect();
                let methods = cfg.methods.clone().unwrap_or_else(|| vec![Method::Dpie, Method::Spie]);
                ("study1", label, scen, methods)
            }
            Study::Study2 => {
                if cfg.settings.is_empty() {
                    return Err(usage("--setting needs at least one setting"));
                }
                let scen = cfg
                    .settings
                    .iter()
                    .map(|&s| {
                        (
                            s.to_string(),
                            None,
                            Scenario::Study2(Study2Spec {
                                setting: s,
                                n: cfg.n,
                                m: cfg.m,
                                seed,
                            }),
                        )
                    })
                    .collect();
                let methods = cfg.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
                ("study2", "setting".into(), scen, methods)
            }
        };
    if study == Study::Study1 {
        if let Some(m) = methods.iter().find(|m| matches!(m, Method::Mba | Method::Bpp)) {
            return Err(usage(format!("{m} needs a treatment and is not available for study1")));
        }
    }
    if methods.is_empty() {
        return Err(usage("--method needs at least one method"));
    }
    let mut rows = Vec::with_capacity(points.len());
    for (label, x, scenario) in points {
        let run = sim::run_monte_carlo(&scenario, &methods, cfg.t, seed, &mc).map_err(Error::from)?;
        rows.push(ReportRow {
            label,
            x,
            metrics: run.metrics,
        });
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        study: study_name.into(),
        x_label,
        replicates: cfg.t,
        base_seed: seed,
        rows,
    };
    ensure_dir(&cfg.output_dir)?;
    let mut paths = Vec::new();
    for &f in &cfg.formats {
        paths.extend(emit_report(&report, f, &cfg.output_dir).map_err(Error::from)?);
    }
    Ok(paths)
}

pub fn cmd_match(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.match_spec()?;
    let input = required(&cfg.input, "--input")?;
    let pool_path = required(&cfg.pool, "--pool")?;
    let trial = data::load_csv(input, &cfg.outcome, &cfg.treatment, &cfg.study)?;
    let cc = trial.subset(&trial.rows_where(|a, s| s == 1 && a == 0));
    if cc.n_rows() == 0 {
        return Err(CliError::from(DataError::Invalid("input has no concurrent controls".into())));
    }
    let pool = align_columns(&load_external(pool_path, cfg)?, &cc.column_names)?;
    let (cc_m, pool_m) = if cfg.scale01 {
        let both = cc.concat(&pool)?;
        let scaled = data::scale_unit_interval(&both)?;
        let n = cc.n_rows();
        (
            scaled.subset(&(0..n).collect::<Vec<_>>()),
            scaled.subset(&(n..scaled.n_rows()).collect::<Vec<_>>()),
        )
    } else {
        (cc, pool.clone())
    };
    let outcome = match_external_controls(&cc_m, &pool_m, &spec)?;
    let rows: Vec<usize> = outcome.pairs.iter().map(|p| p.ec_row).collect();
    let mut ec = pool.subset(&rows);
    ec.a = vec![0; rows.len()];
    ec.s = vec![0; rows.len()];
    ensure_dir(&cfg.output_dir)?;
    let ec_path = cfg.output_dir.join("external_controls.csv");
    ec.write_csv(&ec_path, &cfg.outcome, &cfg.treatment, &cfg.study)?;
    let report_path = cfg.output_dir.join("match_report.csv");
    let triples: Vec<(usize, usize, f64)> = outcome.pairs.iter().map(|p| (p.cc_row, p.ec_row, p.distance)).collect();
    write_file(&report_path, &data::match_report_csv(&triples))?;
    Ok(vec![ec_path, report_path])
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let input = required(&cfg.input, "--input")?;
    let bytes = std::fs::read(input).map_err(|source| {
        CliError::from(DataError::Io {
            path: input.to_path_buf(),
            source,
        })
    })?;
    let report = Report::from_json(&bytes).map_err(Error::from)?;
    ensure_dir(&cfg.output_dir)?;
    let mut paths = Vec::new();
    for &f in &cfg.formats {
        paths.extend(emit_report(&report, f, &cfg.output_dir).map_err(Error::from)?);
    }
    Ok(paths)
}

/// Runs a parsed command line, printing results to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.command)?;
    install_pool(cfg.jobs)?;
    match &cli.command {
        Command::Fit(_) => print!("{}", cmd_fit(&cfg)?),
        Command::Simulate(a) => print_paths(&cmd_simulate(a.study, &cfg)?),
        Command::Match(_) => print_paths(&cmd_match(&cfg)?),
        Command::Report(_) => print_paths(&cmd_report(&cfg)?),
    }
    Ok(())
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("dpie").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"folds": 4, "n_lambda": 9, "seed": 5, "T": 7}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&parse(&["simulate", "study2", "--config", p, "--folds", "6"])).unwrap();
        assert_eq!(cfg.folds, 6);
        assert_eq!(cfg.n_lambda, 9);
        assert_eq!(cfg.t, 7);
        assert_eq!(cfg.seed, Some(5));
        let cfg = resolve(&parse(&["simulate", "study2", "--config", p, "--seed", "9", "--T", "3"])).unwrap();
        assert_eq!((cfg.seed, cfg.t), (Some(9), 3));
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"fold": 4}"#).unwrap();
        let err = resolve(&parse(&["fit", "--config", path.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn divide_by_takes_factor_and_columns() {
        let cfg = resolve(&parse(&["fit", "--divide-by", "1000", "re74,re75,re78"])).unwrap();
        assert_eq!(
            cfg.divide_by,
            Some(DivideBy {
                factor: 1000.0,
                columns: vec!["re74".into(), "re75".into(), "re78".into()]
            })
        );
        assert!(resolve(&parse(&["fit", "--divide-by", "x", "re74"])).is_err());
    }

    #[test]
    fn sparsity_preset_spans_grid() {
        let cfg = RunConfig {
            case: Some(Case::C),
            ..RunConfig::default()
        };
        let (label, pts) = study1_sweep(&cfg).unwrap();
        assert_eq!(label, "zero_fraction");
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0], (1.0, 0.04));
        assert_eq!(pts[15], (1.0, 0.94));
        let both = RunConfig {
            c: Some(vec![1.0, 3.0]),
            zero_fraction: Some(vec![0.1, 0.2]),
            ..RunConfig::default()
        };
        assert_eq!(study1_sweep(&both).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_input_is_usage_error() {
        let err = cmd_fit(&RunConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = cmd_match(&RunConfig {
            ratio: 0,
            ..RunConfig::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn summary_has_row_per_method() {
        let rs = vec![AteResult::new(Method::Dpie, 1.5, 0.2), AteResult::new(Method::Re, 1.7, 0.3)];
        let t = summary_table(&rs, Some(1.794));
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().contains("0.2940"));
        assert!(summary_table(&rs, None).lines().nth(2).unwrap().contains(" - "));
    }
}
