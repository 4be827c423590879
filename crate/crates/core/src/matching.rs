//! Greedy nearest-neighbour matching used to build external-control sets
//! and by the matching baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::DataError;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Mahalanobis,
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mahalanobis" => Ok(Distance::Mahalanobis),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(format!("unknown distance `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub ratio: usize,
    pub distance: Distance,
    pub with_replacement: bool,
}

impl MatchSpec {
    pub fn new(ratio: usize, distance: Distance, with_replacement: bool) -> Result<Self, DataError> {
        if ratio == 0 {
            return Err(DataError::Invalid("match ratio must be at least 1".into()));
        }
        Ok(MatchSpec {
            ratio,
            distance,
            with_replacement,
        })
    }
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec {
            ratio: 1,
            distance: Distance::Mahalanobis,
            with_replacement: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub cc_row: usize,
    pub ec_row: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// Claimed pool rows, in claim order, flagged as external controls.
    pub controls: Dataset,
    pub pairs: Vec<MatchPair>,
}

/// Maps rows into a space where Euclidean distance equals the requested
/// metric. For Mahalanobis the covariance is estimated on `reference`.
pub(crate) fn whitening(reference: &DMatrix<f64>, distance: Distance) -> DMatrix<f64> {
    let d = reference.ncols();
    match distance {
        Distance::Euclidean => DMatrix::identity(d, d),
        Distance::Mahalanobis => {
            let n = reference.nrows() as f64;
            let mean = reference.row_mean();
            let mut centered = reference.clone();
            for mut row in centered.row_iter_mut() {
                row -= &mean;
            }
            let cov = centered.tr_mul(&centered) / (n - 1.0).max(1.0);
            match linalg::cholesky(&cov, &linalg::default_names(d)) {
                // z = L⁻¹ x gives |z|² = xᵀ Σ⁻¹ x
                Ok(l) => l.try_inverse().unwrap_or_else(|| DMatrix::identity(d, d)),
                Err(_) => {
                    let eig = cov.symmetric_eigen();
                    let cut = 1e-12 * eig.eigenvalues.amax();
                    let mut w = DMatrix::zeros(d, d);
                    for k in 0..d {
                        let lam = eig.eigenvalues[k];
                        if lam > cut {
                            let v = eig.eigenvectors.column(k);
                            w.set_row(k, &(v.transpose() / lam.sqrt()));
                        }
                    }
                    w
                }
            }
        }
    }
}

fn transform(rows: &DMatrix<f64>, w: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..rows.nrows())
        .map(|i| w * rows.row(i).transpose())
        .collect()
}

/// Greedy matching in target order. Each target claims its `ratio` nearest
/// unclaimed candidates (ties go to the lower candidate index). With
/// `allow_shortfall` a target that finds no free candidate is left with an
/// empty list instead of failing.
pub(crate) fn greedy_match(
    targets: &[DVector<f64>],
    candidates: &[DVector<f64>],
    ratio: usize,
    with_replacement: bool,
    allow_shortfall: bool,
) -> Result<Vec<Vec<(usize, f64)>>, DataError> {
    if !with_replacement && !allow_shortfall && candidates.len() < ratio * targets.len() {
        let needed = ratio * targets.len();
        return Err(DataError::PoolExhausted {
            needed,
            available: candidates.len(),
            shortfall: needed - candidates.len(),
        });
    }
    let mut claimed = vec![false; candidates.len()];
    let mut out = Vec::with_capacity(targets.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for t in targets {
        scratch.clear();
        for (j, c) in candidates.iter().enumerate() {
            if with_replacement || !claimed[j] {
                scratch.push(((t - c).norm(), j));
            }
        }
        let take = ratio.min(scratch.len());
        if take > 0 && take < scratch.len() {
            scratch.select_nth_unstable_by(take - 1, |p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        }
        let mut picked: Vec<(f64, usize)> = scratch[..take].to_vec();
        picked.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        if !with_replacement {
            for &(_, j) in &picked {
                claimed[j] = true;
            }
        }
        out.push(picked.into_iter().map(|(d, j)| (j, d)).collect());
    }
    Ok(out)
}

/// Matches every concurrent-control row to `spec.ratio` pool rows.
///
/// Distances are computed on the covariates as given (callers scale them
/// first). The Mahalanobis covariance is estimated on the union of both sets.
pub fn match_external_controls(
    cc_rows: &Dataset,
    pool: &Dataset,
    spec: &MatchSpec,
) -> Result<MatchOutcome, DataError> {
    if spec.ratio == 0 {
        return Err(DataError::Invalid("match ratio must be at least 1".into()));
    }
    if cc_rows.n_covariates() != pool.n_covariates() {
        return Err(DataError::Invalid(format!(
            "controls have {} covariates, pool has {}",
            cc_rows.n_covariates(),
            pool.n_covariates()
        )));
    }
    let (nc, np, d) = (cc_rows.n_rows(), pool.n_rows(), cc_rows.n_covariates());
    let mut union = DMatrix::zeros(nc + np, d);
    union.rows_mut(0, nc).copy_from(&cc_rows.x);
    union.rows_mut(nc, np).copy_from(&pool.x);
    let w = whitening(&union, spec.distance);
    let targets = transform(&cc_rows.x, &w);
    let cands = transform(&pool.x, &w);
    let claims = greedy_match(&targets, &cands, spec.ratio, spec.with_replacement, false)?;
    let mut pairs = Vec::with_capacity(nc * spec.ratio);
    for (c, list) in claims.iter().enumerate() {
        for &(e, dist) in list {
            pairs.push(MatchPair {
                cc_row: c,
                ec_row: e,
                distance: dist,
            });
        }
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.ec_row).collect();
    let mut controls = pool.subset(&rows);
    controls.a = vec![0; rows.len()];
    controls.s = vec![0; rows.len()];
    Ok(MatchOutcome { controls, pairs })
}
