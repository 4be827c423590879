//! Power-series sieve bases and design-matrix assembly.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::LinalgError;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisScheme {
    /// Monomials with total degree between 1 and `q`.
    TotalDegree,
    /// Monomials with every exponent at most `q`.
    TensorProduct,
}

impl std::str::FromStr for BasisScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total_degree" | "total-degree" => Ok(BasisScheme::TotalDegree),
            "tensor_product" | "tensor-product" => Ok(BasisScheme::TensorProduct),
            other => Err(format!("unknown basis scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub max_power: u32,
    pub scheme: BasisScheme,
    /// Only meaningful for [`BasisScheme::TotalDegree`].
    pub include_cross_terms: bool,
}

impl BasisSpec {
    pub fn total_degree(q: u32) -> Self {
        BasisSpec {
            max_power: q,
            scheme: BasisScheme::TotalDegree,
            include_cross_terms: true,
        }
    }

    /// Degree-one basis: the covariates themselves.
    pub fn linear() -> Self {
        BasisSpec {
            max_power: 1,
            scheme: BasisScheme::TotalDegree,
            include_cross_terms: false,
        }
    }

    pub fn tensor_product(q: u32) -> Self {
        BasisSpec {
            max_power: q,
            scheme: BasisScheme::TensorProduct,
            include_cross_terms: true,
        }
    }

    /// Exponent vectors in emission order: graded by total degree, and
    /// within a degree in descending lexicographic order (x1 first).
    pub fn exponents(&self, d: usize) -> Vec<Vec<u32>> {
        let q = self.max_power.max(1);
        let mut out = Vec::new();
        match self.scheme {
            BasisScheme::TotalDegree if !self.include_cross_terms => {
                for deg in 1..=q {
                    for j in 0..d {
                        let mut e = vec![0; d];
                        e[j] = deg;
                        out.push(e);
                    }
                }
            }
            BasisScheme::TotalDegree => {
                for deg in 1..=q {
                    compositions(deg, d, u32::MAX, &mut Vec::new(), &mut out);
                }
            }
            BasisScheme::TensorProduct => {
                for deg in 1..=(q * d as u32) {
                    compositions(deg, d, q, &mut Vec::new(), &mut out);
                }
            }
        }
        out
    }

    pub fn n_terms(&self, d: usize) -> usize {
        self.exponents(d).len()
    }
}

// all exponent vectors of length `d` summing to `total`, each <= cap,
// first coordinate descending
fn compositions(total: u32, d: usize, cap: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if d == 1 {
        if total <= cap {
            let mut e = prefix.clone();
            e.push(total);
            out.push(e);
        }
        return;
    }
    for first in (0..=total.min(cap)).rev() {
        prefix.push(first);
        compositions(total - first, d - 1, cap, prefix, out);
        prefix.pop();
    }
}

fn monomial_name(e: &[u32], names: &[String]) -> String {
    let parts: Vec<String> = e
        .iter()
        .zip(names)
        .filter(|(p, _)| **p > 0)
        .map(|(&p, n)| if p == 1 { n.clone() } else { format!("{n}^{p}") })
        .collect();
    parts.join("*")
}

/// Evaluates the power basis (without a constant column) row by row.
pub fn power_basis(x: &DMatrix<f64>, spec: &BasisSpec) -> DMatrix<f64> {
    let exps = spec.exponents(x.ncols());
    DMatrix::from_fn(x.nrows(), exps.len(), |i, k| {
        exps[k]
            .iter()
            .enumerate()
            .map(|(j, &p)| x[(i, j)].powi(p as i32))
            .product()
    })
}

pub fn power_basis_names(names: &[String], spec: &BasisSpec) -> Vec<String> {
    spec.exponents(names.len())
        .iter()
        .map(|e| monomial_name(e, names))
        .collect()
}

/// Sample orthonormalization of a basis matrix.
///
/// With `G = BᵀB / N = L Lᵀ` (Cholesky, positive diagonal) the transform is
/// `A = L⁻¹`, and `R = B Aᵀ` satisfies `RᵀR / N = I`. `A` can be applied to
/// basis rows of new data.
pub fn orthonormalize(b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), LinalgError> {
    let n = b.nrows() as f64;
    let g = b.tr_mul(b) / n;
    let l = linalg::cholesky(&g, &linalg::default_names(b.ncols()))?;
    let a = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(b.ncols(), b.ncols()))
        .ok_or_else(|| LinalgError::Dimension("singular triangular factor".into()))?;
    let r = b * a.transpose();
    Ok((r, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnGroup {
    Intercept,
    Treatment,
    MuBasis,
    BiasBasis,
}

impl ColumnGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ColumnGroup::Intercept => "intercept",
            ColumnGroup::Treatment => "treatment",
            ColumnGroup::MuBasis => "mu_basis",
            ColumnGroup::BiasBasis => "bias_basis",
        }
    }
}

/// Regressor matrix `[1 | A | p_mu(X) | (1-S) p_b(X)]`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub m: DMatrix<f64>,
    pub groups: Vec<ColumnGroup>,
    pub names: Vec<String>,
    /// Non-intercept columns with no variation (e.g. bias columns when there
    /// are no external controls). Their coefficients are pinned at zero.
    pub degenerate: Vec<bool>,
    pub k1: usize,
    pub k2: usize,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.m.ncols()
    }

    pub fn columns_in(&self, group: ColumnGroup) -> Vec<usize> {
        (0..self.n_cols()).filter(|&j| self.groups[j] == group).collect()
    }

    pub fn treatment_col(&self) -> Option<usize> {
        self.groups.iter().position(|g| *g == ColumnGroup::Treatment)
    }

    /// Builds a design from raw parts, flagging degenerate columns.
    pub fn from_parts(m: DMatrix<f64>, groups: Vec<ColumnGroup>, names: Vec<String>) -> Self {
        let degenerate = (0..m.ncols())
            .map(|j| {
                groups[j] != ColumnGroup::Intercept && {
                    let c = m.column(j);
                    c.iter().all(|&v| v == c[0])
                }
            })
            .collect();
        let k2 = groups.iter().filter(|g| **g == ColumnGroup::BiasBasis).count();
        let k1 = groups.len() - k2;
        DesignMatrix {
            m,
            groups,
            names,
            degenerate,
            k1,
            k2,
        }
    }

    pub fn restrict_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix::from_parts(self.m.select_rows(rows), self.groups.clone(), self.names.clone())
    }

    /// CSV with one leading line of group labels, then a header, then rows.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let labels: Vec<&str> = self.groups.iter().map(|g| g.label()).collect();
        writeln!(buf, "# groups: {}", labels.join(",")).unwrap();
        writeln!(buf, "{}", self.names.join(",")).unwrap();
        for i in 0..self.n_rows() {
            let row: Vec<String> = (0..self.n_cols()).map(|j| format!("{}", self.m[(i, j)])).collect();
            writeln!(buf, "{}", row.join(",")).unwrap();
        }
        buf
    }
}

/// Assembles the augmented working-model design for pooled data.
pub fn assemble_design(ds: &Dataset, mu_spec: &BasisSpec, b_spec: &BasisSpec) -> DesignMatrix {
    assemble(ds, mu_spec, Some(b_spec))
}

/// Design without bias columns, for fits on randomized rows only.
pub fn assemble_mu_design(ds: &Dataset, mu_spec: &BasisSpec) -> DesignMatrix {
    assemble(ds, mu_spec, None)
}

fn assemble(ds: &Dataset, mu_spec: &BasisSpec, b_spec: Option<&BasisSpec>) -> DesignMatrix {
    let n = ds.n_rows();
    let pmu = power_basis(&ds.x, mu_spec);
    let mu_names = power_basis_names(&ds.column_names, mu_spec);
    let (pb, b_names) = match b_spec {
        Some(spec) => {
            let mut pb = power_basis(&ds.x, spec);
            for i in 0..n {
                if ds.s[i] == 1 {
                    // exact zeros, not (1-S)*value rounding
                    pb.row_mut(i).fill(0.0);
                }
            }
            let names = power_basis_names(&ds.column_names, spec)
                .into_iter()
                .map(|s| format!("(1-S)*{s}"))
                .collect();
            (pb, names)
        }
        None => (DMatrix::zeros(n, 0), Vec::new()),
    };
    let k = 2 + pmu.ncols() + pb.ncols();
    let mut m = DMatrix::zeros(n, k);
    m.column_mut(0).fill(1.0);
    for i in 0..n {
        m[(i, 1)] = ds.a[i] as f64;
    }
    m.columns_mut(2, pmu.ncols()).copy_from(&pmu);
    m.columns_mut(2 + pmu.ncols(), pb.ncols()).copy_from(&pb);
    let mut groups = vec![ColumnGroup::Intercept, ColumnGroup::Treatment];
    groups.extend(std::iter::repeat_n(ColumnGroup::MuBasis, pmu.ncols()));
    groups.extend(std::iter::repeat_n(ColumnGroup::BiasBasis, pb.ncols()));
    let mut names = vec!["(intercept)".to_string(), "A".to_string()];
    names.extend(mu_names);
    names.extend(b_names);
    DesignMatrix::from_parts(m, groups, names)
}
