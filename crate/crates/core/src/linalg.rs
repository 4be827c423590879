//! Small dense helpers on top of `nalgebra` for symmetric positive definite
//! systems. The Cholesky factor is hand-rolled so a failing pivot can be
//! reported by column index.

use nalgebra::{DMatrix, DVector};

use crate::error::LinalgError;

/// Relative pivot tolerance used to declare a Gram matrix rank deficient.
pub const PIVOT_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `G = L Lᵀ` and positive diagonal.
///
/// A pivot is rejected when it falls below `PIVOT_TOL` times the original
/// diagonal entry, i.e. the column is (numerically) a combination of the
/// preceding ones.
pub fn cholesky(g: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>, LinalgError> {
    let k = g.nrows();
    if g.ncols() != k {
        return Err(LinalgError::Dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            k,
            g.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = g[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        let scale = g[(j, j)].abs().max(f64::MIN_POSITIVE);
        if !(d > PIVOT_TOL * scale) {
            return Err(LinalgError::RankDeficient {
                column: j,
                name: names.get(j).cloned().unwrap_or_else(|| format!("col{j}")),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..k {
            let mut s = g[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_sub(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = l.nrows();
    let mut x = b.clone();
    for i in 0..k {
        let mut s = x[i];
        for p in 0..i {
            s -= l[(i, p)] * x[p];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn backward_sub(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = l.nrows();
    let mut x = b.clone();
    for i in (0..k).rev() {
        let mut s = x[i];
        for p in (i + 1)..k {
            s -= l[(p, i)] * x[p];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

pub fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    backward_sub(l, &forward_sub(l, b))
}

pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let k = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut e = DVector::<f64>::zeros(k);
        e[j] = 1.0;
        inv.set_column(j, &chol_solve(l, &e));
    }
    // symmetrize away rounding asymmetry
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// Moore–Penrose pseudo-inverse through the SVD; singular values below
/// `rcond * σ_max` are treated as zero. Returns the inverse and the rank.
pub fn pseudo_inverse(m: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rcond * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cut).count();
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut out = DMatrix::<f64>::zeros(m.ncols(), m.nrows());
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += vt.row(idx).transpose() * u.column(idx).transpose() / s;
        }
    }
    (out, rank)
}

pub fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("col{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_reconstructs() {
        let g = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0]);
        let l = cholesky(&g, &default_names(3)).unwrap();
        assert_relative_eq!(&l * l.transpose(), g, epsilon = 1e-12);
        assert!((0..3).all(|i| l[(i, i)] > 0.0));
        let inv = chol_inverse(&l);
        assert_relative_eq!(&inv * &g, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_names_dependent_column() {
        let b = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 0.0, 0.0]);
        let g = b.tr_mul(&b);
        let names = vec!["one".to_string(), "x".to_string(), "x_copy".to_string()];
        match cholesky(&g, &names) {
            Err(LinalgError::RankDeficient { column, name }) => {
                assert_eq!(column, 2);
                assert_eq!(name, "x_copy");
            }
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_inverse_of_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = pseudo_inverse(&m, 1e-12);
        assert_eq!(rank, 1);
        assert_relative_eq!(&m * &p * &m, m, epsilon = 1e-12);
    }
}
