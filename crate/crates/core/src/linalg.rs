//! Dense helpers on top of nalgebra shared by the factor extractors and the
//! statistics code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Ties keep the solver's original column order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Moore-Penrose pseudo-inverse. Singular values below
/// `max(rows, cols) * eps * sigma_max` are treated as zero.
pub fn pinv(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Linalg("svd: missing U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Linalg("svd: missing V^T".into()))?;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = rows.max(cols) as f64 * f64::EPSILON * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out += (vk / s) * uk.transpose();
        }
    }
    Ok(out)
}

/// Orthonormal basis for the column span of `a` (thin QR), with the
/// deterministic sign convention of [`fix_column_signs`].
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.clone().qr().q();
    let mut q = q.columns(0, a.ncols().min(a.nrows())).into_owned();
    fix_column_signs(&mut q);
    q
}

/// Flip each column so that its largest-magnitude entry is positive. The
/// first index wins ties in magnitude.
pub fn fix_column_signs(w: &mut DMatrix<f64>) {
    for mut col in w.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if best_abs > 0.0 && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Column-mean-centered copy of `x`.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    out
}

pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "cannot stack {}-column and {}-column matrices",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    Ok(out)
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

pub fn all_finite(x: &DMatrix<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_of_tall_full_rank_is_left_inverse() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 0.0]);
        let p = pinv(&x).unwrap();
        let id = &p * &x;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let p = pinv(&DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(p.shape(), (2, 3));
        assert_eq!(p.norm(), 0.0);
    }

    #[test]
    fn signs_fixed_on_largest_entry() {
        let mut w = DMatrix::from_row_slice(2, 2, &[0.1, 0.5, -0.9, -0.2]);
        fix_column_signs(&mut w);
        assert!(w[(1, 0)] > 0.0);
        assert!(w[(0, 1)] > 0.0);
    }
}
