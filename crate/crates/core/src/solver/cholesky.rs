use nalgebra::DMatrix;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Only the lower triangle of `a` is read. Returns `None` if a pivot is not
/// strictly positive (matrix not numerically SPD).
pub(crate) fn factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0 && diag.is_finite()) {
            return None;
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` given the factor `L`, overwriting `b` with `X`.
pub(crate) fn solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for mut col in b.column_iter_mut() {
        // forward: L y = b
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[(i, k)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[(k, i)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_and_solves() {
        let a = DMatrix::from_row_slice(3, 3, &[4., 12., -16., 12., 37., -43., -16., -43., 98.]);
        let l = factor(&a).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[2., 0., 0., 6., 1., 0., -8., 5., 3.]);
        assert!((&l - expected).abs().max() < 1e-12);
        let x = DMatrix::from_row_slice(3, 2, &[1., 0., -2., 1., 0.5, 3.]);
        let mut b = &a * &x;
        solve_in_place(&l, &mut b);
        assert!((b - x).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1., 2., 2., 1.]);
        assert!(factor(&a).is_none());
        assert!(factor(&DMatrix::zeros(2, 2)).is_none());
    }
}
