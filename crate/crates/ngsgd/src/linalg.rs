//! Thin facade over the dense factorizations used elsewhere in the crate.
//!
//! Matrix products stay on `ndarray`, which has fast kernels for `f32`/`f64`.
//! Factorizations (symmetric eigendecomposition, Cholesky, SVD) are delegated
//! to `nalgebra` and always run in double precision regardless of the working
//! precision `T`. Every factored matrix in this crate is small (rank x rank,
//! or dim x dim at desk scale), so the conversion cost is noise, and doing the
//! eigenproblems in f64 keeps single-precision training states stable.

use nalgebra as na;
use ndarray::{Array1, Array2};

use crate::error::{NgError, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix, the carrier type for all numeric data.
pub type Mat<T> = Array2<T>;

fn to_na_f64<T: Scalar>(a: &Mat<T>) -> na::DMatrix<f64> {
    na::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]].as_f64())
}

fn from_na_f64<T: Scalar>(m: &na::DMatrix<f64>) -> Mat<T> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| T::from_f64(m[(i, j)]))
}

fn check_square_finite(m: &na::DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(NgError::DimMismatch(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(NgError::NonFinite(format!("{what}: matrix has non-finite entries")));
    }
    Ok(())
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Returns `(values, vectors)` where column `k` of `vectors` is the
/// eigenvector for `values[k]`. The input is symmetrized first, so tiny
/// asymmetries from accumulated roundoff are harmless.
pub fn eigh_desc<T: Scalar>(a: &Mat<T>) -> Result<(Array1<T>, Mat<T>)> {
    let mut m = to_na_f64(a);
    check_square_finite(&m, "eigh")?;
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let eig = na::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Array1::from_iter(order.iter().map(|&k| T::from_f64(eig.eigenvalues[k])));
    let mut vectors = Array2::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, new_col]] = T::from_f64(eig.eigenvectors[(r, old_col)]);
        }
    }
    Ok((values, vectors))
}

/// Solves `A X = B` for symmetric positive-definite `A` via Cholesky.
pub fn spd_solve<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let m = to_na_f64(a);
    check_square_finite(&m, "spd_solve")?;
    if b.nrows() != a.nrows() {
        return Err(NgError::DimMismatch(format!(
            "spd_solve: lhs is {}x{} but rhs has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let chol = na::Cholesky::new(m)
        .ok_or_else(|| NgError::Numerical("spd_solve: matrix is not positive definite".into()))?;
    let rhs = to_na_f64(b);
    Ok(from_na_f64(&chol.solve(&rhs)))
}

/// Lower Cholesky factor `L` with `A = L L^T`.
pub fn cholesky_lower<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let m = to_na_f64(a);
    check_square_finite(&m, "cholesky")?;
    let chol = na::Cholesky::new(m)
        .ok_or_else(|| NgError::Numerical("cholesky: matrix is not positive definite".into()))?;
    Ok(from_na_f64(&chol.l()))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower_triangular<T: Scalar>(l: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let lm = to_na_f64(l);
    check_square_finite(&lm, "triangular solve")?;
    let rhs = to_na_f64(b);
    let x = lm.solve_lower_triangular(&rhs).ok_or_else(|| {
        NgError::Numerical("triangular solve: singular triangular factor".into())
    })?;
    Ok(from_na_f64(&x))
}

/// Thin SVD `A = U diag(S) V^T`, singular values sorted descending.
pub fn svd<T: Scalar>(a: &Mat<T>) -> Result<(Mat<T>, Array1<T>, Mat<T>)> {
    let m = to_na_f64(a);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(NgError::NonFinite("svd: matrix has non-finite entries".into()));
    }
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| NgError::Numerical("svd: U not computed".into()))?;
    let vt = svd.v_t.ok_or_else(|| NgError::Numerical("svd: V^T not computed".into()))?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = Array1::from_iter(order.iter().map(|&i| T::from_f64(svd.singular_values[i])));
    let mut u_sorted = Array2::zeros((u.nrows(), k));
    let mut vt_sorted = Array2::zeros((k, vt.ncols()));
    for (new_i, &old_i) in order.iter().enumerate() {
        for r in 0..u.nrows() {
            u_sorted[[r, new_i]] = T::from_f64(u[(r, old_i)]);
        }
        for c in 0..vt.ncols() {
            vt_sorted[[new_i, c]] = T::from_f64(vt[(old_i, c)]);
        }
    }
    Ok((u_sorted, s, vt_sorted))
}

pub fn all_finite<T: Scalar>(a: &Mat<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Squared Frobenius norm, accumulated in f64.
pub fn frob_sq_f64<T: Scalar>(a: &Mat<T>) -> f64 {
    a.iter().map(|v| {
        let x = v.as_f64();
        x * x
    })
    .sum()
}

/// Per-row squared norms, accumulated in f64.
pub fn row_sq_norms_f64<T: Scalar>(a: &Mat<T>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum())
        .collect()
}

/// Per-row dot products between matching rows of `a` and `b`, in f64.
pub fn rowwise_dot_f64<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Vec<f64> {
    debug_assert_eq!(a.dim(), b.dim());
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x.as_f64() * y.as_f64()).sum())
        .collect()
}

pub fn trace_f64<T: Scalar>(a: &Mat<T>) -> f64 {
    a.diag().iter().map(|v| v.as_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        a.t().dot(&a) + Array2::<f64>::eye(n) * 0.5
    }

    #[test]
    fn eigh_reconstructs_and_sorts() {
        let a = random_spd(7, 1);
        let (vals, vecs) = eigh_desc(&a).unwrap();
        for k in 1..7 {
            assert!(vals[k - 1] >= vals[k], "eigenvalues must be descending");
        }
        let lambda = Array2::from_diag(&vals);
        let rebuilt = vecs.dot(&lambda).dot(&vecs.t());
        for (x, y) in a.iter().zip(rebuilt.iter()) {
            assert!((x - y).abs() < 1e-10, "reconstruction error {x} vs {y}");
        }
        let gram = vecs.t().dot(&vecs);
        for i in 0..7 {
            for j in 0..7 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spd_solve_matches_direct_multiply() {
        let a = random_spd(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let b = a.dot(&x);
        let x2 = spd_solve(&a, &b).unwrap();
        for (p, q) in x.iter().zip(x2.iter()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = array![[1.0, 0.0], [0.0, -2.0]];
        assert!(spd_solve(&a, &Array2::eye(2)).is_err());
    }

    #[test]
    fn cholesky_and_triangular_solve_roundtrip() {
        let a = random_spd(5, 4);
        let l = cholesky_lower(&a).unwrap();
        let rebuilt = l.dot(&l.t());
        for (x, y) in a.iter().zip(rebuilt.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
        let b = Array2::<f64>::eye(5);
        let y = solve_lower_triangular(&l, &b).unwrap();
        let should_be_b = l.dot(&y);
        for (x, y) in b.iter().zip(should_be_b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn svd_reconstructs_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::<f64>::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let (u, s, vt) = svd(&a).unwrap();
        for k in 1..s.len() {
            assert!(s[k - 1] >= s[k]);
        }
        let rebuilt = u.dot(&Array2::from_diag(&s)).dot(&vt);
        for (x, y) in a.iter().zip(rebuilt.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn eigh_rejects_non_finite() {
        let a = array![[1.0, f64::NAN], [f64::NAN, 1.0]];
        assert!(eigh_desc(&a).is_err());
    }

    #[test]
    fn f64_reductions() {
        let a = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(frob_sq_f64(&a), 30.0);
        assert_eq!(row_sq_norms_f64(&a), vec![5.0, 25.0]);
        assert_eq!(trace_f64(&a), 5.0);
        assert!(all_finite(&a));
        let b = array![[1.0f32, f32::INFINITY], [0.0, 0.0]];
        assert!(!all_finite(&b));
    }
}
