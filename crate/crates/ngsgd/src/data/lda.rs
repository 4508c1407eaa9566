//! Input normalization from labeled data.
//!
//! Let W be the within-class covariance and B the between-class covariance
//! of the training features. The transform first whitens with W^{-1/2} and
//! rotates into the eigenbasis of the whitened between-class covariance, so
//! the within-class covariance becomes the identity and the between-class
//! covariance becomes diag(b_1 >= ... >= b_D). Row i is then scaled by
//! sqrt((b_i + 0.001) / (b_i + 1)), which leaves each output direction with
//! total variance b_i + 0.001: informative directions keep roughly unit
//! spread while noise-only directions are squashed toward zero instead of
//! being amplified by the whitening. Finally the singular values of the
//! linear map are floored at a fifth of the largest so no direction is
//! collapsed beyond recovery, and the offset -T mu centers the output.

use ndarray::{Array1, Array2, Axis};

use super::Dataset;
use crate::error::{NgError, Result};
use crate::linalg::{self, Mat};
use crate::scalar::Scalar;

/// Affine input map `x -> T x + offset` with per-direction class separation.
#[derive(Debug, Clone)]
pub struct NormalizationTransform {
    /// `D x (D + 1)`; the last column is the offset.
    pub affine: Mat<f64>,
    /// Between- to within-class variance ratio of each output direction,
    /// descending.
    pub lda_ratios: Vec<f64>,
    /// How many singular values of the linear part were raised to the
    /// conditioning floor.
    pub num_floored_singular_values: usize,
}

impl NormalizationTransform {
    pub fn dim(&self) -> usize {
        self.affine.nrows()
    }

    pub fn linear(&self) -> ndarray::ArrayView2<'_, f64> {
        self.affine.slice(ndarray::s![.., ..self.dim()])
    }

    pub fn offset(&self) -> ndarray::ArrayView1<'_, f64> {
        self.affine.column(self.dim())
    }
}

pub fn compute_input_transform(data: &Dataset) -> Result<NormalizationTransform> {
    data.validate()?;
    let n = data.num_samples();
    let dim = data.dim();
    let classes = data.num_classes;
    if n < dim + 2 {
        return Err(NgError::InsufficientData(format!(
            "{n} samples for a {dim}-dimensional transform"
        )));
    }
    if classes < dim {
        log::warn!(
            "input transform: {classes} classes in {dim} dimensions, \
             between-class variance spans at most {} directions",
            classes - 1
        );
    }
    let mut counts = vec![0usize; classes];
    let mut class_means = Array2::<f64>::zeros((classes, dim));
    for (i, &l) in data.labels.iter().enumerate() {
        counts[l as usize] += 1;
        class_means.row_mut(l as usize).scaled_add(1.0, &data.features.row(i));
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            class_means.row_mut(c).mapv_inplace(|v| v / cnt as f64);
        }
    }
    let mean = data.features.mean_axis(Axis(0)).unwrap();

    let mut within = Array2::<f64>::zeros((dim, dim));
    let mut centered = data.features.clone();
    for (i, &l) in data.labels.iter().enumerate() {
        centered.row_mut(i).scaled_add(-1.0, &class_means.row(l as usize));
    }
    within += &centered.t().dot(&centered);
    within.mapv_inplace(|v| v / n as f64);

    let mut between = Array2::<f64>::zeros((dim, dim));
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            continue;
        }
        let delta = &class_means.row(c) - &mean;
        let col = delta.clone().insert_axis(Axis(1));
        between.scaled_add(cnt as f64 / n as f64, &col.dot(&col.t()));
    }

    let (w_vals, w_vecs) = linalg::eigh_desc(&within)?;
    let w_max = w_vals[0];
    if !(w_max > 0.0) || w_vals[dim - 1] <= w_max * 1e-10 {
        return Err(NgError::InsufficientData(
            "within-class covariance is singular".into(),
        ));
    }
    let mut w_isqrt = Array2::<f64>::zeros((dim, dim));
    for k in 0..dim {
        let s = 1.0 / w_vals[k].sqrt();
        let v = w_vecs.column(k);
        for i in 0..dim {
            for j in 0..dim {
                w_isqrt[[i, j]] += s * v[i] * v[j];
            }
        }
    }

    let mut b_tilde = w_isqrt.dot(&between).dot(&w_isqrt);
    let sym = &b_tilde + &b_tilde.t();
    b_tilde = sym * 0.5;
    let (b_vals, u) = linalg::eigh_desc(&b_tilde)?;
    let ratios: Vec<f64> = b_vals.iter().map(|&b| b.max(0.0)).collect();

    let mut t = u.t().dot(&w_isqrt);
    for (i, &b) in ratios.iter().enumerate() {
        let scale = ((b + 0.001) / (b + 1.0)).sqrt();
        t.row_mut(i).mapv_inplace(|v| v * scale);
    }

    let (su, mut sv, svt) = linalg::svd(&t)?;
    let floor = sv[0] / 5.0;
    let num_floored = sv.iter().filter(|&&s| s < floor).count();
    if num_floored > 0 {
        sv.mapv_inplace(|s| s.max(floor));
        let mut scaled = svt.clone();
        for (k, row) in scaled.rows_mut().into_iter().enumerate() {
            let s = sv[k];
            row.into_iter().for_each(|v| *v *= s);
        }
        t = su.dot(&scaled);
    }

    let offset = -t.dot(&mean);
    let mut affine = Array2::<f64>::zeros((dim, dim + 1));
    affine.slice_mut(ndarray::s![.., ..dim]).assign(&t);
    affine.column_mut(dim).assign(&offset);
    Ok(NormalizationTransform {
        affine,
        lda_ratios: ratios,
        num_floored_singular_values: num_floored,
    })
}

/// Applies `x -> T x + offset` to each row of `x`.
pub fn apply_transform<T: Scalar>(
    tr: &NormalizationTransform,
    x: &Mat<T>,
) -> Result<Mat<T>> {
    let dim = tr.dim();
    if x.ncols() != dim {
        return Err(NgError::DimMismatch(format!(
            "transform expects {dim} columns, input has {}",
            x.ncols()
        )));
    }
    let lin = tr.linear().mapv(T::from_f64);
    let offset: Array1<T> = tr.offset().mapv(T::from_f64);
    let mut out = x.dot(&lin.t());
    for mut row in out.rows_mut() {
        row += &offset;
    }
    Ok(out)
}
