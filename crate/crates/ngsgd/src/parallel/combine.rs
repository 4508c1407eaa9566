//! Generalized model combination.
//!
//! Given the trailing P per-iteration models, the combined network's layer l
//! is the weighted sum over models of that layer's parameters, with a free
//! coefficient per (model, layer) pair. The P x L coefficients maximize the
//! tune-set mean log-probability minus 1e-10 ||c||^2, by L-BFGS from the
//! best of P + 1 starting candidates (each single model and the uniform
//! average). Since the best point ever evaluated is kept, the result never
//! scores below any single model on the tune set.

use ndarray::{Array1, Array2};

use super::ensure_same_arch;
use crate::error::{NgError, Result};
use crate::linalg::Mat;
use crate::nnet::{backprop, forward, Layer, Network};
use crate::opt::{minimize, LbfgsOptions};
use crate::scalar::Scalar;

const COMBINE_L2: f64 = 1e-10;

/// Per-model, per-layer combination coefficients (P x L).
#[derive(Debug, Clone)]
pub struct CombineWeights {
    pub weights: Array2<f64>,
}

fn layers_f64<T: Scalar>(models: &[Network<T>]) -> Vec<Vec<Mat<f64>>> {
    models
        .iter()
        .map(|m| m.layers.iter().map(|l| l.weights.mapv(|v| v.as_f64())).collect())
        .collect()
}

fn combine_f64<T: Scalar>(
    template: &Network<T>,
    per_model: &[Vec<Mat<f64>>],
    c: &Array2<f64>,
) -> Network<f64> {
    let layers = template
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut w = Mat::<f64>::zeros(layer.weights.dim());
            for (p, model) in per_model.iter().enumerate() {
                w.scaled_add(c[[p, l]], &model[l]);
            }
            Layer { weights: w, nonlinearity: layer.nonlinearity.clone() }
        })
        .collect();
    Network { layers, input_dim: template.input_dim, num_classes: template.num_classes }
}

/// Builds the network whose layer `l` is `sum_p weights[p, l] * W_l^(p)`.
pub fn combined_network<T: Scalar>(
    models: &[Network<T>],
    w: &CombineWeights,
) -> Result<Network<T>> {
    let first = models
        .first()
        .ok_or_else(|| NgError::InsufficientData("no models to combine".into()))?;
    for m in &models[1..] {
        ensure_same_arch(first, m)?;
    }
    if w.weights.dim() != (models.len(), first.layers.len()) {
        return Err(NgError::DimMismatch(format!(
            "weights are {:?}, expected ({}, {})",
            w.weights.dim(),
            models.len(),
            first.layers.len()
        )));
    }
    let net64 = combine_f64(first, &layers_f64(models), &w.weights);
    let layers = net64
        .layers
        .into_iter()
        .map(|l| Layer { weights: l.weights.mapv(T::from_f64), nonlinearity: l.nonlinearity })
        .collect();
    Ok(Network { layers, input_dim: first.input_dim, num_classes: first.num_classes })
}

/// Regularized tune objective and its gradient in the coefficients.
fn tune_objective(
    template: &Network<f64>,
    per_model: &[Vec<Mat<f64>>],
    c: &Array2<f64>,
    x: &Mat<f64>,
    labels: &[u32],
) -> Result<(f64, Array2<f64>)> {
    let n = x.nrows() as f64;
    let net = combine_f64(template, per_model, c);
    let bundle = backprop(&net, forward(&net, x)?, labels)?;
    let mut f = bundle.objective / n;
    let mut grad = Array2::<f64>::zeros(c.dim());
    for (l, lg) in bundle.layers.iter().enumerate() {
        let g = lg.weight_grad();
        for (p, model) in per_model.iter().enumerate() {
            grad[[p, l]] = (&g * &model[l]).sum() / n;
        }
    }
    for (gp, &cp) in grad.iter_mut().zip(c.iter()) {
        *gp -= 2.0 * COMBINE_L2 * cp;
    }
    f -= COMBINE_L2 * c.iter().map(|v| v * v).sum::<f64>();
    Ok((f, grad))
}

/// Optimizes the combination coefficients on the tune set and returns the
/// best combined model found along with its coefficients.
pub fn combine_models<T: Scalar>(
    models: &[Network<T>],
    tune_x: &Mat<T>,
    tune_labels: &[u32],
) -> Result<(Network<T>, CombineWeights)> {
    let first = models
        .first()
        .ok_or_else(|| NgError::InsufficientData("no models to combine".into()))?;
    for m in &models[1..] {
        ensure_same_arch(first, m)?;
    }
    if tune_x.nrows() == 0 {
        return Err(NgError::InsufficientData("empty tune set".into()));
    }
    if tune_labels.len() != tune_x.nrows() {
        return Err(NgError::DimMismatch(format!(
            "{} tune labels for {} samples",
            tune_labels.len(),
            tune_x.nrows()
        )));
    }
    let p = models.len();
    let l = first.layers.len();
    if p == 1 {
        // Combining one model is the identity; rescaling its layers could
        // still nudge the tune objective, but a single checkpoint should
        // pass through untouched.
        let weights = CombineWeights { weights: Array2::ones((1, l)) };
        return Ok((first.clone(), weights));
    }
    let per_model = layers_f64(models);
    let template = combine_f64(first, &per_model[..1], &Array2::ones((1, l)));
    let x64 = tune_x.mapv(|v| v.as_f64());

    let mut best_c = Array2::<f64>::ones((p, l)) / p as f64;
    let mut best_f = f64::NEG_INFINITY;
    let mut candidates: Vec<Array2<f64>> = (0..p)
        .map(|k| {
            let mut c = Array2::<f64>::zeros((p, l));
            c.row_mut(k).fill(1.0);
            c
        })
        .collect();
    candidates.push(Array2::<f64>::ones((p, l)) / p as f64);
    for c in candidates {
        let (f, _) = tune_objective(&template, &per_model, &c, &x64, tune_labels)?;
        if f > best_f {
            best_f = f;
            best_c = c;
        }
    }

    let start = Array1::from_iter(best_c.iter().copied());
    let mut seen_best = (best_f, best_c.clone());
    minimize(
        |flat| {
            let c = Array2::from_shape_vec((p, l), flat.to_vec()).expect("shape is fixed");
            let (f, g) = tune_objective(&template, &per_model, &c, &x64, tune_labels)?;
            if f > seen_best.0 {
                seen_best = (f, c);
            }
            Ok((-f, Array1::from_iter(g.iter().map(|v| -v))))
        },
        &start,
        &LbfgsOptions::default(),
    )?;
    let weights = CombineWeights { weights: seen_best.1 };
    let net = combined_network(models, &weights)?;
    Ok((net, weights))
}
