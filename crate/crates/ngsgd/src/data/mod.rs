//! Labeled datasets: synthetic generation, CSV import, compressed block
//! storage, and input normalization.

pub mod blocks;
pub mod lda;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::error::{NgError, Result};
use crate::linalg::{self, Mat};

pub use blocks::{
    block_index, load_block, randomize_blocks, read_block, save_block, write_block, ExampleBlock,
};
pub use lda::{apply_transform, compute_input_transform, NormalizationTransform};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Mat<f64>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.num_samples() {
            return Err(NgError::DimMismatch(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.num_samples()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(NgError::LabelOutOfRange { label: bad, num_classes: self.num_classes });
        }
        if !linalg::all_finite(&self.features) {
            return Err(NgError::NonFinite("dataset features".into()));
        }
        Ok(())
    }
}

/// Gaussian blobs: one unit-variance cluster per class, class means drawn
/// uniformly on the sphere of radius `separation`, labels near-uniform.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    num_samples: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(NgError::InvalidArg("need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(NgError::InvalidArg("need dimension >= 2".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(NgError::InvalidArg("separation must be a nonnegative real".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Array2::<f64>::zeros((num_classes, dim));
    for mut row in means.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v * separation / norm);
                break;
            }
        }
    }
    let mut features = Array2::<f64>::zeros((num_samples, dim));
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let class = rng.gen_range(0..num_classes) as u32;
        labels.push(class);
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[i, j]] = means[[class as usize, j]] + noise;
        }
    }
    Ok(Dataset { features, labels, num_classes })
}

/// Reads a dataset from CSV: header row, a column named `label` holding
/// class indices, every other column a numeric feature.
pub fn read_csv_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| NgError::Format("csv has no 'label' column".into()))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(NgError::Format("csv has no feature columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(NgError::Format(format!(
                "csv row {line} has {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        let mut feats = Vec::with_capacity(dim);
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                labels.push(field.trim().parse::<u32>().map_err(|_| {
                    NgError::Format(format!("csv row {line}: bad label {field:?}"))
                })?);
            } else {
                feats.push(field.trim().parse::<f64>().map_err(|_| {
                    NgError::Format(format!("csv row {line}: bad number {field:?}"))
                })?);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(NgError::InsufficientData("csv has no data rows".into()));
    }
    let num_classes = labels.iter().copied().max().unwrap() as usize + 1;
    let mut features = Array2::<f64>::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    let data = Dataset { features, labels, num_classes: num_classes.max(2) };
    data.validate()?;
    Ok(data)
}
