//! Compressed minibatch-block storage.
//!
//! Features are quantized per column to 8 bits over the block's own
//! [min, max], so each stored example costs one byte per feature plus its
//! label. A column's codebook is the pair (min, range); a byte b decodes
//! to min + b * range / 255, which bounds the decode error by range / 510.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{NgError, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

const BLOCK_MAGIC: &[u8; 4] = b"NGEX";
const BLOCK_VERSION: u32 = 1;

/// One quantized block of labeled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBlock {
    pub num_classes: u32,
    pub col_min: Vec<f32>,
    pub col_range: Vec<f32>,
    pub labels: Vec<u32>,
    pub bytes: Vec<u8>,
}

impl ExampleBlock {
    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.col_min.len()
    }

    pub fn encode(features: ArrayView2<f64>, labels: &[u32], num_classes: u32) -> Result<Self> {
        let (n, dim) = features.dim();
        if n == 0 || dim == 0 {
            return Err(NgError::InsufficientData("empty block".into()));
        }
        if labels.len() != n {
            return Err(NgError::DimMismatch(format!(
                "{} labels for {n} examples",
                labels.len()
            )));
        }
        let mut col_min = Vec::with_capacity(dim);
        let mut col_range = Vec::with_capacity(dim);
        for j in 0..dim {
            let col = features.column(j);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in col.iter() {
                if !v.is_finite() {
                    return Err(NgError::NonFinite(format!("feature column {j}")));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
            // Nudge the stored f32 codebook so [min, min + range] still
            // covers the true [lo, hi] after rounding to single precision.
            let mut min = lo as f32;
            while (min as f64) > lo {
                min = f32::from_bits(if min > 0.0 { min.to_bits() - 1 } else { min.to_bits() + 1 });
            }
            let mut range = ((hi - min as f64) as f32).max(0.0);
            while ((min as f64) + (range as f64)) < hi {
                range = f32::from_bits(range.to_bits() + 1).max(f32::MIN_POSITIVE);
            }
            col_min.push(min);
            col_range.push(range);
        }
        let mut bytes = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                let range = col_range[j] as f64;
                let b = if range == 0.0 {
                    0.0
                } else {
                    ((features[[i, j]] - col_min[j] as f64) * 255.0 / range).round()
                };
                bytes.push(b.clamp(0.0, 255.0) as u8);
            }
        }
        Ok(ExampleBlock { num_classes, col_min, col_range, labels: labels.to_vec(), bytes })
    }

    pub fn decode<T: Scalar>(&self) -> (Mat<T>, Vec<u32>) {
        let n = self.num_examples();
        let dim = self.feature_dim();
        let mut out = Mat::<T>::zeros((n, dim));
        for i in 0..n {
            for j in 0..dim {
                let b = self.bytes[i * dim + j] as f64;
                let v = self.col_min[j] as f64 + b * self.col_range[j] as f64 / 255.0;
                out[[i, j]] = T::from_f64(v);
            }
        }
        (out, self.labels.clone())
    }
}

/// Index of the block handed to worker `n` at within-epoch iteration `m`.
pub fn block_index(n: usize, m: usize, n_jobs: usize) -> usize {
    m * n_jobs + n
}

/// Shuffles the dataset once with the given seed and splits it into
/// `n_jobs * m_per_epoch` contiguous blocks whose sizes differ by at most
/// one (earlier blocks take the remainder). Every epoch reuses the same
/// blocks in the same order.
pub fn randomize_blocks(
    data: &Dataset,
    n_jobs: usize,
    m_per_epoch: usize,
    seed: u64,
) -> Result<Vec<ExampleBlock>> {
    data.validate()?;
    if n_jobs == 0 || m_per_epoch == 0 {
        return Err(NgError::InvalidArg("n_jobs and m_per_epoch must be positive".into()));
    }
    let n = data.num_samples();
    let num_blocks = n_jobs * m_per_epoch;
    if n < num_blocks {
        return Err(NgError::InsufficientData(format!(
            "{n} samples cannot fill {num_blocks} blocks"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let base = n / num_blocks;
    let remainder = n % num_blocks;
    let dim = data.dim();
    let mut blocks = Vec::with_capacity(num_blocks);
    let mut start = 0usize;
    for k in 0..num_blocks {
        let size = base + usize::from(k < remainder);
        let idx = &perm[start..start + size];
        start += size;
        let mut features = Mat::<f64>::zeros((size, dim));
        let mut labels = Vec::with_capacity(size);
        for (row, &i) in idx.iter().enumerate() {
            features.row_mut(row).assign(&data.features.row(i));
            labels.push(data.labels[i]);
        }
        blocks.push(ExampleBlock::encode(features.view(), &labels, data.num_classes as u32)?);
    }
    Ok(blocks)
}

pub fn write_block<W: Write>(block: &ExampleBlock, mut w: W) -> Result<()> {
    w.write_all(BLOCK_MAGIC)?;
    w.write_all(&BLOCK_VERSION.to_le_bytes())?;
    w.write_all(&(block.num_examples() as u32).to_le_bytes())?;
    w.write_all(&(block.feature_dim() as u32).to_le_bytes())?;
    w.write_all(&block.num_classes.to_le_bytes())?;
    for j in 0..block.feature_dim() {
        w.write_all(&block.col_min[j].to_le_bytes())?;
        w.write_all(&block.col_range[j].to_le_bytes())?;
    }
    let dim = block.feature_dim();
    for (i, &label) in block.labels.iter().enumerate() {
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&block.bytes[i * dim..(i + 1) * dim])?;
    }
    Ok(())
}

pub fn read_block<R: Read>(mut r: R) -> Result<ExampleBlock> {
    let mut u32buf = [0u8; 4];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOCK_MAGIC {
        return Err(NgError::Format("not a block file (bad magic)".into()));
    }
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != BLOCK_VERSION {
        return Err(NgError::Format(format!("unsupported block version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let num_classes = u32::from_le_bytes(u32buf);
    if n == 0 || dim == 0 || num_classes < 2 {
        return Err(NgError::Format("bad block header".into()));
    }
    if n.saturating_mul(dim) > (1usize << 31) {
        return Err(NgError::Format("block too large".into()));
    }
    let mut col_min = Vec::with_capacity(dim);
    let mut col_range = Vec::with_capacity(dim);
    for _ in 0..dim {
        r.read_exact(&mut u32buf)?;
        col_min.push(f32::from_le_bytes(u32buf));
        r.read_exact(&mut u32buf)?;
        col_range.push(f32::from_le_bytes(u32buf));
    }
    if !col_min.iter().chain(col_range.iter()).all(|v| v.is_finite()) {
        return Err(NgError::Format("non-finite block codebook".into()));
    }
    let mut labels = Vec::with_capacity(n);
    let mut bytes = vec![0u8; n * dim];
    for i in 0..n {
        r.read_exact(&mut u32buf)?;
        let label = u32::from_le_bytes(u32buf);
        if label >= num_classes {
            return Err(NgError::Format(format!("label {label} out of range")));
        }
        labels.push(label);
        r.read_exact(&mut bytes[i * dim..(i + 1) * dim])?;
    }
    Ok(ExampleBlock { num_classes, col_min, col_range, labels, bytes })
}

pub fn save_block(block: &ExampleBlock, path: &Path) -> Result<()> {
    write_block(block, BufWriter::new(File::create(path)?))
}

pub fn load_block(path: &Path) -> Result<ExampleBlock> {
    read_block(BufReader::new(File::open(path)?))
}
