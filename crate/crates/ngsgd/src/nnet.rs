//! Feedforward classification networks.
//!
//! A network is a stack of weight matrices with the bias folded in as a last
//! column (inputs get a constant-1 column appended before each matrix), each
//! followed by a nonlinearity, ending in a softmax over class log-odds. The
//! training objective is the sum (not mean) of per-sample log-probabilities
//! of the correct class, and everything downstream maximizes it, so the
//! derivatives here are plain gradients with no sign flip.
//!
//! `backprop` deliberately exposes, for every weight matrix `W_i`, the pair
//! of factors the preconditioners consume: `y_in` (the matrix of inputs that
//! `W_i` acts on, bias column included) and `x_deriv` (the objective
//! derivative at `W_i`'s output), such that the raw gradient w.r.t. `W_i` is
//! exactly `x_deriv^T y_in`.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NgError, Result};
use crate::linalg::{self, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Nonlinearity {
    Relu,
    /// Groups of `group` consecutive units reduced to their p-norm.
    PNorm { p: f64, group: usize },
    Softmax,
    Identity,
}

impl Nonlinearity {
    fn tag(&self) -> u8 {
        match self {
            Nonlinearity::Relu => 0,
            Nonlinearity::PNorm { .. } => 1,
            Nonlinearity::Softmax => 2,
            Nonlinearity::Identity => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer<T: Scalar> {
    /// D_out x (D_in + 1), bias as the last column.
    pub weights: Mat<T>,
    pub nonlinearity: Nonlinearity,
}

impl<T: Scalar> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    /// Rows of the weight matrix (width before any group reduction).
    pub fn raw_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Width of the layer's output after the nonlinearity.
    pub fn out_width(&self) -> usize {
        match self.nonlinearity {
            Nonlinearity::PNorm { group, .. } => self.weights.nrows() / group,
            _ => self.weights.nrows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub layers: Vec<Layer<T>>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl<T: Scalar> Network<T> {
    /// Checks the dimension chain, finiteness, and softmax placement.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NgError::ArchMismatch("network has no layers".into()));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_dim() != width {
                return Err(NgError::ArchMismatch(format!(
                    "layer {i} expects input width {} but gets {width}",
                    layer.in_dim()
                )));
            }
            if let Nonlinearity::PNorm { p, group } = layer.nonlinearity {
                if group == 0 || layer.weights.nrows() % group != 0 {
                    return Err(NgError::ArchMismatch(format!(
                        "layer {i}: {} rows not divisible by group {group}",
                        layer.weights.nrows()
                    )));
                }
                if !(p.is_finite() && p >= 1.0) {
                    return Err(NgError::InvalidArg(format!("layer {i}: p-norm p = {p}")));
                }
            }
            if matches!(layer.nonlinearity, Nonlinearity::Softmax) && i + 1 != self.layers.len() {
                return Err(NgError::ArchMismatch(format!(
                    "softmax at layer {i} is not the final layer"
                )));
            }
            if !linalg::all_finite(&layer.weights) {
                return Err(NgError::NonFinite(format!("layer {i} weights are non-finite")));
            }
            width = layer.out_width();
        }
        let last = self.layers.last().unwrap();
        if !matches!(last.nonlinearity, Nonlinearity::Softmax) {
            return Err(NgError::ArchMismatch("final layer is not softmax".into()));
        }
        if width != self.num_classes {
            return Err(NgError::ArchMismatch(format!(
                "final width {width} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }
}

/// Builds a net with hidden dims `dims[1..len-1]`, input width `dims[0]`,
/// and `dims[len-1]` classes. Hidden weights are i.i.d. Gaussian with stddev
/// 1/sqrt(fan-in) where fan-in counts the bias column; the final softmax
/// layer starts at exactly zero.
pub fn init_network<T: Scalar>(
    dims: &[usize],
    hidden: &Nonlinearity,
    seed: u64,
) -> Result<Network<T>> {
    if dims.len() < 2 {
        return Err(NgError::InvalidArg("need at least input and output dims".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(NgError::InvalidArg("zero layer dimension".into()));
    }
    if matches!(hidden, Nonlinearity::Softmax) {
        return Err(NgError::InvalidArg("softmax is reserved for the final layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 2 {
        layers.push(random_hidden_layer(dims[i], dims[i + 1], hidden, &mut rng)?);
    }
    let penult = dims[dims.len() - 2];
    let classes = dims[dims.len() - 1];
    layers.push(Layer {
        weights: Array2::zeros((classes, penult + 1)),
        nonlinearity: Nonlinearity::Softmax,
    });
    let net = Network { layers, input_dim: dims[0], num_classes: classes };
    net.validate()?;
    Ok(net)
}

fn random_hidden_layer<T: Scalar>(
    in_dim: usize,
    out_dim: usize,
    nonlinearity: &Nonlinearity,
    rng: &mut ChaCha8Rng,
) -> Result<Layer<T>> {
    let rows = match *nonlinearity {
        Nonlinearity::PNorm { group, .. } => {
            if group == 0 {
                return Err(NgError::InvalidArg("p-norm group must be positive".into()));
            }
            out_dim * group
        }
        _ => out_dim,
    };
    let fan_in = in_dim + 1;
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    let weights = Array2::from_shape_fn((rows, fan_in), |_| T::from_f64(dist.sample(rng)));
    Ok(Layer { weights, nonlinearity: nonlinearity.clone() })
}

/// Removes the final softmax, stacks one more randomly initialized hidden
/// layer (same nonlinearity as the top hidden layer, ReLU when there is
/// none), and puts back a fresh zero softmax.
pub fn add_hidden_layer<T: Scalar>(
    net: &Network<T>,
    new_dim: usize,
    seed: u64,
) -> Result<Network<T>> {
    if net.layers.is_empty() {
        return Err(NgError::ArchMismatch("network has no layers".into()));
    }
    if !matches!(net.layers.last().unwrap().nonlinearity, Nonlinearity::Softmax) {
        return Err(NgError::ArchMismatch("final layer is not softmax".into()));
    }
    if new_dim == 0 {
        return Err(NgError::InvalidArg("zero layer dimension".into()));
    }
    let mut layers: Vec<Layer<T>> = net.layers[..net.layers.len() - 1].to_vec();
    let in_width = layers.last().map_or(net.input_dim, |l| l.out_width());
    let nonlin = layers
        .last()
        .map_or(Nonlinearity::Relu, |l| l.nonlinearity.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layers.push(random_hidden_layer(in_width, new_dim, &nonlin, &mut rng)?);
    layers.push(Layer {
        weights: Array2::zeros((net.num_classes, new_dim + 1)),
        nonlinearity: Nonlinearity::Softmax,
    });
    let grown = Network { layers, input_dim: net.input_dim, num_classes: net.num_classes };
    grown.validate()?;
    Ok(grown)
}

struct LayerActs<T: Scalar> {
    y_in: Mat<T>,
    pre: Mat<T>,
}

pub struct Activations<T: Scalar> {
    layers: Vec<LayerActs<T>>,
    pub log_probs: Mat<T>,
}

fn append_ones<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let (n, d) = x.dim();
    let mut out = Array2::from_elem((n, d + 1), T::one());
    out.slice_mut(s![.., ..d]).assign(x);
    out
}

fn log_softmax<T: Scalar>(pre: &Mat<T>) -> Mat<T> {
    let mut out = pre.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn pnorm_forward<T: Scalar>(pre: &Mat<T>, p: f64, group: usize) -> Mat<T> {
    let (n, rows) = pre.dim();
    let width = rows / group;
    let pf = T::from_f64(p);
    Array2::from_shape_fn((n, width), |(i, j)| {
        let mut acc = T::zero();
        for g in 0..group {
            acc += pre[[i, j * group + g]].abs().powf(pf);
        }
        acc.powf(T::one() / pf)
    })
}

/// Runs the net on `x` (one sample per row), retaining what backprop needs.
pub fn forward<T: Scalar>(net: &Network<T>, x: &Mat<T>) -> Result<Activations<T>> {
    if x.ncols() != net.input_dim {
        return Err(NgError::DimMismatch(format!(
            "input has width {} but network expects {}",
            x.ncols(),
            net.input_dim
        )));
    }
    if !matches!(
        net.layers.last().map(|l| &l.nonlinearity),
        Some(Nonlinearity::Softmax)
    ) {
        return Err(NgError::ArchMismatch("final layer is not softmax".into()));
    }
    let mut cur = x.to_owned();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut log_probs = None;
    for layer in &net.layers {
        let y_in = append_ones(&cur);
        let pre = y_in.dot(&layer.weights.t());
        cur = match layer.nonlinearity {
            Nonlinearity::Relu => pre.mapv(|v| v.max(T::zero())),
            Nonlinearity::Identity => pre.clone(),
            Nonlinearity::PNorm { p, group } => pnorm_forward(&pre, p, group),
            Nonlinearity::Softmax => {
                let lp = log_softmax(&pre);
                log_probs = Some(lp.clone());
                lp
            }
        };
        layers.push(LayerActs { y_in, pre });
    }
    Ok(Activations { layers, log_probs: log_probs.unwrap() })
}

#[derive(Debug)]
pub struct LayerGrads<T: Scalar> {
    /// N x (D_in + 1): what the weight matrix multiplied.
    pub y_in: Mat<T>,
    /// N x D_out: objective derivative at the weight matrix's output.
    pub x_deriv: Mat<T>,
}

impl<T: Scalar> LayerGrads<T> {
    /// Raw objective gradient w.r.t. the layer's weight matrix.
    pub fn weight_grad(&self) -> Mat<T> {
        self.x_deriv.t().dot(&self.y_in)
    }
}

#[derive(Debug)]
pub struct BackpropBundle<T: Scalar> {
    /// One entry per layer, bottom-up, aligned with `Network::layers`.
    pub layers: Vec<LayerGrads<T>>,
    /// Sum over the minibatch of log p(label | input).
    pub objective: f64,
}

fn nonlin_backward<T: Scalar>(
    nonlinearity: &Nonlinearity,
    pre: &Mat<T>,
    grad_out: &Mat<T>,
) -> Mat<T> {
    match *nonlinearity {
        Nonlinearity::Relu => {
            let mut g = grad_out.clone();
            g.zip_mut_with(pre, |gv, &pv| {
                if pv <= T::zero() {
                    *gv = T::zero();
                }
            });
            g
        }
        Nonlinearity::Identity => grad_out.clone(),
        Nonlinearity::PNorm { p, group } => {
            let y = pnorm_forward(pre, p, group);
            let (n, rows) = pre.dim();
            let pf = T::from_f64(p);
            Array2::from_shape_fn((n, rows), |(i, k)| {
                let j = k / group;
                let yv = y[[i, j]];
                if yv == T::zero() {
                    T::zero()
                } else {
                    let xg = pre[[i, k]];
                    grad_out[[i, j]] * xg * xg.abs().powf(pf - T::from_f64(2.0))
                        / yv.powf(pf - T::one())
                }
            })
        }
        Nonlinearity::Softmax => unreachable!("softmax handled at the objective"),
    }
}

/// Backpropagates the summed log-probability objective. Consumes the
/// activations; their stored inputs move into the returned bundle.
pub fn backprop<T: Scalar>(
    net: &Network<T>,
    acts: Activations<T>,
    labels: &[u32],
) -> Result<BackpropBundle<T>> {
    let n = acts.log_probs.nrows();
    if labels.len() != n {
        return Err(NgError::DimMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    for &l in labels {
        if l as usize >= net.num_classes {
            return Err(NgError::LabelOutOfRange { label: l, num_classes: net.num_classes });
        }
    }
    let mut objective = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        objective += acts.log_probs[[i, l as usize]].as_f64();
    }

    // d objective / d logits = onehot - softmax.
    let mut x_deriv = acts.log_probs.mapv(|v| -v.exp());
    for (i, &l) in labels.iter().enumerate() {
        x_deriv[[i, l as usize]] += T::one();
    }

    let num_layers = net.layers.len();
    let mut x_derivs: Vec<Option<Mat<T>>> = (0..num_layers).map(|_| None).collect();
    x_derivs[num_layers - 1] = Some(x_deriv);
    for i in (0..num_layers - 1).rev() {
        let upper = x_derivs[i + 1].as_ref().unwrap();
        let full = upper.dot(&net.layers[i + 1].weights);
        let grad_out = full.slice(s![.., ..full.ncols() - 1]).to_owned();
        x_derivs[i] = Some(nonlin_backward(
            &net.layers[i].nonlinearity,
            &acts.layers[i].pre,
            &grad_out,
        ));
    }

    let layers = acts
        .layers
        .into_iter()
        .zip(x_derivs.into_iter())
        .map(|(la, xd)| LayerGrads { y_in: la.y_in, x_deriv: xd.unwrap() })
        .collect();
    Ok(BackpropBundle { layers, objective })
}

const MODEL_MAGIC: &[u8; 4] = b"NGNN";
const MODEL_VERSION: u32 = 1;
const MAX_LAYER_ELEMS: u64 = 1 << 30;

/// Writes the versioned binary model format: magic, version, layer count,
/// input width and class count, one descriptor per layer
/// {rows, cols, tag, p, group}, then each layer's weights as row-major
/// single-precision little-endian.
pub fn write_model<T: Scalar, W: Write>(net: &Network<T>, mut w: W) -> Result<()> {
    net.validate()?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    w.write_all(&(net.input_dim as u32).to_le_bytes())?;
    w.write_all(&(net.num_classes as u32).to_le_bytes())?;
    for layer in &net.layers {
        let (rows, cols) = layer.weights.dim();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        w.write_all(&[layer.nonlinearity.tag()])?;
        let (p, group) = match layer.nonlinearity {
            Nonlinearity::PNorm { p, group } => (p as f32, group as u32),
            _ => (0.0, 1),
        };
        w.write_all(&p.to_le_bytes())?;
        w.write_all(&group.to_le_bytes())?;
    }
    for layer in &net.layers {
        for &v in layer.weights.iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<T: Scalar, R: Read>(mut r: R) -> Result<Network<T>> {
    let mut u32buf = [0u8; 4];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NgError::Format("not a model file (bad magic)".into()));
    }
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != MODEL_VERSION {
        return Err(NgError::Format(format!("unsupported model version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let num_layers = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let input_dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let num_classes = u32::from_le_bytes(u32buf) as usize;
    if num_layers == 0 || num_layers > 1024 {
        return Err(NgError::Format(format!("implausible layer count {num_layers}")));
    }
    let mut descs = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        r.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        r.read_exact(&mut u32buf)?;
        let p = f32::from_le_bytes(u32buf) as f64;
        r.read_exact(&mut u32buf)?;
        let group = u32::from_le_bytes(u32buf) as usize;
        if rows == 0 || cols == 0 || (rows as u64) * (cols as u64) > MAX_LAYER_ELEMS {
            return Err(NgError::Format(format!("implausible layer shape {rows}x{cols}")));
        }
        let nonlinearity = match tag[0] {
            0 => Nonlinearity::Relu,
            1 => Nonlinearity::PNorm { p, group },
            2 => Nonlinearity::Softmax,
            3 => Nonlinearity::Identity,
            t => return Err(NgError::Format(format!("unknown nonlinearity tag {t}"))),
        };
        descs.push((rows, cols, nonlinearity));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for (rows, cols, nonlinearity) in descs {
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        let weights = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let off = (i * cols + j) * 4;
            T::from_f64(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64)
        });
        layers.push(Layer { weights, nonlinearity });
    }
    let net = Network { layers, input_dim, num_classes };
    net.validate()?;
    Ok(net)
}

pub fn save_model<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(net, &mut f)?;
    f.into_inner().map_err(|e| NgError::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(f)
}

/// Mean per-sample log-probability of the labels, for evaluation.
pub fn mean_log_prob<T: Scalar>(net: &Network<T>, x: &Mat<T>, labels: &[u32]) -> Result<f64> {
    let acts = forward(net, x)?;
    if labels.len() != x.nrows() {
        return Err(NgError::DimMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            x.nrows()
        )));
    }
    let mut total = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= net.num_classes {
            return Err(NgError::LabelOutOfRange { label: l, num_classes: net.num_classes });
        }
        total += acts.log_probs[[i, l as usize]].as_f64();
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Fraction of samples whose argmax log-probability matches the label.
pub fn accuracy<T: Scalar>(net: &Network<T>, x: &Mat<T>, labels: &[u32]) -> Result<f64> {
    let acts = forward(net, x)?;
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row = acts.log_probs.index_axis(Axis(0), i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == l as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}
