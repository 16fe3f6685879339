//! Softmax logistic regression and a two-hidden-layer ReLU MLP, trained with
//! mini-batch SGD on mean cross-entropy. Gradients are analytic; second-order
//! quantities are available for the softmax output layer, which is the whole
//! model for logistic regression and the last layer of the MLP.
//!
//! Parameter layout, for a dense layer with `m` inputs and `k` outputs:
//! weights row-major (`k x m`) followed by `k` biases. The MLP concatenates its
//! three layers input to output, so the last-layer block is the tail of theta.

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::par;

/// Largest parameter block for which a dense Hessian is materialized.
pub const MAX_DENSE_HESSIAN: usize = 2000;

/// Default Hessian damping.
pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    LogReg {
        d: usize,
        classes: usize,
    },
    Mlp {
        d: usize,
        h1: usize,
        h2: usize,
        classes: usize,
    },
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::LogReg { d, .. } | ModelSpec::Mlp { d, .. } => d,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            ModelSpec::LogReg { classes, .. } | ModelSpec::Mlp { classes, .. } => classes,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            ModelSpec::LogReg { d, classes } => (d + 1) * classes,
            ModelSpec::Mlp { d, h1, h2, classes } => {
                (d + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * classes
            }
        }
    }

    /// Width of the representation fed to the softmax layer.
    fn head_inputs(&self) -> usize {
        match *self {
            ModelSpec::LogReg { d, .. } => d,
            ModelSpec::Mlp { h2, .. } => h2,
        }
    }

    /// Parameter indices of the softmax output layer.
    pub fn last_layer(&self) -> Range<usize> {
        let p = self.n_params();
        p - (self.head_inputs() + 1) * self.n_classes()..p
    }

    pub fn block(&self, layer: LayerSelector) -> Range<usize> {
        match layer {
            LayerSelector::All => 0..self.n_params(),
            LayerSelector::LastLayer => self.last_layer(),
        }
    }

    /// (fan_in, fan_out) of each dense layer, input to output.
    fn layers(&self) -> Vec<(usize, usize)> {
        match *self {
            ModelSpec::LogReg { d, classes } => vec![(d, classes)],
            ModelSpec::Mlp { d, h1, h2, classes } => vec![(d, h1), (h1, h2), (h2, classes)],
        }
    }

    fn validate(&self) -> Result<()> {
        let dims_ok = match *self {
            ModelSpec::LogReg { d, classes } => d > 0 && classes >= 2,
            ModelSpec::Mlp { d, h1, h2, classes } => d > 0 && h1 > 0 && h2 > 0 && classes >= 2,
        };
        if dims_ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid model dimensions {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    All,
    #[default]
    LastLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn logreg_default(seed: u64) -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 500,
            batch_size: None,
            seed,
        }
    }

    pub fn mlp_default(seed: u64) -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 6000,
            batch_size: Some(32),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub theta: Vec<f64>,
    pub train_config: TrainConfig,
    pub final_train_loss: f64,
    /// Euclidean norm of the last SGD update.
    pub final_step_norm: f64,
}

impl TrainedModel {
    pub fn from_theta(spec: ModelSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.n_params() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: spec.n_params(),
                got: theta.len(),
            });
        }
        Ok(TrainedModel {
            spec,
            theta,
            train_config: TrainConfig::logreg_default(0),
            final_train_loss: f64::NAN,
            final_step_norm: f64::NAN,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let m: TrainedModel = serde_json::from_reader(std::io::BufReader::new(f))?;
        m.spec.validate()?;
        if m.theta.len() != m.spec.n_params() || m.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("checkpoint theta does not match its spec"));
        }
        Ok(m)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = forward(&self.spec, &self.theta, x).logits;
        argmax(&logits)
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> f64 {
        if ds.is_empty() {
            return f64::NAN;
        }
        let correct = (0..ds.len())
            .filter(|&i| self.predict(ds.row(i)) == ds.labels[i])
            .count();
        correct as f64 / ds.len() as f64
    }

    pub fn mean_loss(&self, ds: &LabeledDataset) -> f64 {
        mean_loss(&self.spec, &self.theta, ds)
    }

    fn check_data(&self, ds: &LabeledDataset) -> Result<()> {
        check_dims(&self.spec, ds)
    }
}

fn check_dims(spec: &ModelSpec, ds: &LabeledDataset) -> Result<()> {
    if ds.n_features() != spec.input_dim() {
        return Err(Error::Dimension {
            what: "feature count",
            expected: spec.input_dim(),
            got: ds.n_features(),
        });
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= spec.n_classes()) {
        return Err(Error::config(format!(
            "label {y} outside the model's {} classes",
            spec.n_classes()
        )));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Dense layer: `out = W a + b` with the layer's parameters in `params`.
fn dense(params: &[f64], a: &[f64], out_dim: usize) -> Vec<f64> {
    let m = a.len();
    let (w, b) = params.split_at(out_dim * m);
    (0..out_dim)
        .map(|r| {
            let row = &w[r * m..(r + 1) * m];
            row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[r]
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

struct Activations {
    /// Pre-activations and ReLU outputs of the hidden layers (empty for LogReg).
    hidden_pre: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Activations {
    fn head_input<'a>(&'a self, x: &'a [f64]) -> &'a [f64] {
        self.hidden.last().map_or(x, Vec::as_slice)
    }
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Activations {
    let layers = spec.layers();
    let mut offset = 0;
    let mut hidden_pre = Vec::new();
    let mut hidden: Vec<Vec<f64>> = Vec::new();
    let mut logits = Vec::new();
    for (li, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let len = (fan_in + 1) * fan_out;
        let input = hidden.last().map_or(x, Vec::as_slice);
        let z = dense(&theta[offset..offset + len], input, fan_out);
        offset += len;
        if li + 1 == layers.len() {
            logits = z;
        } else {
            let a = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            hidden_pre.push(z);
            hidden.push(a);
        }
    }
    Activations {
        hidden_pre,
        hidden,
        logits,
    }
}

/// Writes the gradient of a dense layer given the upstream delta into `out`
/// (layout of [`dense`]) and returns `W^T delta`.
fn dense_backward(params: &[f64], a: &[f64], delta: &[f64], out: &mut [f64], want_input_grad: bool) -> Vec<f64> {
    let m = a.len();
    let k = delta.len();
    let (gw, gb) = out.split_at_mut(k * m);
    for r in 0..k {
        let row = &mut gw[r * m..(r + 1) * m];
        for (g, &ai) in row.iter_mut().zip(a) {
            *g += delta[r] * ai;
        }
        gb[r] += delta[r];
    }
    if !want_input_grad {
        return Vec::new();
    }
    let w = &params[..k * m];
    let mut back = vec![0.0; m];
    for r in 0..k {
        for (j, b) in back.iter_mut().enumerate() {
            *b += w[r * m + j] * delta[r];
        }
    }
    back
}

/// Adds the gradient of the single-sample cross-entropy into `grad` and
/// returns the loss.
pub fn accumulate_sample_gradient(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    let act = forward(spec, theta, x);
    let loss = cross_entropy(&act.logits, y);
    let mut delta = softmax(&act.logits);
    delta[y] -= 1.0;

    let layers = spec.layers();
    let mut ends: Vec<usize> = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for &(fi, fo) in &layers {
        acc += (fi + 1) * fo;
        ends.push(acc);
    }
    for li in (0..layers.len()).rev() {
        let start = if li == 0 { 0 } else { ends[li - 1] };
        let params = &theta[start..ends[li]];
        let input = if li == 0 { x } else { &act.hidden[li - 1] };
        let back = dense_backward(params, input, &delta, &mut grad[start..ends[li]], li > 0);
        if li > 0 {
            // ReLU subgradient at 0 is 0
            delta = back
                .iter()
                .zip(&act.hidden_pre[li - 1])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
        }
    }
    loss
}

/// Gradient of the single-sample loss with respect to all parameters.
pub fn sample_gradient(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize) -> Vec<f64> {
    let mut g = vec![0.0; spec.n_params()];
    accumulate_sample_gradient(spec, theta, x, y, &mut g);
    g
}

pub fn sample_loss(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize) -> f64 {
    cross_entropy(&forward(spec, theta, x).logits, y)
}

pub fn mean_loss(spec: &ModelSpec, theta: &[f64], ds: &LabeledDataset) -> f64 {
    if ds.is_empty() {
        return f64::NAN;
    }
    let total: f64 = (0..ds.len())
        .map(|i| sample_loss(spec, theta, ds.row(i), ds.labels[i]))
        .sum();
    total / ds.len() as f64
}

fn init_theta(spec: &ModelSpec, rng: &mut impl Rng) -> Vec<f64> {
    let mut theta = Vec::with_capacity(spec.n_params());
    for (fan_in, fan_out) in spec.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            theta.push(rng.random_range(-bound..=bound));
        }
    }
    theta
}

/// Mini-batch SGD on mean cross-entropy. Deterministic given `cfg.seed`.
pub fn train(ds: &LabeledDataset, spec: ModelSpec, cfg: TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if cfg.batch_size == Some(0) {
        return Err(Error::config("batch size must be positive"));
    }
    check_dims(&spec, ds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_theta(&spec, &mut rng);
    let n = ds.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; theta.len()];
    let mut step_norm = 0.0;

    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                epoch_loss += accumulate_sample_gradient(&spec, &theta, ds.row(i), ds.labels[i], &mut grad);
            }
            let scale = cfg.lr / chunk.len() as f64;
            let mut sq = 0.0;
            for (t, g) in theta.iter_mut().zip(&grad) {
                let step = scale * g;
                *t -= step;
                sq += step * step;
            }
            step_norm = sq.sqrt();
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    let final_train_loss = mean_loss(&spec, &theta, ds);
    if !final_train_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: final_train_loss,
        });
    }
    Ok(TrainedModel {
        spec,
        theta,
        train_config: cfg,
        final_train_loss,
        final_step_norm: step_norm,
    })
}

/// Per-sample loss gradients at the trained parameters, one row per sample,
/// restricted to a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMatrix {
    pub rows: Array2<f64>,
    pub layer: LayerSelector,
    pub source: String,
}

impl GradientMatrix {
    pub fn new(rows: Array2<f64>, layer: LayerSelector, source: impl Into<String>) -> Self {
        let rows = if rows.is_standard_layout() {
            rows
        } else {
            rows.as_standard_layout().into_owned()
        };
        GradientMatrix {
            rows,
            layer,
            source: source.into(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.dim();
        &self.rows.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }

    /// Sum of all rows.
    pub fn row_sum(&self) -> Vec<f64> {
        par::sum_vectors(self.n_rows(), self.dim(), |i, acc| {
            acc.iter_mut().zip(self.row(i)).for_each(|(a, g)| *a += g)
        })
    }

    pub fn scaled(&self, c: f64) -> GradientMatrix {
        GradientMatrix::new(&self.rows * c, self.layer, self.source.clone())
    }

    /// Writes the rows as CSV with header `g0..g{p-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record((0..self.dim()).map(|k| format!("g{k}")))?;
        for i in 0..self.n_rows() {
            w.write_record(self.row(i).iter().map(|x| format!("{x:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, layer: LayerSelector) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let p = rdr.headers()?.len();
        let mut data = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for field in rec.iter() {
                data.push(field.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("row {}: non-numeric gradient entry `{field}`", n + 1),
                })?);
            }
            n += 1;
        }
        let rows = Array2::from_shape_vec((n, p), data).expect("csv enforces equal row lengths");
        Ok(GradientMatrix::new(rows, layer, path.display().to_string()))
    }
}

/// Input to the softmax layer and its class probabilities.
fn head_state(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let act = forward(spec, theta, x);
    let probs = softmax(&act.logits);
    (act.head_input(x).to_vec(), probs)
}

pub fn per_sample_gradients(m: &TrainedModel, ds: &LabeledDataset, layer: LayerSelector) -> Result<GradientMatrix> {
    m.check_data(ds)?;
    let block = m.spec.block(layer);
    let width = block.len();
    let n = ds.len();
    let mut data = vec![0.0; n * width];
    par::fill_rows(&mut data, width, |i, row| match layer {
        LayerSelector::All => {
            accumulate_sample_gradient(&m.spec, &m.theta, ds.row(i), ds.labels[i], row);
        }
        LayerSelector::LastLayer => {
            let (a, mut delta) = head_state(&m.spec, &m.theta, ds.row(i));
            delta[ds.labels[i]] -= 1.0;
            dense_backward(&[], &a, &delta, row, false);
        }
    });
    let rows = Array2::from_shape_vec((n, width), data).expect("sized above");
    Ok(GradientMatrix::new(
        rows,
        layer,
        format!("{} @ {:?}", ds.name, m.spec),
    ))
}

fn head_block(m: &TrainedModel, layer: LayerSelector) -> Result<(usize, usize)> {
    let block = m.spec.block(layer);
    if block != m.spec.last_layer() {
        return Err(Error::Unsupported(
            "second-order quantities are only available for the softmax output layer; \
             use the last_layer block for the MLP"
                .into(),
        ));
    }
    Ok((m.spec.head_inputs(), m.spec.n_classes()))
}

/// Index of weight (c, k) in the softmax-layer block; `k == m` is the bias.
#[inline]
fn head_index(c: usize, k: usize, m: usize, classes: usize) -> usize {
    if k < m {
        c * m + k
    } else {
        classes * m + c
    }
}

/// Sum of per-sample Hessians of the softmax-layer block plus `damping * I`:
/// `sum_i (diag(p_i) - p_i p_i^T) (x) a_i a_i^T` with `a_i` the layer input
/// augmented by a bias 1.
pub fn hessian(m: &TrainedModel, ds: &LabeledDataset, layer: LayerSelector, damping: f64) -> Result<DMatrix<f64>> {
    m.check_data(ds)?;
    let (inputs, classes) = head_block(m, layer)?;
    let p = (inputs + 1) * classes;
    if p > MAX_DENSE_HESSIAN {
        return Err(Error::config(format!(
            "refusing to materialize a {p}x{p} Hessian (limit {MAX_DENSE_HESSIAN})"
        )));
    }
    if !(damping >= 0.0) {
        return Err(Error::config("damping must be >= 0"));
    }
    let flat = par::sum_vectors(ds.len(), p * p, |i, acc| {
        let (mut a, probs) = head_state(&m.spec, &m.theta, ds.row(i));
        a.push(1.0);
        for c in 0..classes {
            for c2 in 0..classes {
                let curv = if c == c2 { probs[c] * (1.0 - probs[c]) } else { -probs[c] * probs[c2] };
                if curv == 0.0 {
                    continue;
                }
                for (k, &ak) in a.iter().enumerate() {
                    let r = head_index(c, k, inputs, classes);
                    for (k2, &ak2) in a.iter().enumerate() {
                        acc[r * p + head_index(c2, k2, inputs, classes)] += curv * ak * ak2;
                    }
                }
            }
        }
    });
    let mut h = DMatrix::from_row_slice(p, p, &flat);
    for i in 0..p {
        h[(i, i)] += damping;
    }
    // exact symmetry regardless of accumulation order
    let h = (&h + h.transpose()) * 0.5;
    Ok(h)
}

/// Hessian-vector product over the softmax-layer block without forming the
/// Hessian.
pub fn hvp(m: &TrainedModel, ds: &LabeledDataset, layer: LayerSelector, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    let op = HeadHvp::new(m, ds, layer, damping)?;
    if v.len() != op.dim() {
        return Err(Error::Dimension {
            what: "HVP vector",
            expected: op.dim(),
            got: v.len(),
        });
    }
    Ok(op.apply(v))
}

/// Cached softmax-layer inputs and probabilities for repeated matrix-free
/// Hessian products.
#[derive(Debug, Clone)]
pub struct HeadHvp {
    feats: Vec<(Vec<f64>, Vec<f64>)>,
    inputs: usize,
    classes: usize,
    damping: f64,
}

impl HeadHvp {
    pub fn new(m: &TrainedModel, ds: &LabeledDataset, layer: LayerSelector, damping: f64) -> Result<Self> {
        m.check_data(ds)?;
        let (inputs, classes) = head_block(m, layer)?;
        let feats = par::map_range(ds.len(), |i| {
            let (mut a, probs) = head_state(&m.spec, &m.theta, ds.row(i));
            a.push(1.0);
            (a, probs)
        });
        Ok(HeadHvp { feats, inputs, classes, damping })
    }

    pub fn dim(&self) -> usize {
        (self.inputs + 1) * self.classes
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (m, classes) = (self.inputs, self.classes);
        let p = self.dim();
        let mut out = par::sum_vectors(self.feats.len(), p, |i, acc| {
            let (a, probs) = &self.feats[i];
            // u = V a, w = (diag(p) - p p^T) u, out += w a^T
            let u: Vec<f64> = (0..classes)
                .map(|c| a.iter().enumerate().map(|(k, ak)| v[head_index(c, k, m, classes)] * ak).sum())
                .collect();
            let pu: f64 = probs.iter().zip(&u).map(|(pc, uc)| pc * uc).sum();
            for c in 0..classes {
                let w = probs[c] * (u[c] - pu);
                if w == 0.0 {
                    continue;
                }
                for (k, ak) in a.iter().enumerate() {
                    acc[head_index(c, k, m, classes)] += w * ak;
                }
            }
        });
        out.iter_mut().zip(v).for_each(|(o, vi)| *o += self.damping * vi);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_half_moons, gen_linear_blobs, inject_label_noise, NoiseSpec};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    const MLP: ModelSpec = ModelSpec::Mlp { d: 2, h1: 5, h2: 4, classes: 3 };

    fn random_theta(spec: &ModelSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..spec.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::LogReg { d: 2, classes: 2 }.n_params(), 6);
        let mlp = ModelSpec::Mlp { d: 2, h1: 16, h2: 16, classes: 2 };
        assert_eq!(mlp.n_params(), 3 * 16 + 17 * 16 + 17 * 2);
        assert_eq!(mlp.last_layer().len(), 17 * 2);
    }

    #[test]
    fn zero_parameter_logreg_gradient() {
        let spec = ModelSpec::LogReg { d: 2, classes: 2 };
        let g = sample_gradient(&spec, &[0.0; 6], &[2.0, 0.0], 1);
        // class-1 weight row, then class-1 bias
        assert_eq!(&g[2..4], &[-1.0, 0.0]);
        assert_eq!(g[5], -0.5);
        // class-0 block mirrors it
        assert_eq!(&g[0..2], &[1.0, 0.0]);
        assert_eq!(g[4], 0.5);
    }

    #[test]
    fn duplicate_samples_have_identical_rows() {
        let spec = ModelSpec::Mlp { d: 2, h1: 8, h2: 8, classes: 2 };
        let m = TrainedModel::from_theta(spec, random_theta(&spec, 1)).unwrap();
        let ds = LabeledDataset::new(
            Array2::from_shape_vec((2, 2), vec![0.3, -0.2, 0.3, -0.2]).unwrap(),
            vec![1, 1],
            2,
            None,
            "dup",
        )
        .unwrap();
        let g = per_sample_gradients(&m, &ds, LayerSelector::All).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    fn fd_matches(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize) -> std::result::Result<(), String> {
        let g = sample_gradient(spec, theta, x, y);
        let eps = 1e-5;
        for k in 0..theta.len() {
            let mut tp = theta.to_vec();
            tp[k] += eps;
            let mut tm = theta.to_vec();
            tm[k] -= eps;
            let fd = (sample_loss(spec, &tp, x, y) - sample_loss(spec, &tm, x, y)) / (2.0 * eps);
            if (fd - g[k]).abs() > 1e-4 * fd.abs().max(g[k].abs()) + 1e-7 {
                return Err(format!("param {k}: analytic {} vs fd {fd}", g[k]));
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gradients_match_central_differences(seed in any::<u64>(), x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, y in 0usize..3) {
            let logreg = ModelSpec::LogReg { d: 2, classes: 3 };
            prop_assert!(fd_matches(&logreg, &random_theta(&logreg, seed), &[x0, x1], y).is_ok());
            let r = fd_matches(&MLP, &random_theta(&MLP, seed), &[x0, x1], y);
            prop_assert!(r.is_ok(), "{:?}", r);
        }
    }

    #[test]
    fn last_layer_rows_are_subvectors() {
        let spec = ModelSpec::Mlp { d: 2, h1: 6, h2: 5, classes: 2 };
        let m = TrainedModel::from_theta(spec, random_theta(&spec, 3)).unwrap();
        let (ds, _) = gen_half_moons(20, 2, 0.1, 1).unwrap();
        let all = per_sample_gradients(&m, &ds, LayerSelector::All).unwrap();
        let last = per_sample_gradients(&m, &ds, LayerSelector::LastLayer).unwrap();
        assert_eq!(last.dim(), (5 + 1) * 2);
        let block = spec.last_layer();
        for i in 0..ds.len() {
            assert_eq!(&all.row(i)[block.clone()], last.row(i));
        }
    }

    #[test]
    fn gradient_dimension_mismatch() {
        let spec = ModelSpec::LogReg { d: 3, classes: 2 };
        let m = TrainedModel::from_theta(spec, vec![0.0; 8]).unwrap();
        let (ds, _) = gen_linear_blobs(4, 2, 0).unwrap();
        assert!(matches!(per_sample_gradients(&m, &ds, LayerSelector::All), Err(Error::Dimension { .. })));
    }

    fn blobs_model() -> (TrainedModel, LabeledDataset) {
        let (train, _) = gen_linear_blobs(40, 2, 5).unwrap();
        let train = inject_label_noise(&train, NoiseSpec { flips_per_class: 2, seed: 1 }).unwrap();
        let m = train_logreg(&train);
        (m, train)
    }

    fn train_logreg(ds: &LabeledDataset) -> TrainedModel {
        train(ds, ModelSpec::LogReg { d: 2, classes: 2 }, TrainConfig::logreg_default(3)).unwrap()
    }

    #[test]
    fn hessian_is_damped_and_symmetric() {
        let (m, ds) = blobs_model();
        let lambda = 0.01;
        let h = hessian(&m, &ds, LayerSelector::All, lambda).unwrap();
        assert_eq!(h, h.transpose());
        let min_eig = h.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= lambda * (1.0 - 1e-6), "min eigenvalue {min_eig}");
    }

    #[test]
    fn empty_contribution_is_scaled_identity() {
        let (m, ds) = blobs_model();
        let empty = ds.select(&[]);
        let h = hessian(&m, &empty, LayerSelector::All, 0.3).unwrap();
        assert_eq!(h, DMatrix::identity(6, 6) * 0.3);
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let spec = ModelSpec::Mlp { d: 2, h1: 4, h2: 3, classes: 3 };
        let m = TrainedModel::from_theta(spec, random_theta(&spec, 8)).unwrap();
        let (ds, _) = gen_half_moons(10, 2, 0.1, 2).unwrap();
        let h = hessian(&m, &ds, LayerSelector::LastLayer, 0.0).unwrap();
        let block = spec.last_layer();
        let eps = 1e-5;
        let grad_sum = |theta: &[f64]| {
            let mut g = vec![0.0; spec.n_params()];
            for i in 0..ds.len() {
                accumulate_sample_gradient(&spec, theta, ds.row(i), ds.labels[i], &mut g);
            }
            g
        };
        for (j, pj) in block.clone().enumerate() {
            let mut tp = m.theta.clone();
            tp[pj] += eps;
            let mut tm = m.theta.clone();
            tm[pj] -= eps;
            let (gp, gm) = (grad_sum(&tp), grad_sum(&tm));
            for (i, pi) in block.clone().enumerate() {
                let fd = (gp[pi] - gm[pi]) / (2.0 * eps);
                assert!((fd - h[(i, j)]).abs() < 1e-3, "H[{i},{j}] = {} vs {fd}", h[(i, j)]);
            }
        }
    }

    #[test]
    fn hessian_size_guard_and_full_mlp_refused() {
        let big = ModelSpec::LogReg { d: 1000, classes: 2 };
        let m = TrainedModel::from_theta(big, vec![0.0; big.n_params()]).unwrap();
        let ds = LabeledDataset::new(Array2::zeros((1, 1000)), vec![0], 2, None, "z").unwrap();
        assert!(matches!(hessian(&m, &ds, LayerSelector::All, 0.0), Err(Error::Config(_))));

        let mlp = ModelSpec::Mlp { d: 2, h1: 3, h2: 3, classes: 2 };
        let m = TrainedModel::from_theta(mlp, vec![0.1; mlp.n_params()]).unwrap();
        let (ds, _) = gen_half_moons(4, 2, 0.1, 0).unwrap();
        assert!(matches!(hessian(&m, &ds, LayerSelector::All, 0.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let (m, ds) = blobs_model();
        let h = hessian(&m, &ds, LayerSelector::All, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv1 = hvp(&m, &ds, LayerSelector::All, &v1, 0.01).unwrap();
        let dense = &h * nalgebra::DVector::from_column_slice(&v1);
        for i in 0..6 {
            assert!((hv1[i] - dense[i]).abs() < 1e-8);
        }
        let hv2 = hvp(&m, &ds, LayerSelector::All, &v2, 0.01).unwrap();
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let hsum = hvp(&m, &ds, LayerSelector::All, &sum, 0.01).unwrap();
        for i in 0..6 {
            assert!((hsum[i] - hv1[i] - hv2[i]).abs() < 1e-8);
        }
        assert_eq!(hvp(&m, &ds, LayerSelector::All, &[0.0; 6], 0.01).unwrap(), vec![0.0; 6]);
        assert!(hvp(&m, &ds, LayerSelector::All, &[0.0; 5], 0.01).is_err());
    }

    #[test]
    fn single_class_data_is_fit_perfectly() {
        let (ds, _) = gen_linear_blobs(20, 2, 0).unwrap();
        let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 1).collect();
        let ones = ds.select(&keep);
        let m = train_logreg(&ones);
        assert_eq!(m.accuracy(&ones), 1.0);
    }

    #[test]
    fn logreg_separates_clean_blobs() {
        let (train, test) = gen_linear_blobs(150, 100, 7).unwrap();
        let m = train_logreg(&train);
        assert_eq!(m.accuracy(&test), 1.0);
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_config() {
        let (train_ds, _) = gen_half_moons(40, 2, 0.1, 0).unwrap();
        let spec = ModelSpec::Mlp { d: 2, h1: 4, h2: 4, classes: 2 };
        let cfg = TrainConfig { lr: 0.05, epochs: 20, batch_size: Some(8), seed: 1 };
        assert_eq!(train(&train_ds, spec, cfg).unwrap(), train(&train_ds, spec, cfg).unwrap());
        assert!(train(&train_ds, spec, TrainConfig { lr: 0.0, ..cfg }).is_err());
        assert!(train(&train_ds.select(&[]), spec, cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (train_ds, _) = gen_linear_blobs(20, 2, 0).unwrap();
        let cfg = TrainConfig { lr: 1e308, epochs: 5, batch_size: None, seed: 0 };
        let err = train(&train_ds, ModelSpec::LogReg { d: 2, classes: 2 }, cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn mlp_mean_gradient_is_near_stationary() {
        let (train_ds, _) = gen_half_moons(250, 2, 0.1, 1).unwrap();
        let spec = ModelSpec::Mlp { d: 2, h1: 16, h2: 16, classes: 2 };
        let m = train(&train_ds, spec, TrainConfig::mlp_default(0)).unwrap();
        let g = per_sample_gradients(&m, &train_ds, LayerSelector::All).unwrap();
        let mean: Vec<f64> = g.row_sum().iter().map(|s| s / train_ds.len() as f64).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 10.0 * m.final_step_norm, "{norm} vs step {}", m.final_step_norm);
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let (m, _) = blobs_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path).unwrap();
        assert_eq!(TrainedModel::load_json(&path).unwrap(), m);
    }
}
