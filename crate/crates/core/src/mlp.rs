//! Fully connected network mapping normalized conditions to protocol
//! parameters, with Adam training and a small binary model format.
//!
//! Inference runs row by row with a fixed accumulation order, so a batch
//! gives bit-identical results to the same rows evaluated one at a time.
//! Training uses matrix products for speed, on standardized inputs; the
//! standardization is folded into the first layer of the returned model.

use std::cell::Cell;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{normalize, DatasetError, TrainingSet};
use crate::keyrate::{key_rate, ExperimentParams, ProtocolParams};

pub const MAGIC: &[u8; 4] = b"QMLP";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DIMS: [usize; 4] = [4, 400, 200, 6];
pub const MIN_TRAINING_ROWS: usize = 100;
/// Margin kept between repaired parameters and the edges of (0, 1).
pub const REPAIR_MARGIN: f64 = 1e-4;

thread_local! {
    static FORWARD_ROWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of rows pushed through inference on the calling thread.
pub fn forward_rows_on_thread() -> u64 {
    FORWARD_ROWS.with(|c| c.get())
}

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("expected input of length {expected}, got {got}")]
    InputDimension { expected: usize, got: usize },
    #[error("dataset has {rows} rows, at least {min} are needed")]
    DatasetTooSmall { rows: usize, min: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Self::Relu => 0,
            Self::Sigmoid => 1,
            Self::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Relu),
            1 => Some(Self::Sigmoid),
            2 => Some(Self::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sigmoid => a * (1.0 - a),
            Self::Identity => 1.0,
        }
    }
}

/// Weights are stored `[inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
}

impl MlpModel {
    /// He-initialized ReLU network with a sigmoid output layer.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let (activation, gain) = if i == last {
                    (Activation::Sigmoid, 1.0)
                } else {
                    (Activation::Relu, 2.0)
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                Layer {
                    weights: Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng)),
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    /// Rewrite the first layer so that the model applied to `x` equals the
    /// old model applied to `(x - offset) / scale`.
    pub fn fold_input_scaling(&mut self, offset: &Array1<f64>, scale: &Array1<f64>) {
        let first = &mut self.layers[0];
        for (k, mut row) in first.weights.outer_iter_mut().enumerate() {
            row /= scale[k];
            first.bias.scaled_add(-offset[k], &row);
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.bias.len()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        FORWARD_ROWS.with(|c| c.set(c.get() + 1));
        let mut input = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            z.clear();
            z.extend(layer.bias.iter());
            for (k, &xk) in input.iter().enumerate() {
                let row = layer.weights.row(k);
                for (zj, &w) in z.iter_mut().zip(row.iter()) {
                    *zj += xk * w;
                }
            }
            for zj in z.iter_mut() {
                *zj = layer.activation.apply(*zj);
            }
            std::mem::swap(&mut input, &mut z);
        }
        out.copy_from_slice(&input);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::InputDimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim()];
        self.forward_row(x, &mut out);
        Ok(out)
    }

    /// One output row per input row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, MlpError> {
        if x.ncols() != self.input_dim() {
            return Err(MlpError::InputDimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (row, mut o) in x.outer_iter().zip(out.outer_iter_mut()) {
            let input: Vec<f64> = row.iter().copied().collect();
            self.forward_row(&input, o.as_slice_mut().unwrap());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.parameter_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for d in self.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            buf.push(layer.activation.tag());
        }
        for layer in &self.layers {
            for w in layer.weights.iter() {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            for b in layer.bias.iter() {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MlpError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MlpError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(MlpError::Format(format!("unsupported version {version}")));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(MlpError::Format(format!(
                "implausible layer count {n_layers}"
            )));
        }
        let dims: Vec<usize> = (0..=n_layers)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        if dims.contains(&0) {
            return Err(MlpError::Format("zero-width layer".into()));
        }
        let activations: Vec<Activation> = (0..n_layers)
            .map(|_| {
                let tag = r.take(1)?[0];
                Activation::from_tag(tag)
                    .ok_or_else(|| MlpError::Format(format!("unknown activation {tag}")))
            })
            .collect::<Result<_, _>>()?;
        let mut layers = Vec::with_capacity(n_layers);
        for (w, activation) in dims.windows(2).zip(activations) {
            let weights = r.f64s(w[0] * w[1])?;
            let bias = r.f64s(w[1])?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((w[0], w[1]), weights).unwrap(),
                bias: Array1::from_vec(bias),
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(MlpError::Format("trailing bytes".into()));
        }
        if layers.iter().any(|l| {
            l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
        }) {
            return Err(MlpError::Format("non-finite weight".into()));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MlpError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MlpError::Format("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MlpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, MlpError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| MlpError::Format("overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Per-layer gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }
}

/// Mean squared error over all outputs of the batch, and its gradient.
pub fn loss_and_gradient(
    model: &MlpModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> (f64, Gradients) {
    assert_eq!(x.nrows(), y.nrows());
    assert_eq!(y.ncols(), model.output_dim());
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut a = x.to_owned();
    for layer in &model.layers {
        let z = a.dot(&layer.weights) + &layer.bias;
        let next = z.mapv(|v| layer.activation.apply(v));
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    let diff = &a - &y;
    let scale = 1.0 / diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;

    let mut grads = Gradients::zeros_like(model);
    let mut delta = diff * (2.0 * scale);
    let mut out = a;
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        ndarray::Zip::from(&mut delta)
            .and(&pre[l])
            .and(&out)
            .for_each(|d, &z, &o| *d *= layer.activation.derivative(z, o));
        grads.weights[l] = inputs[l].t().dot(&delta);
        grads.bias[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            delta = delta.dot(&layer.weights.t());
            out = inputs[l].clone();
        }
    }
    (loss, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size reached at the last epoch, as a fraction of
    /// `learning_rate`, following a cosine schedule. 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 16,
            learning_rate: 5e-3,
            final_lr_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step size used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |msg: &str| Err(MlpError::InvalidConfig(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Adam first and second moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &MlpModel) -> Self {
        let sizes: Vec<usize> = model
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self::new(&sizes)
    }

    /// One bias-corrected Adam update of `params` given `grads`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], config: &TrainConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
            }
        }
    }
}

pub fn adam_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * model.layers.len());
    for layer in model.layers.iter_mut() {
        params.push(layer.weights.as_slice_mut().expect("standard layout"));
        params.push(layer.bias.as_slice_mut().expect("standard layout"));
    }
    let mut g: Vec<&[f64]> = Vec::with_capacity(params.len());
    for (w, b) in grads.weights.iter().zip(&grads.bias) {
        g.push(w.as_slice().expect("standard layout"));
        g.push(b.as_slice().expect("standard layout"));
    }
    state.update(&mut params, &g, config);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_rows: usize,
    pub validation_rows: usize,
}

impl TrainingHistory {
    pub fn best_validation_loss(&self) -> f64 {
        self.epochs
            .iter()
            .map(|r| r.validation_loss)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.9e},{:.9e}\n",
                r.epoch, r.train_loss, r.validation_loss
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_table().as_bytes())?;
        Ok(())
    }
}

/// Features and targets of a training set as matrices.
pub fn design_matrices(set: &TrainingSet) -> (Array2<f64>, Array2<f64>) {
    let n = set.rows.len();
    let x = Array2::from_shape_fn((n, 4), |(i, j)| set.rows[i].features[j]);
    let y = Array2::from_shape_fn((n, 6), |(i, j)| set.rows[i].params.to_array()[j]);
    (x, y)
}

fn mse(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    let chunk = 4096;
    for start in (0..x.nrows()).step_by(chunk) {
        let end = (start + chunk).min(x.nrows());
        let (l, _) = forward_loss(
            model,
            x.slice(s![start..end, ..]),
            y.slice(s![start..end, ..]),
        );
        total += l * (end - start) as f64;
    }
    total / x.nrows() as f64
}

fn forward_loss(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> (f64, ()) {
    let mut a = x.to_owned();
    for layer in &model.layers {
        a = (a.dot(&layer.weights) + &layer.bias).mapv(|v| layer.activation.apply(v));
    }
    let d = &a - &y;
    (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64, ())
}

/// Column means and standard deviations; constant columns get unit scale.
fn column_scaling(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(x.ncols());
    for row in x.outer_iter() {
        var += &(&row - &mean).mapv(|d| d * d);
    }
    let scale = (var / n).mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

/// Train a fresh network. The rows are shuffled once and split into
/// training and validation parts; the model with the lowest validation
/// loss over all epochs is returned.
pub fn train(
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingHistory), MlpError> {
    train_with(set, config, &DEFAULT_DIMS, |_| {})
}

pub fn train_with(
    set: &TrainingSet,
    config: &TrainConfig,
    dims: &[usize],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MlpModel, TrainingHistory), MlpError> {
    config.validate()?;
    if set.rows.len() < MIN_TRAINING_ROWS {
        return Err(MlpError::DatasetTooSmall {
            rows: set.rows.len(),
            min: MIN_TRAINING_ROWS,
        });
    }
    if dims.first() != Some(&4) || dims.last() != Some(&6) {
        return Err(MlpError::InvalidConfig(
            "network must map 4 inputs to 6 outputs".into(),
        ));
    }
    let (x_all, y_all) = design_matrices(set);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.rows.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((set.rows.len() as f64 * config.validation_fraction).round() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let x_val = x_all.select(Axis(0), val_idx);
    let y_val = y_all.select(Axis(0), val_idx);
    let x_train = x_all.select(Axis(0), train_idx);
    let y_train = y_all.select(Axis(0), train_idx);

    let (offset, scale) = column_scaling(x_train.view());
    let x_train = (&x_train - &offset) / &scale;
    let x_val = (&x_val - &offset) / &scale;

    let mut model = MlpModel::new(dims, config.seed);
    let mut state = AdamState::for_model(&model);
    let mut history = TrainingHistory {
        train_rows: train_idx.len(),
        validation_rows: n_val,
        ..Default::default()
    };
    let mut best = (f64::INFINITY, model.clone());
    let mut perm: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 1..=config.epochs {
        perm.shuffle(&mut rng);
        let step_config = TrainConfig {
            learning_rate: config.learning_rate_at(epoch),
            ..*config
        };
        let mut weighted = 0.0;
        for batch in perm.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), batch);
            let yb = y_train.select(Axis(0), batch);
            let (loss, grads) = loss_and_gradient(&model, xb.view(), yb.view());
            adam_step(&mut model, &grads, &mut state, &step_config);
            weighted += loss * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: weighted / perm.len() as f64,
            validation_loss: mse(&model, x_val.view(), y_val.view()),
        };
        if record.validation_loss < best.0 {
            best = (record.validation_loss, model.clone());
            history.best_epoch = epoch;
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    let mut best = best.1;
    best.fold_input_scaling(&offset, &scale);
    Ok((best, history))
}

/// Project a raw network output onto the feasible parameter region:
/// every value inside `[m, 1 - m]`, `nu < mu`, and the three sending
/// probabilities summing below one.
pub fn repair(raw: &[f64; 6]) -> ProtocolParams {
    let m = REPAIR_MARGIN;
    let mut v = raw.map(|x| if x.is_nan() { m } else { x.clamp(m, 1.0 - m) });
    if v[2] >= v[1] {
        v[2] = 0.99 * v[1];
    }
    let sum = v[3] + v[4] + v[5];
    if sum >= 1.0 {
        let k = (1.0 - m) / sum;
        for p in &mut v[3..6] {
            *p *= k;
        }
    }
    ProtocolParams::from_array(v)
}

/// Network prediction, repaired into the feasible region.
pub fn predict_params(model: &MlpModel, e: &ExperimentParams) -> Result<ProtocolParams, MlpError> {
    let x = normalize(e)?;
    let raw = model.forward(&x)?;
    Ok(repair(&raw.try_into().expect("six outputs")))
}

/// Predictions for many conditions, in input order.
pub fn predict_params_batch(
    model: &MlpModel,
    conditions: &[ExperimentParams],
) -> Result<Vec<ProtocolParams>, MlpError> {
    let mut x = Array2::zeros((conditions.len(), 4));
    for (mut row, e) in x.outer_iter_mut().zip(conditions) {
        row.assign(&Array1::from(normalize(e)?.to_vec()));
    }
    let raw = model.forward_batch(x.view())?;
    Ok(raw
        .outer_iter()
        .map(|r| repair(&[r[0], r[1], r[2], r[3], r[4], r[5]]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub params: ProtocolParams,
    pub rate: f64,
    /// False when the predicted parameters give no key, e.g. beyond the
    /// distance cutoff. Such predictions are advisory only.
    pub usable: bool,
}

pub fn predict_checked(model: &MlpModel, e: &ExperimentParams) -> Result<Prediction, MlpError> {
    let params = predict_params(model, e)?;
    let rate = key_rate(e, &params).unwrap_or(0.0);
    Ok(Prediction {
        params,
        rate,
        usable: rate > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, SampleRanges, TrainingRow};
    use crate::keyrate::DeviceConstants;
    use ndarray::array;

    fn toy_model() -> MlpModel {
        MlpModel::new(&[4, 8, 6], 11)
    }

    fn toy_set(rows: Vec<TrainingRow>) -> TrainingSet {
        TrainingSet {
            meta: DatasetMeta {
                generator_version: "test".into(),
                seed: 0,
                ranges: SampleRanges::default(),
                constants: DeviceConstants::default(),
                samples_per_distance: 0,
                distances: vec![],
                candidate_rows: rows.len(),
                infeasible_rows: 0,
                max_sweeps_rows: 0,
            },
            rows,
        }
    }

    fn random_batch(rows: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((rows, 6), |_| rng.random_range(0.01..0.99));
        (x, y)
    }

    fn all_gradients(g: &Gradients) -> Vec<f64> {
        g.weights
            .iter()
            .zip(&g.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = toy_model();
        let (x, y) = random_batch(16, 4);
        let hidden = x.dot(&model.layers[0].weights) + &model.layers[0].bias;
        assert!(
            hidden.iter().all(|z| z.abs() > 1e-4),
            "kink too close for finite differences"
        );
        assert!(hidden.iter().any(|&z| z > 0.0) && hidden.iter().any(|&z| z < 0.0));

        let (_, grads) = loss_and_gradient(&model, x.view(), y.view());
        let step = 1e-6;
        let loss_at = |m: &MlpModel| loss_and_gradient(m, x.view(), y.view()).0;
        let check = |fd: f64, an: f64, what: String| {
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs() + 1e-10,
                "{what}: {fd} vs {an}"
            );
        };
        for l in 0..model.layers.len() {
            let (rows, cols) = model.layers[l].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut m = model.clone();
                    m.layers[l].weights[[r, c]] += step;
                    let up = loss_at(&m);
                    m.layers[l].weights[[r, c]] -= 2.0 * step;
                    let down = loss_at(&m);
                    check(
                        (up - down) / (2.0 * step),
                        grads.weights[l][[r, c]],
                        format!("w{l}[{r},{c}]"),
                    );
                }
            }
            for j in 0..cols {
                let mut m = model.clone();
                m.layers[l].bias[j] += step;
                let up = loss_at(&m);
                m.layers[l].bias[j] -= 2.0 * step;
                let down = loss_at(&m);
                check(
                    (up - down) / (2.0 * step),
                    grads.bias[l][j],
                    format!("b{l}[{j}]"),
                );
            }
        }
    }

    #[test]
    fn matching_targets_give_zero_loss_and_gradient() {
        let model = toy_model();
        let (x, _) = random_batch(5, 1);
        let y = model.forward_batch(x.view()).unwrap();
        let (loss, grads) = loss_and_gradient(&model, x.view(), y.view());
        assert!(loss < 1e-30);
        assert!(all_gradients(&grads).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_gradient_unchanged() {
        let model = toy_model();
        let (x, y) = random_batch(6, 2);
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2 = ndarray::concatenate(Axis(0), &[y.view(), y.view()]).unwrap();
        let (l1, g1) = loss_and_gradient(&model, x.view(), y.view());
        let (l2, g2) = loss_and_gradient(&model, x2.view(), y2.view());
        assert!((l1 - l2).abs() <= 1e-14 * l1);
        for (a, b) in all_gradients(&g1).iter().zip(all_gradients(&g2)) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn hand_computed_toy_network() {
        let model = MlpModel {
            layers: vec![
                Layer {
                    weights: array![[1.0, -2.0], [0.5, 1.0]],
                    bias: array![0.1, -0.2],
                    activation: Activation::Relu,
                },
                Layer {
                    weights: array![[0.3], [-0.7]],
                    bias: array![0.05],
                    activation: Activation::Sigmoid,
                },
            ],
        };
        // x = (0.4, 0.6): h = relu(0.4 + 0.3 + 0.1, -0.8 + 0.6 - 0.2) = (0.8, 0)
        let out = model.forward(&[0.4, 0.6]).unwrap();
        let expect = 1.0 / (1.0 + (-(0.3 * 0.8 + 0.05f64)).exp());
        assert!((out[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn folding_input_scaling_preserves_outputs() {
        let model = MlpModel::new(&[4, 16, 6], 9);
        let offset = array![1.0, 6.5, 1.75, 12.5];
        let scale = array![0.58, 0.87, 0.72, 0.87];
        let mut folded = model.clone();
        folded.fold_input_scaling(&offset, &scale);
        let x = [0.2, 6.89, 1.23, 13.11];
        let standardized: Vec<f64> = (0..4).map(|k| (x[k] - offset[k]) / scale[k]).collect();
        let a = model.forward(&standardized).unwrap();
        let b = folded.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn batch_inference_matches_single_rows_bitwise() {
        let model = MlpModel::new(&DEFAULT_DIMS, 3);
        let x = Array2::from_shape_fn((17, 4), |(i, j)| 0.1 * (i as f64) + j as f64);
        let batch = model.forward_batch(x.view()).unwrap();
        for (row, out) in x.outer_iter().zip(batch.outer_iter()) {
            let single = model.forward(row.as_slice().unwrap()).unwrap();
            assert_eq!(single.as_slice(), out.as_slice().unwrap());
        }
    }

    #[test]
    fn batch_prediction_preserves_order() {
        let model = MlpModel::new(&DEFAULT_DIMS, 8);
        let conditions: Vec<_> = (0..5)
            .map(|i| ExperimentParams::new(20.0 * i as f64, 1e-7, 0.01, 1e12))
            .collect();
        let batch = predict_params_batch(&model, &conditions).unwrap();
        for (e, p) in conditions.iter().zip(&batch) {
            assert_eq!(*p, predict_params(&model, e).unwrap());
        }
    }

    #[test]
    fn zero_inputs_give_sigmoid_of_output_bias() {
        let mut model = toy_model();
        for l in &mut model.layers {
            l.weights.fill(0.0);
        }
        model.layers[1].bias.fill(0.3);
        let out = model.forward(&[0.0; 4]).unwrap();
        let expect = 1.0 / (1.0 + (-0.3f64).exp());
        assert!(out.iter().all(|&v| v == expect));
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let model = toy_model();
        assert!(matches!(
            model.forward(&[1.0; 3]),
            Err(MlpError::InputDimension {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qmlp");
        let model = MlpModel::new(&DEFAULT_DIMS, 5);
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        let x = [0.2, 6.89, 1.23, 13.11];
        assert_eq!(loaded.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn corrupt_model_files_are_rejected() {
        let bytes = toy_model().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            MlpModel::from_bytes(&bad_magic),
            Err(MlpError::Format(_))
        ));
        assert!(matches!(
            MlpModel::from_bytes(&bytes[..bytes.len() - 1]),
            Err(MlpError::Format(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            MlpModel::from_bytes(&extra),
            Err(MlpError::Format(_))
        ));
    }

    #[test]
    fn adam_with_zero_gradient() {
        let config = TrainConfig::default();
        let mut model = toy_model();
        let before = model.clone();
        let zero = Gradients::zeros_like(&model);
        let mut state = AdamState::for_model(&model);
        adam_step(&mut model, &zero, &mut state, &config);
        assert_eq!(model, before);

        let mut p = [1.0];
        let mut s = AdamState::new(&[1]);
        s.update(&mut [&mut p[..]], &[&[0.5][..]], &config);
        let (m0, v0) = (s.m[0][0], s.v[0][0]);
        for _ in 0..10 {
            s.update(&mut [&mut p[..]], &[&[0.0][..]], &config);
        }
        assert!(s.m[0][0].abs() < m0.abs() && s.v[0][0] < v0);
    }

    #[test]
    fn adam_is_deterministic() {
        let config = TrainConfig::default();
        let (x, y) = random_batch(8, 3);
        let mut models = [toy_model(), toy_model()];
        let mut states = [
            AdamState::for_model(&models[0]),
            AdamState::for_model(&models[1]),
        ];
        for _ in 0..5 {
            for (m, st) in models.iter_mut().zip(states.iter_mut()) {
                let (_, g) = loss_and_gradient(m, x.view(), y.view());
                adam_step(m, &g, st, &config);
            }
        }
        assert_eq!(models[0], models[1]);
        assert_eq!(states[0], states[1]);
        assert_eq!(states[0].step, 5);
    }

    #[test]
    fn adam_minimizes_a_scalar_quadratic() {
        let config = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = [0.0];
        let mut s = AdamState::new(&[1]);
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            s.update(&mut [&mut p[..]], &[&g[..]], &config);
        }
        assert!((p[0] - 1.0).abs() < 1e-3, "{}", p[0]);
    }

    #[test]
    fn repair_examples() {
        let p = repair(&[-0.1, 1.2, 0.5, 0.5, 0.4, 0.3]);
        assert_eq!(p.s, REPAIR_MARGIN);
        assert_eq!(p.mu, 1.0 - REPAIR_MARGIN);
        assert_eq!(p.nu, 0.5);
        let sum = p.p_s + p.p_mu + p.p_nu;
        assert!((sum - 0.9999).abs() < 1e-12);
        assert!((p.p_s / p.p_mu - 1.25).abs() < 1e-12);

        let q = repair(&[0.5, 0.1, 0.2, 0.9, 0.01, 0.05]);
        assert_eq!(q.nu, 0.99 * 0.1);
        assert_eq!((q.p_s, q.p_mu, q.p_nu), (0.9, 0.01, 0.05));
        assert!(q.validate().is_ok());
    }

    #[test]
    fn repair_leaves_feasible_vectors_alone() {
        let raw = [0.668, 0.1533, 0.02127, 0.9368, 0.002754, 0.04078];
        assert_eq!(repair(&raw).to_array(), raw);
    }

    proptest::proptest! {
        #[test]
        fn repaired_outputs_are_always_valid(seed in 0u64..1000, x in proptest::array::uniform4(-50.0..50.0f64)) {
            let mut model = MlpModel::new(&[4, 8, 6], seed);
            for l in &mut model.layers {
                l.weights.mapv_inplace(|w| w * 20.0);
            }
            let raw: [f64; 6] = model.forward(&x).unwrap().try_into().unwrap();
            proptest::prop_assert!(repair(&raw).validate().is_ok());
        }
    }

    #[test]
    fn training_rejects_tiny_datasets() {
        let row = TrainingRow {
            features: [0.2, 6.9, 1.2, 13.1],
            params: ProtocolParams::from_array([0.5, 0.17, 0.02, 0.9, 0.01, 0.05]),
            rate: 1e-3,
        };
        assert!(matches!(
            train(&toy_set(vec![row; 99]), &TrainConfig::default()),
            Err(MlpError::DatasetTooSmall { rows: 99, .. })
        ));
    }

    #[test]
    fn training_memorizes_two_distinct_rows() {
        let a = TrainingRow {
            features: [0.2, 6.9, 1.2, 13.1],
            params: ProtocolParams::from_array([0.5, 0.17, 0.02, 0.9, 0.01, 0.05]),
            rate: 1e-3,
        };
        let b = TrainingRow {
            features: [1.4, 5.5, 2.6, 11.5],
            params: ProtocolParams::from_array([0.3, 0.25, 0.04, 0.7, 0.05, 0.15]),
            rate: 1e-5,
        };
        let rows: Vec<_> = (0..100).map(|i| if i % 2 == 0 { a } else { b }).collect();
        // constant step: a decaying one can freeze on this degenerate problem
        let config = TrainConfig {
            epochs: 400,
            batch_size: 16,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            ..TrainConfig::default()
        };
        let (model, history) = train(&toy_set(rows.clone()), &config).unwrap();
        assert_eq!(history.epochs.len(), 400);
        let (again, history_again) = train(&toy_set(rows.clone()), &config).unwrap();
        assert_eq!(again, model);
        assert_eq!(history_again, history);
        assert!(
            history.best_validation_loss() < 1e-6,
            "{}",
            history.best_validation_loss()
        );
        let out = model.forward(&a.features).unwrap();
        for (o, t) in out.iter().zip(a.params.to_array()) {
            assert!((o - t).abs() < 3e-3);
        }
    }
}
