//! The stacked autoencoder and 1D CNN classifiers, their training loops
//! (greedy layer-wise pretraining, supervised fine-tuning with early
//! stopping) and the convolution hyper-parameter grid search.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{LabelScheme, LabeledDataset, SplitDataset, Task};
use crate::eval::{self, input_batch, EvalError};
use crate::nn::{
    cross_entropy_loss, mse_loss, Adam, AdamConfig, LayerSpec, NnError, Sequential, Tensor,
};
use crate::preprocess::VECTOR_LEN;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("dataset rows have {found} bytes, model expects {expected}")]
    DimMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeConfig {
    pub input_len: usize,
    pub encoder_sizes: Vec<usize>,
    pub dropout_rate: f32,
    pub n_classes: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl SaeConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            input_len: VECTOR_LEN,
            encoder_sizes: vec![400, 300, 200, 100, 50],
            dropout_rate: 0.05,
            n_classes,
            pretrain_epochs: 200,
            finetune_epochs: 200,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.encoder_sizes.is_empty() {
            return Err(TrainError::Invalid("sae.encoder_sizes is empty".into()));
        }
        let mut prev = self.input_len;
        for &s in &self.encoder_sizes {
            if s == 0 || s >= prev {
                return Err(TrainError::Invalid(format!(
                    "sae.encoder_sizes must be positive and strictly decreasing from {}: {:?}",
                    self.input_len, self.encoder_sizes
                )));
            }
            prev = s;
        }
        if self.n_classes < 2 {
            return Err(TrainError::Invalid(format!("{} classes", self.n_classes)));
        }
        Ok(())
    }
}

/// Window of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub size: usize,
    pub count: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(size: usize, count: usize, stride: usize) -> Self {
        Self {
            size,
            count,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub input_len: usize,
    pub c1: ConvSpec,
    pub c2: ConvSpec,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub fc_sizes: Vec<usize>,
    pub dropout_rate: f32,
    /// Insert batch normalization after each convolution and hidden dense layer.
    pub batch_norm: bool,
    pub n_classes: usize,
    pub epochs: usize,
}

impl CnnConfig {
    /// Selected convolution windows per task.
    pub fn for_task(task: Task, n_classes: usize) -> Self {
        let (c1, c2) = match task {
            Task::AppIdentification => (ConvSpec::new(4, 200, 3), ConvSpec::new(5, 200, 1)),
            Task::TrafficCharacterization => (ConvSpec::new(5, 200, 3), ConvSpec::new(4, 200, 3)),
        };
        Self {
            input_len: VECTOR_LEN,
            c1,
            c2,
            pool_size: 2,
            pool_stride: 2,
            fc_sizes: vec![200, 100, 50],
            dropout_rate: 0.05,
            batch_norm: false,
            n_classes,
            epochs: 300,
        }
    }
}

/// Optimizer, batching and early-stopping knobs shared by every phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            adam: AdamConfig::default(),
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

/// Everything a training run reads from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sae: SaeConfig,
    pub cnn: CnnConfig,
    pub optim: OptimConfig,
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn defaults(task: Task, n_classes: usize) -> Self {
        Self {
            sae: SaeConfig::new(n_classes),
            cnn: CnnConfig::for_task(task, n_classes),
            optim: OptimConfig::default(),
        }
    }

    /// Defaults for the task whose default class table matches `classes`
    /// (application identification otherwise).
    pub fn for_classes(classes: &[String]) -> Self {
        let task = if LabelScheme::traffic_characterization().classes() == classes {
            Task::TrafficCharacterization
        } else {
            Task::AppIdentification
        };
        Self::defaults(task, classes.len())
    }

    /// Overrides fields from `key = value` lines; `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| TrainError::Config {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let bad = || err(format!("bad value {value:?} for {key}"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            let real = || value.parse::<f64>().map_err(|_| bad());
            let rate = || {
                value
                    .parse::<f32>()
                    .ok()
                    .filter(|r| (0.0..1.0).contains(r))
                    .ok_or_else(bad)
            };
            let list = || parse_list(value).ok_or_else(bad);
            let (c1, c2) = (&mut self.cnn.c1, &mut self.cnn.c2);
            match key {
                "input_len" => {
                    self.sae.input_len = int()?;
                    self.cnn.input_len = self.sae.input_len;
                }
                "batch_size" => self.optim.batch_size = int()?.max(1),
                "learning_rate" => self.optim.adam.learning_rate = real()?,
                "beta1" => self.optim.adam.beta1 = real()?,
                "beta2" => self.optim.adam.beta2 = real()?,
                "epsilon" => self.optim.adam.epsilon = real()?,
                "patience" => self.optim.patience = int()?,
                "min_delta" => self.optim.min_delta = real()?,
                "sae.encoder_sizes" => self.sae.encoder_sizes = list()?,
                "sae.dropout_rate" => self.sae.dropout_rate = rate()?,
                "sae.pretrain_epochs" => self.sae.pretrain_epochs = int()?,
                "sae.finetune_epochs" => self.sae.finetune_epochs = int()?,
                "cnn.c1_size" => c1.size = int()?,
                "cnn.c1_count" => c1.count = int()?,
                "cnn.c1_stride" => c1.stride = int()?,
                "cnn.c2_size" => c2.size = int()?,
                "cnn.c2_count" => c2.count = int()?,
                "cnn.c2_stride" => c2.stride = int()?,
                "cnn.pool_size" => self.cnn.pool_size = int()?,
                "cnn.pool_stride" => self.cnn.pool_stride = int()?,
                "cnn.fc_sizes" => {
                    let sizes = list()?;
                    if sizes.len() != 3 {
                        return Err(err("cnn.fc_sizes needs exactly three sizes".into()));
                    }
                    self.cnn.fc_sizes = sizes;
                }
                "cnn.dropout_rate" => self.cnn.dropout_rate = rate()?,
                "cnn.batch_norm" => self.cnn.batch_norm = value.parse().map_err(|_| bad())?,
                "cnn.epochs" => self.cnn.epochs = int()?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        Ok(())
    }

    /// Every key with its current value, in the format `apply` reads.
    pub fn to_text(&self) -> String {
        let (s, c, o) = (&self.sae, &self.cnn, &self.optim);
        let mut t = String::new();
        let _ = writeln!(t, "input_len = {}", s.input_len);
        let _ = writeln!(t, "batch_size = {}", o.batch_size);
        let _ = writeln!(t, "learning_rate = {}", o.adam.learning_rate);
        let _ = writeln!(t, "beta1 = {}", o.adam.beta1);
        let _ = writeln!(t, "beta2 = {}", o.adam.beta2);
        let _ = writeln!(t, "epsilon = {}", o.adam.epsilon);
        let _ = writeln!(t, "patience = {}", o.patience);
        let _ = writeln!(t, "min_delta = {}", o.min_delta);
        let _ = writeln!(t, "sae.encoder_sizes = {}", join(&s.encoder_sizes));
        let _ = writeln!(t, "sae.dropout_rate = {}", s.dropout_rate);
        let _ = writeln!(t, "sae.pretrain_epochs = {}", s.pretrain_epochs);
        let _ = writeln!(t, "sae.finetune_epochs = {}", s.finetune_epochs);
        for (name, conv) in [("c1", c.c1), ("c2", c.c2)] {
            let _ = writeln!(t, "cnn.{name}_size = {}", conv.size);
            let _ = writeln!(t, "cnn.{name}_count = {}", conv.count);
            let _ = writeln!(t, "cnn.{name}_stride = {}", conv.stride);
        }
        let _ = writeln!(t, "cnn.pool_size = {}", c.pool_size);
        let _ = writeln!(t, "cnn.pool_stride = {}", c.pool_stride);
        let _ = writeln!(t, "cnn.fc_sizes = {}", join(&c.fc_sizes));
        let _ = writeln!(t, "cnn.dropout_rate = {}", c.dropout_rate);
        let _ = writeln!(t, "cnn.batch_norm = {}", c.batch_norm);
        let _ = writeln!(t, "cnn.epochs = {}", c.epochs);
        t
    }
}

pub fn sae_layers(cfg: &SaeConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = cfg.input_len;
    for &size in &cfg.encoder_sizes {
        specs.push(LayerSpec::Dense {
            input: prev,
            output: size,
        });
        specs.push(LayerSpec::ReLU);
        specs.push(LayerSpec::Dropout {
            rate: cfg.dropout_rate,
        });
        prev = size;
    }
    specs.push(LayerSpec::Dense {
        input: prev,
        output: cfg.n_classes,
    });
    specs.push(LayerSpec::Softmax);
    specs
}

pub fn build_sae(cfg: &SaeConfig, seed: u64) -> Result<Sequential<f32>, TrainError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, INIT_STREAM);
    Ok(Sequential::new(
        vec![cfg.input_len],
        sae_layers(cfg),
        &mut rng,
    )?)
}

/// Layer list of the CNN; fails with `InvalidGeometry` when a window does
/// not fit its input.
pub fn cnn_layers(cfg: &CnnConfig) -> Result<Vec<LayerSpec>, TrainError> {
    let input = [1, cfg.input_len];
    let mut specs = Vec::new();
    let mut channels = 1;
    for conv in [cfg.c1, cfg.c2] {
        specs.push(LayerSpec::Conv1D {
            in_channels: channels,
            filter_size: conv.size,
            filter_count: conv.count,
            stride: conv.stride,
        });
        if cfg.batch_norm {
            specs.push(LayerSpec::BatchNorm1D {
                channels: conv.count,
            });
        }
        specs.push(LayerSpec::ReLU);
        channels = conv.count;
    }
    specs.push(LayerSpec::MaxPool1D {
        size: cfg.pool_size,
        stride: cfg.pool_stride,
    });
    specs.push(LayerSpec::Flatten);
    let shapes = Sequential::<f32>::check_geometry(&input, &specs)?;
    let mut prev = shapes.last().expect("non-empty")[0];
    for &size in &cfg.fc_sizes {
        specs.push(LayerSpec::Dense {
            input: prev,
            output: size,
        });
        if cfg.batch_norm {
            specs.push(LayerSpec::BatchNorm1D { channels: size });
        }
        specs.push(LayerSpec::ReLU);
        specs.push(LayerSpec::Dropout {
            rate: cfg.dropout_rate,
        });
        prev = size;
    }
    specs.push(LayerSpec::Dense {
        input: prev,
        output: cfg.n_classes,
    });
    specs.push(LayerSpec::Softmax);
    Sequential::<f32>::check_geometry(&input, &specs)?;
    Ok(specs)
}

pub fn build_cnn(cfg: &CnnConfig, seed: u64) -> Result<Sequential<f32>, TrainError> {
    if cfg.n_classes < 2 {
        return Err(TrainError::Invalid(format!("{} classes", cfg.n_classes)));
    }
    let specs = cnn_layers(cfg)?;
    let mut rng = stream_rng(seed, INIT_STREAM);
    Ok(Sequential::new(vec![1, cfg.input_len], specs, &mut rng)?)
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Validation-loss early stopping. Training halts once `patience`
/// consecutive epochs fail to beat the reference loss by at least
/// `min_delta`; the best loss seen (by any margin) is what gets restored.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    reference: f64,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            reference: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        let new_best = loss < self.best;
        if new_best {
            self.best = loss;
        }
        if loss < self.reference - self.min_delta {
            self.reference = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        StopDecision {
            new_best,
            stop: self.wait > 0 && self.wait >= self.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Greedy pretraining of encoder layer `n` (0-based).
    Pretrain(usize),
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub phase: Phase,
    pub seed: u64,
    pub max_epochs: usize,
    pub optim: OptimConfig,
    /// Validation loss before the first update.
    pub initial_validation_loss: f64,
    pub history: Vec<EpochRecord>,
    /// Epochs actually run.
    pub stop_epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub wall_time: Duration,
}

/// Per-epoch callback; receives every record as soon as it is complete.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Rows of training inputs, as raw dataset bytes or precomputed features.
enum Features<'a> {
    Bytes(&'a LabeledDataset),
    Floats { data: Vec<f32>, dim: usize },
}

impl Features<'_> {
    fn batch(&self, rows: &[usize], sample_shape: &[usize]) -> Result<Tensor<f32>, NnError> {
        match self {
            Features::Bytes(ds) => input_batch(ds, rows, sample_shape),
            Features::Floats { data, dim } => {
                let mut out = Vec::with_capacity(rows.len() * dim);
                for &r in rows {
                    out.extend_from_slice(&data[r * dim..(r + 1) * dim]);
                }
                let mut shape = vec![rows.len()];
                shape.extend_from_slice(sample_shape);
                Tensor::new(shape, out)
            }
        }
    }
}

enum Objective<'a> {
    /// Cross entropy against dataset labels; the network ends in softmax.
    Classify(&'a LabeledDataset),
    /// Mean squared reconstruction error of the network's own input.
    Reconstruct(Features<'a>),
}

impl Objective<'_> {
    fn inputs(&self, net: &Sequential<f32>, rows: &[usize]) -> Result<Tensor<f32>, NnError> {
        match self {
            Objective::Classify(ds) => input_batch(ds, rows, net.input_shape()),
            Objective::Reconstruct(f) => f.batch(rows, net.input_shape()),
        }
    }

    fn train_step(
        &self,
        net: &mut Sequential<f32>,
        rows: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, NnError> {
        let x = self.inputs(net, rows)?;
        let y = net.forward_train(&x, rng)?;
        match self {
            Objective::Classify(ds) => {
                let labels: Vec<usize> = rows.iter().map(|&r| ds.label(r)).collect();
                let (loss, grad) = cross_entropy_loss(&y, &labels)?;
                let end = net.layers().len() - 1;
                net.backward_through(end, &grad)?;
                Ok(loss)
            }
            Objective::Reconstruct(_) => {
                let (loss, grad) = mse_loss(&y, &x.reshape(y.shape().to_vec())?)?;
                net.backward(&grad)?;
                Ok(loss)
            }
        }
    }

    fn mean_loss(&self, net: &Sequential<f32>, rows: &[usize]) -> Result<f64, NnError> {
        let mut total = 0.0;
        for chunk in rows.chunks(EVAL_BATCH) {
            let x = self.inputs(net, chunk)?;
            let y = net.infer(&x)?;
            let loss = match self {
                Objective::Classify(ds) => {
                    let labels: Vec<usize> = chunk.iter().map(|&r| ds.label(r)).collect();
                    cross_entropy_loss(&y, &labels)?.0
                }
                Objective::Reconstruct(_) => mse_loss(&y, &x.reshape(y.shape().to_vec())?)?.0,
            };
            total += loss * chunk.len() as f64;
        }
        Ok(total / rows.len() as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    net: &mut Sequential<f32>,
    objective: &Objective,
    train: &[usize],
    validation: &[usize],
    epochs: usize,
    optim: &OptimConfig,
    seed: u64,
    phase: Phase,
    observer: Observer,
) -> Result<TrainRun, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let started = Instant::now();
    let mut adam = Adam::new(optim.adam);
    let mut shuffle_rng = stream_rng(seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream_rng(seed, DROPOUT_STREAM);
    let mut stopper = EarlyStopping::new(optim.patience, optim.min_delta);
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let mut history = Vec::new();
    let mut order = train.to_vec();
    let initial_validation_loss = objective.mean_loss(net, validation)?;
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(optim.batch_size.max(1)) {
            total += objective.train_step(net, chunk, &mut dropout_rng)? * chunk.len() as f64;
            adam.step(&mut net.params_mut());
        }
        let validation_loss = objective.mean_loss(net, validation)?;
        let decision = stopper.update(validation_loss);
        if decision.new_best {
            best = Some((epoch, validation_loss, net.snapshot()));
        }
        let record = EpochRecord {
            phase,
            epoch,
            train_loss: total / order.len() as f64,
            validation_loss,
            improved: decision.new_best,
        };
        observer(&record);
        history.push(record);
        if decision.stop {
            break;
        }
    }
    if let Some((_, _, snapshot)) = &best {
        net.restore(snapshot);
    }
    Ok(TrainRun {
        phase,
        seed,
        max_epochs: epochs,
        optim: *optim,
        initial_validation_loss,
        stop_epoch: history.len(),
        best_epoch: best.as_ref().map(|b| b.0),
        best_validation_loss: best.as_ref().map(|b| b.1),
        history,
        wall_time: started.elapsed(),
    })
}

fn check_dim(ds: &LabeledDataset, expected: usize) -> Result<(), TrainError> {
    if ds.dim() != expected {
        return Err(TrainError::DimMismatch {
            found: ds.dim(),
            expected,
        });
    }
    Ok(())
}

/// Supervised training of a softmax classifier on the train split, early
/// stopping on the validation split; the best-validation parameters are
/// restored before returning.
pub fn finetune(
    net: &mut Sequential<f32>,
    ds: &LabeledDataset,
    split: &SplitDataset,
    epochs: usize,
    optim: &OptimConfig,
    seed: u64,
    observer: Observer,
) -> Result<TrainRun, TrainError> {
    if !net.ends_with_softmax() {
        return Err(TrainError::Invalid(
            "classifier must end with softmax".into(),
        ));
    }
    check_dim(ds, net.input_shape().iter().product())?;
    train_loop(
        net,
        &Objective::Classify(ds),
        &split.train,
        &split.validation,
        epochs,
        optim,
        seed,
        Phase::Finetune,
        observer,
    )
}

/// Number of encoder layers of an SAE-shaped network
/// (`[Dense, ReLU, Dropout] x k, Dense, Softmax`).
fn encoder_depth(net: &Sequential<f32>) -> usize {
    net.layers().len().saturating_sub(2) / 3
}

/// Output of layers `..end` in inference mode for every row, concatenated.
fn frozen_features(
    net: &Sequential<f32>,
    ds: &LabeledDataset,
    rows: &[usize],
    end: usize,
) -> Result<Vec<f32>, NnError> {
    let mut out = Vec::new();
    for chunk in rows.chunks(EVAL_BATCH) {
        let mut x = input_batch(ds, chunk, net.input_shape())?;
        for layer in &net.layers()[..end] {
            x = layer.infer(&x)?;
        }
        out.extend_from_slice(x.data());
    }
    Ok(out)
}

/// Greedy pretraining of encoder layer `k`: earlier layers are frozen and
/// only feed their (inference-mode) outputs; layer `k` is trained, behind
/// ReLU and dropout, with a transient untied linear decoder to reconstruct
/// its own input under mean squared error. Only layer `k` is written back.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_layer(
    net: &mut Sequential<f32>,
    k: usize,
    ds: &LabeledDataset,
    split: &SplitDataset,
    epochs: usize,
    optim: &OptimConfig,
    seed: u64,
    observer: Observer,
) -> Result<TrainRun, TrainError> {
    if k >= encoder_depth(net) {
        return Err(TrainError::Invalid(format!("no encoder layer {k}")));
    }
    check_dim(ds, net.input_shape().iter().product())?;
    let dense = 3 * k;
    let (input, output) = match *net.layers()[dense].spec() {
        LayerSpec::Dense { input, output } => (input, output),
        ref other => {
            return Err(TrainError::Invalid(format!(
                "layer {dense} is {other}, expected dense"
            )))
        }
    };
    let rate = match *net.layers()[dense + 2].spec() {
        LayerSpec::Dropout { rate } => rate,
        _ => 0.0,
    };
    let (n_train, n_val) = (split.train.len(), split.validation.len());
    let (train, validation): (Vec<usize>, Vec<usize>);
    let features = if k == 0 {
        train = split.train.clone();
        validation = split.validation.clone();
        Features::Bytes(ds)
    } else {
        let mut data = frozen_features(net, ds, &split.train, dense)?;
        data.extend(frozen_features(net, ds, &split.validation, dense)?);
        train = (0..n_train).collect();
        validation = (n_train..n_train + n_val).collect();
        Features::Floats { data, dim: input }
    };
    let specs = vec![
        LayerSpec::Dense { input, output },
        LayerSpec::ReLU,
        LayerSpec::Dropout { rate },
        LayerSpec::Dense {
            input: output,
            output: input,
        },
    ];
    let mut decoder_rng = stream_rng(seed, INIT_STREAM + 16 + k as u64);
    let mut ae = Sequential::<f32>::new(vec![input], specs, &mut decoder_rng)?;
    for (dst, src) in ae.layers_mut()[0]
        .params_mut()
        .iter_mut()
        .zip(net.layers()[dense].params())
    {
        dst.value = src.value.clone();
    }
    let run = train_loop(
        &mut ae,
        &Objective::Reconstruct(features),
        &train,
        &validation,
        epochs,
        optim,
        seed,
        Phase::Pretrain(k),
        observer,
    )?;
    for (dst, src) in net.layers_mut()[dense]
        .params_mut()
        .iter_mut()
        .zip(ae.layers()[0].params())
    {
        dst.value = src.value.clone();
    }
    Ok(run)
}

/// Pretrains every encoder layer in order.
pub fn pretrain_sae(
    net: &mut Sequential<f32>,
    ds: &LabeledDataset,
    split: &SplitDataset,
    epochs: usize,
    optim: &OptimConfig,
    seed: u64,
    observer: Observer,
) -> Result<Vec<TrainRun>, TrainError> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    (0..encoder_depth(net))
        .map(|k| {
            pretrain_layer(
                net,
                k,
                ds,
                split,
                epochs,
                optim,
                seed.wrapping_add(k as u64 + 1),
                observer,
            )
        })
        .collect()
}

/// Builds, pretrains and fine-tunes an SAE classifier.
pub fn train_sae(
    cfg: &SaeConfig,
    optim: &OptimConfig,
    ds: &LabeledDataset,
    split: &SplitDataset,
    seed: u64,
    observer: Observer,
) -> Result<(Sequential<f32>, Vec<TrainRun>), TrainError> {
    let mut net = build_sae(cfg, seed)?;
    check_dim(ds, cfg.input_len)?;
    let mut runs = pretrain_sae(
        &mut net,
        ds,
        split,
        cfg.pretrain_epochs,
        optim,
        seed,
        observer,
    )?;
    runs.push(finetune(
        &mut net,
        ds,
        split,
        cfg.finetune_epochs,
        optim,
        seed,
        observer,
    )?);
    Ok((net, runs))
}

/// Builds and trains a CNN classifier.
pub fn train_cnn(
    cfg: &CnnConfig,
    optim: &OptimConfig,
    ds: &LabeledDataset,
    split: &SplitDataset,
    seed: u64,
    observer: Observer,
) -> Result<(Sequential<f32>, TrainRun), TrainError> {
    let mut net = build_cnn(cfg, seed)?;
    check_dim(ds, cfg.input_len)?;
    let run = finetune(&mut net, ds, split, cfg.epochs, optim, seed, observer)?;
    Ok((net, run))
}

/// Candidate values for the six convolution hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub c1_size: Vec<usize>,
    pub c1_count: Vec<usize>,
    pub c1_stride: Vec<usize>,
    pub c2_size: Vec<usize>,
    pub c2_count: Vec<usize>,
    pub c2_stride: Vec<usize>,
}

impl GridSpec {
    /// A one-point grid at the given windows.
    pub fn single(c1: ConvSpec, c2: ConvSpec) -> Self {
        Self {
            c1_size: vec![c1.size],
            c1_count: vec![c1.count],
            c1_stride: vec![c1.stride],
            c2_size: vec![c2.size],
            c2_count: vec![c2.count],
            c2_stride: vec![c2.stride],
        }
    }

    fn axes(&self) -> [(&'static str, &Vec<usize>); 6] {
        [
            ("c1_size", &self.c1_size),
            ("c1_count", &self.c1_count),
            ("c1_stride", &self.c1_stride),
            ("c2_size", &self.c2_size),
            ("c2_count", &self.c2_count),
            ("c2_stride", &self.c2_stride),
        ]
    }

    /// Number of configurations in the Cartesian product.
    pub fn size(&self) -> usize {
        self.axes().iter().map(|(_, v)| v.len()).product()
    }

    /// Parses `axis = v1,v2,...` lines; axes not mentioned keep `base`'s value.
    pub fn parse(text: &str, base: &CnnConfig) -> Result<Self, TrainError> {
        let mut grid = Self::single(base.c1, base.c2);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| TrainError::Config {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected axis = values, got {line:?}")))?;
            let values =
                parse_list(value.trim()).ok_or_else(|| err(format!("bad values {value:?}")))?;
            let slot = match key.trim() {
                "c1_size" => &mut grid.c1_size,
                "c1_count" => &mut grid.c1_count,
                "c1_stride" => &mut grid.c1_stride,
                "c2_size" => &mut grid.c2_size,
                "c2_count" => &mut grid.c2_count,
                "c2_stride" => &mut grid.c2_stride,
                other => return Err(err(format!("unknown axis {other:?}"))),
            };
            *slot = values;
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        match self.axes().iter().find(|(_, v)| v.is_empty()) {
            Some((name, _)) => Err(TrainError::Invalid(format!("grid axis {name} is empty"))),
            None => Ok(()),
        }
    }

    /// Every `(c1, c2)` pair, varying the last axis fastest.
    pub fn configs(&self) -> Vec<(ConvSpec, ConvSpec)> {
        let mut out = Vec::with_capacity(self.size());
        for &a in &self.c1_size {
            for &b in &self.c1_count {
                for &c in &self.c1_stride {
                    for &d in &self.c2_size {
                        for &e in &self.c2_count {
                            for &f in &self.c2_stride {
                                out.push((ConvSpec::new(a, b, c), ConvSpec::new(d, e, f)));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Which split's weighted F1 ranks grid configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridObjective {
    #[default]
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub rank: usize,
    pub c1: ConvSpec,
    pub c2: ConvSpec,
    /// Weighted F1 on the objective split; `None` when training failed.
    pub objective: Option<f64>,
    pub params: Option<usize>,
    pub stop_epoch: usize,
    pub failure: Option<String>,
}

pub const LEADERBOARD_HEADER: &str =
    "rank,objective,params,c1_size,c1_count,c1_stride,c2_size,c2_count,c2_stride,stop_epoch";

/// Leaderboard CSV; failed configurations show `NaN` as their objective.
pub fn leaderboard_csv(entries: &[GridEntry]) -> String {
    let mut out = format!("{LEADERBOARD_HEADER}\n");
    for e in entries {
        let objective = e.objective.map_or("NaN".to_string(), |v| v.to_string());
        let params = e.params.map_or(String::new(), |p| p.to_string());
        let _ = writeln!(
            out,
            "{},{objective},{params},{},{},{},{},{},{},{}",
            e.rank,
            e.c1.size,
            e.c1.count,
            e.c1.stride,
            e.c2.size,
            e.c2.count,
            e.c2.stride,
            e.stop_epoch
        );
    }
    out
}

/// Trains one CNN per grid point with identical seed and budget and ranks
/// them by weighted F1, best first. Configurations that fail are ranked
/// last, in grid order, with the reason attached.
pub fn grid_search(
    grid: &GridSpec,
    base: &TrainConfig,
    ds: &LabeledDataset,
    split: &SplitDataset,
    objective: GridObjective,
    seed: u64,
) -> Result<Vec<GridEntry>, TrainError> {
    grid.validate()?;
    let eval_rows = match objective {
        GridObjective::Validation => &split.validation,
        GridObjective::Test => &split.test,
    };
    if eval_rows.is_empty() {
        return Err(TrainError::EmptySplit(match objective {
            GridObjective::Validation => "validation",
            GridObjective::Test => "test",
        }));
    }
    let mut entries: Vec<GridEntry> = grid
        .configs()
        .into_par_iter()
        .map(|(c1, c2)| {
            let cfg = CnnConfig {
                c1,
                c2,
                ..base.cnn.clone()
            };
            let params = cnn_layers(&cfg)
                .ok()
                .map(|specs| specs.iter().map(LayerSpec::parameter_count).sum());
            let outcome = (|| {
                let (net, run) = train_cnn(&cfg, &base.optim, ds, split, seed, &mut |_| {})?;
                let cm = eval::confusion_on(&net, ds, eval_rows)?;
                Ok::<_, TrainError>((eval::metrics(&cm).weighted_f1, run.stop_epoch))
            })();
            let (objective, stop_epoch, failure) = match outcome {
                Ok((f1, stop)) => (Some(f1), stop, None),
                Err(e) => (None, 0, Some(e.to_string())),
            };
            GridEntry {
                rank: 0,
                c1,
                c2,
                objective,
                params,
                stop_epoch,
                failure,
            }
        })
        .collect();
    entries.sort_by(|a, b| match (a.objective, b.objective) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(entries)
}
