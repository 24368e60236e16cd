//! Layer kinds with batched forward and backward passes.
//!
//! Tensors carry the batch as their leading dimension: `[batch, features]`
//! for dense data and `[batch, channels, length]` for sequences.

use std::fmt;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::tensor::{axpy, dot, Scalar, Tensor};
use super::NnError;

/// Batch-norm running statistics update: `running = m * running + (1 - m) * batch`.
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const BATCH_NORM_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    /// Valid (unpadded) 1-D convolution over `[channels, length]` inputs.
    Conv1D {
        in_channels: usize,
        filter_size: usize,
        filter_count: usize,
        stride: usize,
    },
    MaxPool1D {
        size: usize,
        stride: usize,
    },
    ReLU,
    Dropout {
        rate: f32,
    },
    BatchNorm1D {
        channels: usize,
    },
    Flatten,
    Softmax,
}

/// Output length of a valid convolution or pooling window.
pub fn window_output_len(input: usize, size: usize, stride: usize) -> Option<usize> {
    if size == 0 || stride == 0 || input < size {
        return None;
    }
    Some((input - size) / stride + 1)
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(NnError::InvalidSpec(format!(
                    "{self}: {what} must be positive"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Dense { input, output } => {
                positive(input, "input")?;
                positive(output, "output")
            }
            LayerSpec::Conv1D {
                in_channels,
                filter_size,
                filter_count,
                stride,
            } => {
                positive(in_channels, "in_channels")?;
                positive(filter_size, "filter size")?;
                positive(filter_count, "filter count")?;
                positive(stride, "stride")
            }
            LayerSpec::MaxPool1D { size, stride } => {
                positive(size, "size")?;
                positive(stride, "stride")
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(NnError::InvalidSpec(format!(
                        "dropout rate {rate} not in [0,1)"
                    )))
                }
            }
            LayerSpec::BatchNorm1D { channels } => positive(channels, "channels"),
            LayerSpec::ReLU | LayerSpec::Flatten | LayerSpec::Softmax => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        self.validate()?;
        let bad = |why: String| Err(NnError::InvalidGeometry(format!("{self}: {why}")));
        match *self {
            LayerSpec::Dense { input: n, output } => match input {
                [m] if *m == n => Ok(vec![output]),
                _ => bad(format!("expects [{n}], got {input:?}")),
            },
            LayerSpec::Conv1D {
                in_channels,
                filter_size,
                filter_count,
                stride,
            } => match input {
                [c, len] if *c == in_channels => match window_output_len(*len, filter_size, stride)
                {
                    Some(out) => Ok(vec![filter_count, out]),
                    None => bad(format!("input length {len} shorter than filter")),
                },
                _ => bad(format!("expects [{in_channels}, N], got {input:?}")),
            },
            LayerSpec::MaxPool1D { size, stride } => match input {
                [c, len] => match window_output_len(*len, size, stride) {
                    Some(out) => Ok(vec![*c, out]),
                    None => bad(format!("input length {len} shorter than window")),
                },
                _ => bad(format!("expects [C, N], got {input:?}")),
            },
            LayerSpec::BatchNorm1D { channels } => match input {
                [c] | [c, _] if *c == channels => Ok(input.to_vec()),
                _ => bad(format!("expects {channels} channels, got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => bad(format!("expects a flat input, got {input:?}")),
            },
            LayerSpec::ReLU | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::Conv1D {
                in_channels,
                filter_size,
                filter_count,
                ..
            } => filter_count * in_channels * filter_size + filter_count,
            LayerSpec::BatchNorm1D { channels } => 2 * channels,
            _ => 0,
        }
    }

    /// Parses the canonical text form produced by `Display`.
    pub fn parse(line: &str) -> Result<Self, NnError> {
        let mut words = line.split_whitespace();
        let kind = words.next().unwrap_or("");
        let args: Vec<&str> = words.collect();
        let bad = || NnError::InvalidSpec(format!("cannot parse layer {line:?}"));
        let int = |i: usize| -> Result<usize, NnError> {
            args.get(i).and_then(|s| s.parse().ok()).ok_or_else(bad)
        };
        let arity = |n: usize| if args.len() == n { Ok(()) } else { Err(bad()) };
        let spec = match kind {
            "dense" => {
                arity(2)?;
                LayerSpec::Dense {
                    input: int(0)?,
                    output: int(1)?,
                }
            }
            "conv1d" => {
                arity(4)?;
                LayerSpec::Conv1D {
                    in_channels: int(0)?,
                    filter_size: int(1)?,
                    filter_count: int(2)?,
                    stride: int(3)?,
                }
            }
            "maxpool1d" => {
                arity(2)?;
                LayerSpec::MaxPool1D {
                    size: int(0)?,
                    stride: int(1)?,
                }
            }
            "relu" => {
                arity(0)?;
                LayerSpec::ReLU
            }
            "dropout" => {
                arity(1)?;
                LayerSpec::Dropout {
                    rate: args[0].parse().map_err(|_| bad())?,
                }
            }
            "batchnorm1d" => {
                arity(1)?;
                LayerSpec::BatchNorm1D { channels: int(0)? }
            }
            "flatten" => {
                arity(0)?;
                LayerSpec::Flatten
            }
            "softmax" => {
                arity(0)?;
                LayerSpec::Softmax
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { input, output } => write!(f, "dense {input} {output}"),
            LayerSpec::Conv1D {
                in_channels,
                filter_size,
                filter_count,
                stride,
            } => write!(
                f,
                "conv1d {in_channels} {filter_size} {filter_count} {stride}"
            ),
            LayerSpec::MaxPool1D { size, stride } => write!(f, "maxpool1d {size} {stride}"),
            LayerSpec::ReLU => write!(f, "relu"),
            LayerSpec::Dropout { rate } => write!(f, "dropout {rate}"),
            LayerSpec::BatchNorm1D { channels } => write!(f, "batchnorm1d {channels}"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

/// A trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: &'static str,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: &'static str, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { name, value, grad }
    }
}

#[derive(Debug, Clone)]
enum Cache<T: Scalar> {
    Input(Tensor<T>),
    Scales(Vec<T>),
    ArgMax {
        indices: Vec<usize>,
        input_shape: Vec<usize>,
    },
    BatchNorm {
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        shape: Vec<usize>,
    },
    Output(Tensor<T>),
    Shape(Vec<usize>),
}

/// A layer's spec, parameters, non-trainable buffers and forward cache.
#[derive(Debug, Clone)]
pub struct Layer<T: Scalar> {
    spec: LayerSpec,
    params: Vec<Param<T>>,
    /// Batch-norm running mean and variance.
    buffers: Vec<Tensor<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Creates a layer; weights are drawn uniformly from ±1/√fan_in,
    /// biases start at zero.
    pub fn new(spec: LayerSpec, rng: &mut dyn RngCore) -> Result<Self, NnError> {
        spec.validate()?;
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
                .collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let (params, buffers) = match spec {
            LayerSpec::Dense { input, output } => (
                vec![
                    Param::new("weight", uniform(vec![output, input], input)),
                    Param::new("bias", Tensor::zeros(vec![output])),
                ],
                vec![],
            ),
            LayerSpec::Conv1D {
                in_channels,
                filter_size,
                filter_count,
                ..
            } => (
                vec![
                    Param::new(
                        "weight",
                        uniform(
                            vec![filter_count, in_channels, filter_size],
                            in_channels * filter_size,
                        ),
                    ),
                    Param::new("bias", Tensor::zeros(vec![filter_count])),
                ],
                vec![],
            ),
            LayerSpec::BatchNorm1D { channels } => (
                vec![
                    Param::new("gamma", Tensor::filled(vec![channels], T::one())),
                    Param::new("beta", Tensor::zeros(vec![channels])),
                ],
                vec![
                    Tensor::zeros(vec![channels]),
                    Tensor::filled(vec![channels], T::one()),
                ],
            ),
            _ => (vec![], vec![]),
        };
        Ok(Self {
            spec,
            params,
            buffers,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Non-trainable state as `(name, tensor)` pairs.
    pub fn buffers(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        ["running_mean", "running_var"]
            .into_iter()
            .zip(&self.buffers)
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub(crate) fn tensors_mut(&mut self) -> (&mut [Param<T>], &mut [Tensor<T>]) {
        (&mut self.params, &mut self.buffers)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, NnError> {
        match mode {
            Mode::Infer => self.infer(input),
            Mode::Train => self.forward_train(input, rng),
        }
    }

    /// Inference pass: dropout is the identity and batch norm uses its
    /// running statistics. Never mutates the layer.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(input)?;
        match self.spec {
            LayerSpec::Dense { .. } => Ok(dense_forward(
                input,
                &self.params[0].value,
                &self.params[1].value,
            )),
            LayerSpec::Conv1D { stride, .. } => Ok(conv1d_forward(
                input,
                &self.params[0].value,
                &self.params[1].value,
                stride,
            )),
            LayerSpec::MaxPool1D { size, stride } => Ok(maxpool_forward(input, size, stride).0),
            LayerSpec::ReLU => Ok(input.map(|v| if v > T::zero() { v } else { T::zero() })),
            LayerSpec::Dropout { .. } => Ok(input.clone()),
            LayerSpec::BatchNorm1D { .. } => {
                let mean = self.buffers[0].to_f64_vec();
                let var = self.buffers[1].to_f64_vec();
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPSILON).sqrt())
                    .collect();
                let normalized = batchnorm_normalize(input, &mean, &inv_std);
                Ok(batchnorm_affine(
                    input.shape(),
                    &normalized,
                    &self.params[0].value,
                    &self.params[1].value,
                ))
            }
            LayerSpec::Flatten => flatten(input),
            LayerSpec::Softmax => Ok(softmax(input)),
        }
    }

    /// Training pass; caches what `backward` needs.
    pub fn forward_train(
        &mut self,
        input: &Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, NnError> {
        self.check_input(input)?;
        let (out, cache) = match self.spec {
            LayerSpec::Dense { .. } => (
                dense_forward(input, &self.params[0].value, &self.params[1].value),
                Cache::Input(input.clone()),
            ),
            LayerSpec::Conv1D { stride, .. } => (
                conv1d_forward(input, &self.params[0].value, &self.params[1].value, stride),
                Cache::Input(input.clone()),
            ),
            LayerSpec::MaxPool1D { size, stride } => {
                let (out, indices) = maxpool_forward(input, size, stride);
                (
                    out,
                    Cache::ArgMax {
                        indices,
                        input_shape: input.shape().to_vec(),
                    },
                )
            }
            LayerSpec::ReLU => (
                input.map(|v| if v > T::zero() { v } else { T::zero() }),
                Cache::Input(input.clone()),
            ),
            LayerSpec::Dropout { rate } => {
                let rate = f64::from(rate);
                let keep_scale = T::from_f64(1.0 / (1.0 - rate));
                let scales: Vec<T> = if rate == 0.0 {
                    vec![T::one(); input.len()]
                } else {
                    (0..input.len())
                        .map(|_| {
                            if rng.gen::<f64>() < rate {
                                T::zero()
                            } else {
                                keep_scale
                            }
                        })
                        .collect()
                };
                let data = input
                    .data()
                    .iter()
                    .zip(&scales)
                    .map(|(&v, &s)| v * s)
                    .collect();
                (
                    Tensor::new(input.shape().to_vec(), data)?,
                    Cache::Scales(scales),
                )
            }
            LayerSpec::BatchNorm1D { channels } => {
                let (mean, var) = batch_moments(input, channels);
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPSILON).sqrt())
                    .collect();
                let normalized = batchnorm_normalize(input, &mean, &inv_std);
                let out = batchnorm_affine(
                    input.shape(),
                    &normalized,
                    &self.params[0].value,
                    &self.params[1].value,
                );
                let m = BATCH_NORM_MOMENTUM;
                for (r, b) in self.buffers[0].data_mut().iter_mut().zip(&mean) {
                    *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
                }
                for (r, b) in self.buffers[1].data_mut().iter_mut().zip(&var) {
                    *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
                }
                (
                    out,
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                        shape: input.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Flatten => (flatten(input)?, Cache::Shape(input.shape().to_vec())),
            LayerSpec::Softmax => {
                let out = softmax(input);
                (out.clone(), Cache::Output(out))
            }
        };
        self.cache = Some(cache);
        Ok(out)
    }

    /// Back-propagates `upstream` (gradient w.r.t. this layer's output),
    /// storing parameter gradients and returning the input gradient.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or(NnError::NoCachedForward)?;
        match (&self.spec, cache) {
            (LayerSpec::Dense { .. }, Cache::Input(x)) => {
                let (dx, dw, db) = dense_backward(&x, &self.params[0].value, upstream)?;
                self.params[0].grad = dw;
                self.params[1].grad = db;
                Ok(dx)
            }
            (LayerSpec::Conv1D { stride, .. }, Cache::Input(x)) => {
                let (dx, dw, db) = conv1d_backward(&x, &self.params[0].value, upstream, *stride)?;
                self.params[0].grad = dw;
                self.params[1].grad = db;
                Ok(dx)
            }
            (
                LayerSpec::MaxPool1D { .. },
                Cache::ArgMax {
                    indices,
                    input_shape,
                },
            ) => {
                if indices.len() != upstream.len() {
                    return Err(NnError::ShapeMismatch("maxpool upstream gradient".into()));
                }
                let mut dx = Tensor::zeros(input_shape);
                let d = dx.data_mut();
                for (&i, &g) in indices.iter().zip(upstream.data()) {
                    d[i] = d[i] + g;
                }
                Ok(dx)
            }
            (LayerSpec::ReLU, Cache::Input(x)) => {
                same_shape(&x, upstream)?;
                let data = x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            (LayerSpec::Dropout { .. }, Cache::Scales(scales)) => {
                if scales.len() != upstream.len() {
                    return Err(NnError::ShapeMismatch("dropout upstream gradient".into()));
                }
                let data = upstream
                    .data()
                    .iter()
                    .zip(&scales)
                    .map(|(&g, &s)| g * s)
                    .collect();
                Tensor::new(upstream.shape().to_vec(), data)
            }
            (
                LayerSpec::BatchNorm1D { .. },
                Cache::BatchNorm {
                    normalized,
                    inv_std,
                    shape,
                },
            ) => {
                if shape != upstream.shape() {
                    return Err(NnError::ShapeMismatch("batchnorm upstream gradient".into()));
                }
                let (dx, dgamma, dbeta) = batchnorm_backward(
                    &shape,
                    &normalized,
                    &inv_std,
                    &self.params[0].value,
                    upstream,
                );
                self.params[0].grad = dgamma;
                self.params[1].grad = dbeta;
                Ok(dx)
            }
            (LayerSpec::Flatten, Cache::Shape(shape)) => upstream.clone().reshape(shape),
            (LayerSpec::Softmax, Cache::Output(y)) => {
                same_shape(&y, upstream)?;
                let n = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(upstream.data().chunks(n)) {
                    let s = dot(yr, gr);
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&p, &g)| T::from_f64(p.as_f64() * (g.as_f64() - s))),
                    );
                }
                Tensor::new(y.shape().to_vec(), dx)
            }
            _ => Err(NnError::NoCachedForward),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NnError> {
        let shape = input.shape();
        if shape.is_empty() {
            return Err(NnError::ShapeMismatch(
                "input has no batch dimension".into(),
            ));
        }
        self.spec
            .output_shape(&shape[1..])
            .map(|_| ())
            .map_err(|e| match e {
                NnError::InvalidGeometry(msg) => NnError::ShapeMismatch(msg),
                other => other,
            })
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NnError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let batch = input.shape()[0];
    let rest = input.shape()[1..].iter().product();
    input.clone().reshape(vec![batch, rest])
}

/// Row-wise softmax over the last dimension.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = *input.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(n.max(1)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / sum)));
    }
    Tensor::new(input.shape().to_vec(), out).expect("same shape")
}

/// `out[b, o] = Σ_i weight[o, i] · x[b, i] + bias[o]`
fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let batch = x.shape()[0];
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); batch * out_dim];
    out.par_chunks_mut(out_dim)
        .zip(x.data().par_chunks(in_dim))
        .for_each(|(o_row, x_row)| {
            for (o, slot) in o_row.iter_mut().enumerate() {
                let s = dot(&w[o * in_dim..(o + 1) * in_dim], x_row);
                *slot = T::from_f64(s + b[o].as_f64());
            }
        });
    Tensor::new(vec![batch, out_dim], out).expect("dense output shape")
}

type Grads<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Grads<T>, NnError> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let batch = x.shape()[0];
    if dy.shape() != [batch, out_dim] {
        return Err(NnError::ShapeMismatch(format!(
            "dense upstream gradient {:?}, expected [{batch}, {out_dim}]",
            dy.shape()
        )));
    }
    let w = weight.data();
    let g = dy.data();
    let xs = x.data();

    let mut dx = vec![T::zero(); batch * in_dim];
    dx.par_chunks_mut(in_dim)
        .zip(g.par_chunks(out_dim))
        .for_each(|(dx_row, g_row)| {
            let mut acc = vec![0.0f64; in_dim];
            for (o, &go) in g_row.iter().enumerate() {
                let go = go.as_f64();
                if go != 0.0 {
                    axpy(&mut acc, go, &w[o * in_dim..(o + 1) * in_dim]);
                }
            }
            for (d, a) in dx_row.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });

    let mut dw = vec![T::zero(); out_dim * in_dim];
    dw.par_chunks_mut(in_dim)
        .enumerate()
        .for_each(|(o, dw_row)| {
            let mut acc = vec![0.0f64; in_dim];
            for b in 0..batch {
                let go = g[b * out_dim + o].as_f64();
                if go != 0.0 {
                    axpy(&mut acc, go, &xs[b * in_dim..(b + 1) * in_dim]);
                }
            }
            for (d, a) in dw_row.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });

    let db: Vec<T> = (0..out_dim)
        .map(|o| T::from_f64((0..batch).map(|b| g[b * out_dim + o].as_f64()).sum()))
        .collect();

    Ok((
        Tensor::new(vec![batch, in_dim], dx)?,
        Tensor::new(vec![out_dim, in_dim], dw)?,
        Tensor::new(vec![out_dim], db)?,
    ))
}

/// `out[b, f, i] = Σ_k Σ_a weight[f, k, a] · x[b, k, i·stride + a] + bias[f]`
///
/// Terms are summed channel-major, tap-minor, and the bias is added last.
fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (filters, m) = (weight.shape()[0], weight.shape()[2]);
    let out_len = window_output_len(len, m, stride).expect("validated geometry");
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); batch * filters * out_len];
    out.par_chunks_mut(filters * out_len)
        .zip(x.data().par_chunks(channels * len))
        .for_each(|(o_sample, x_sample)| {
            let mut acc = vec![0.0f64; out_len];
            for f in 0..filters {
                acc.fill(0.0);
                for k in 0..channels {
                    let xk = &x_sample[k * len..(k + 1) * len];
                    for a in 0..m {
                        let wv = w[(f * channels + k) * m + a].as_f64();
                        if stride == 1 {
                            axpy(&mut acc, wv, &xk[a..a + out_len]);
                        } else {
                            for (i, slot) in acc.iter_mut().enumerate() {
                                *slot += wv * xk[i * stride + a].as_f64();
                            }
                        }
                    }
                }
                let bf = b[f].as_f64();
                for (o, &a) in o_sample[f * out_len..(f + 1) * out_len]
                    .iter_mut()
                    .zip(&acc)
                {
                    *o = T::from_f64(a + bf);
                }
            }
        });
    Tensor::new(vec![batch, filters, out_len], out).expect("conv output shape")
}

fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> Result<Grads<T>, NnError> {
    let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (filters, m) = (weight.shape()[0], weight.shape()[2]);
    let out_len = window_output_len(len, m, stride).expect("validated geometry");
    if dy.shape() != [batch, filters, out_len] {
        return Err(NnError::ShapeMismatch(format!(
            "conv upstream gradient {:?}, expected [{batch}, {filters}, {out_len}]",
            dy.shape()
        )));
    }
    let w = weight.data();
    let g = dy.data();
    let xs = x.data();

    let mut dx = vec![T::zero(); batch * channels * len];
    dx.par_chunks_mut(channels * len)
        .zip(g.par_chunks(filters * out_len))
        .for_each(|(dx_sample, g_sample)| {
            let mut acc = vec![0.0f64; channels * len];
            for f in 0..filters {
                let gf = &g_sample[f * out_len..(f + 1) * out_len];
                for k in 0..channels {
                    let acc_k = &mut acc[k * len..(k + 1) * len];
                    for a in 0..m {
                        let wv = w[(f * channels + k) * m + a].as_f64();
                        if stride == 1 {
                            for (slot, &gv) in acc_k[a..a + out_len].iter_mut().zip(gf) {
                                *slot += wv * gv.as_f64();
                            }
                        } else {
                            for (i, &gv) in gf.iter().enumerate() {
                                acc_k[i * stride + a] += wv * gv.as_f64();
                            }
                        }
                    }
                }
            }
            for (d, a) in dx_sample.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });

    let mut dw = vec![T::zero(); filters * channels * m];
    dw.par_chunks_mut(channels * m)
        .enumerate()
        .for_each(|(f, dw_f)| {
            let mut acc = vec![0.0f64; channels * m];
            for b in 0..batch {
                let gf = &g[(b * filters + f) * out_len..(b * filters + f + 1) * out_len];
                let xb = &xs[b * channels * len..(b + 1) * channels * len];
                for k in 0..channels {
                    let xk = &xb[k * len..(k + 1) * len];
                    for a in 0..m {
                        acc[k * m + a] += if stride == 1 {
                            dot(gf, &xk[a..a + out_len])
                        } else {
                            gf.iter()
                                .enumerate()
                                .map(|(i, gv)| gv.as_f64() * xk[i * stride + a].as_f64())
                                .sum::<f64>()
                        };
                    }
                }
            }
            for (d, a) in dw_f.iter_mut().zip(acc) {
                *d = T::from_f64(a);
            }
        });

    let db: Vec<T> = (0..filters)
        .map(|f| {
            let s: f64 = (0..batch)
                .map(|b| {
                    g[(b * filters + f) * out_len..(b * filters + f + 1) * out_len]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>()
                })
                .sum();
            T::from_f64(s)
        })
        .collect();

    Ok((
        Tensor::new(vec![batch, channels, len], dx)?,
        Tensor::new(vec![filters, channels, m], dw)?,
        Tensor::new(vec![filters], db)?,
    ))
}

/// Window maxima and, per output, the flat input index of the (first) maximum.
fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> (Tensor<T>, Vec<usize>) {
    let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_len = window_output_len(len, size, stride).expect("validated geometry");
    let xs = x.data();
    let mut out = Vec::with_capacity(batch * channels * out_len);
    let mut indices = Vec::with_capacity(batch * channels * out_len);
    for row in 0..batch * channels {
        let base = row * len;
        for i in 0..out_len {
            let start = base + i * stride;
            let mut best = start;
            for j in start + 1..start + size {
                if xs[j] > xs[best] {
                    best = j;
                }
            }
            out.push(xs[best]);
            indices.push(best);
        }
    }
    (
        Tensor::new(vec![batch, channels, out_len], out).expect("pool output shape"),
        indices,
    )
}

/// (channels, positions per channel per sample)
fn bn_layout(shape: &[usize]) -> (usize, usize) {
    match shape {
        [_, c] => (*c, 1),
        [_, c, l] => (*c, *l),
        _ => unreachable!("validated batch-norm input"),
    }
}

/// Per-channel mean and biased variance over batch (and length).
fn batch_moments<T: Scalar>(x: &Tensor<T>, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let (_, inner) = bn_layout(x.shape());
    let batch = x.shape()[0];
    let count = (batch * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (c, (mu, va)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let values = (0..batch).flat_map(|b| {
            let start = (b * channels + c) * inner;
            x.data()[start..start + inner].iter().map(|v| v.as_f64())
        });
        *mu = values.clone().sum::<f64>() / count;
        *va = values.map(|v| (v - *mu) * (v - *mu)).sum::<f64>() / count;
    }
    (mean, var)
}

fn batchnorm_normalize<T: Scalar>(x: &Tensor<T>, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let (channels, inner) = bn_layout(x.shape());
    x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / inner) % channels;
            (v.as_f64() - mean[c]) * inv_std[c]
        })
        .collect()
}

fn batchnorm_affine<T: Scalar>(
    shape: &[usize],
    normalized: &[f64],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Tensor<T> {
    let (channels, inner) = bn_layout(shape);
    let (g, b) = (gamma.data(), beta.data());
    let data = normalized
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let c = (i / inner) % channels;
            T::from_f64(g[c].as_f64() * n + b[c].as_f64())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("same shape")
}

fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    normalized: &[f64],
    inv_std: &[f64],
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Grads<T> {
    let (channels, inner) = bn_layout(shape);
    let count = (shape[0] * inner) as f64;
    let g = dy.data();
    let mut dgamma = vec![0.0f64; channels];
    let mut dbeta = vec![0.0f64; channels];
    for (i, (&n, gv)) in normalized.iter().zip(g).enumerate() {
        let c = (i / inner) % channels;
        dgamma[c] += gv.as_f64() * n;
        dbeta[c] += gv.as_f64();
    }
    // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
    let dx = normalized
        .iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&n, gv))| {
            let c = (i / inner) % channels;
            let scale = gamma.data()[c].as_f64() * inv_std[c] / count;
            T::from_f64(scale * (count * gv.as_f64() - dbeta[c] - n * dgamma[c]))
        })
        .collect();
    (
        Tensor::new(shape.to_vec(), dx).expect("same shape"),
        Tensor::new(
            vec![channels],
            dgamma.into_iter().map(T::from_f64).collect(),
        )
        .expect("channels"),
        Tensor::new(vec![channels], dbeta.into_iter().map(T::from_f64).collect())
            .expect("channels"),
    )
}
