//! Layer stacks and the model file format.
//!
//! ```text
//! "DPMD" | u16 version | u32 length + architecture text
//!        | u32 record_count
//!        | record_count x (u16 name length, name, u8 rank, rank x u32 dim, f32 data)
//!        | u64 CRC-64/XZ of everything before it
//! ```
//!
//! The architecture text has one `input <dims...>` line, one line per layer
//! in the canonical [`LayerSpec`] form and one `class <name>` line per class.

use std::fs;
use std::path::Path;

use rand::RngCore;

use super::layers::{Layer, LayerSpec, Mode, Param};
use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::checksum::{crc64, verify_trailer, ByteReader};

const MODEL_MAGIC: &[u8; 4] = b"DPMD";
const MODEL_VERSION: u16 = 1;

/// A feed-forward stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone)]
pub struct Sequential<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Validates the geometry of every layer, then initializes parameters.
    pub fn new(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng: &mut dyn RngCore,
    ) -> Result<Self, NnError> {
        Self::check_geometry(&input_shape, &specs)?;
        let layers = specs
            .into_iter()
            .map(|s| Layer::new(s, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// Per-sample shapes after each layer; fails on the first invalid one.
    pub fn check_geometry(
        input_shape: &[usize],
        specs: &[LayerSpec],
    ) -> Result<Vec<Vec<usize>>, NnError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::InvalidGeometry(format!(
                "input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            shape = spec.output_shape(&shape).map_err(|e| match e {
                NnError::InvalidGeometry(msg) => {
                    NnError::InvalidGeometry(format!("layer {i}: {msg}"))
                }
                other => other,
            })?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let specs: Vec<LayerSpec> = self.specs().cloned().collect();
        Self::check_geometry(&self.input_shape, &specs)
            .ok()
            .and_then(|s| s.last().cloned())
            .unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(Layer::spec)
    }

    pub fn parameter_count(&self) -> usize {
        self.specs().map(LayerSpec::parameter_count).sum()
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(
            self.layers.last().map(Layer::spec),
            Some(LayerSpec::Softmax)
        )
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

    /// Inference forward pass; never mutates the model.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut x = std::borrow::Cow::Borrowed(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.infer(&x)?;
            if !y.is_finite() {
                return Err(NnError::NonFiniteActivation { layer: i });
            }
            x = std::borrow::Cow::Owned(y);
        }
        Ok(x.into_owned())
    }

    pub fn forward_train(
        &mut self,
        input: &Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<T>, NnError> {
        let mut x = std::borrow::Cow::Borrowed(input);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let y = layer.forward_train(&x, rng)?;
            if !y.is_finite() {
                return Err(NnError::NonFiniteActivation { layer: i });
            }
            x = std::borrow::Cow::Owned(y);
        }
        Ok(x.into_owned())
    }

    /// Back-propagates through every layer.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let n = self.layers.len();
        self.backward_through(n, grad)
    }

    /// Back-propagates `grad`, taken w.r.t. the output of layer `end - 1`,
    /// through layers `end - 1` down to 0. Layers from `end` on are skipped
    /// (used to start from logits when the loss folds in the softmax).
    pub fn backward_through(&mut self, end: usize, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = grad.clone();
        for layer in self.layers[..end].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        for layer in &mut self.layers[end..] {
            layer.clear_cache();
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut().iter_mut())
            .collect()
    }

    /// Named parameter and buffer tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                out.push((format!("layers.{i}.{}", p.name), &p.value));
            }
            for (name, t) in layer.buffers() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let names: Vec<&'static str> = layer.params().iter().map(|p| p.name).collect();
            let buffer_names: Vec<&'static str> = layer.buffers().map(|(n, _)| n).collect();
            let (params, buffers) = layer.tensors_mut();
            for (name, p) in names.into_iter().zip(params) {
                out.push((format!("layers.{i}.{name}"), &mut p.value));
            }
            for (name, b) in buffer_names.into_iter().zip(buffers) {
                out.push((format!("layers.{i}.{name}"), b));
            }
        }
        out
    }

    /// Copies every parameter and buffer (for restoring a best snapshot).
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        for ((_, t), s) in self.named_tensors_mut().into_iter().zip(snapshot) {
            *t = s.clone();
        }
    }
}

/// A trained classifier: network plus class-name table.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub network: Sequential<f32>,
    pub classes: Vec<String>,
}

impl ModelState {
    pub fn architecture_text(&self) -> String {
        let mut text = String::from("input");
        for d in self.network.input_shape() {
            text.push_str(&format!(" {d}"));
        }
        text.push('\n');
        for spec in self.network.specs() {
            text.push_str(&format!("{spec}\n"));
        }
        for class in &self.classes {
            text.push_str(&format!("class {class}\n"));
        }
        text
    }

    fn parse_architecture(
        text: &str,
    ) -> Result<(Vec<usize>, Vec<LayerSpec>, Vec<String>), NnError> {
        let mut input = None;
        let mut specs = Vec::new();
        let mut classes = Vec::new();
        for line in text.lines() {
            if let Some(dims) = line.strip_prefix("input ") {
                let dims = dims
                    .split_whitespace()
                    .map(|d| {
                        d.parse()
                            .map_err(|_| NnError::InvalidSpec(format!("bad input line {line:?}")))
                    })
                    .collect::<Result<Vec<usize>, _>>()?;
                input = Some(dims);
            } else if let Some(name) = line.strip_prefix("class ") {
                classes.push(name.to_string());
            } else {
                specs.push(LayerSpec::parse(line)?);
            }
        }
        let input = input.ok_or_else(|| NnError::InvalidSpec("missing input line".into()))?;
        Ok((input, specs, classes))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        if self.classes.iter().any(|c| c.contains('\n')) {
            return Err(NnError::InvalidSpec(
                "class names may not contain newlines".into(),
            ));
        }
        let arch = self.architecture_text();
        let tensors = self.network.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(image: &[u8]) -> Result<Self, NnError> {
        if image.len() < 6 || &image[..4] != MODEL_MAGIC {
            return Err(NnError::BadMagic);
        }
        let version = u16::from_le_bytes([image[4], image[5]]);
        if version != MODEL_VERSION {
            return Err(NnError::FormatVersionMismatch {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let body = verify_trailer(image).ok_or(NnError::ChecksumMismatch)?;
        let mut r = ByteReader::new(&body[6..]);
        let arch_len = r.u32().ok_or(NnError::Truncated)? as usize;
        let arch = std::str::from_utf8(r.take(arch_len).ok_or(NnError::Truncated)?)
            .map_err(|_| NnError::InvalidSpec("architecture is not UTF-8".into()))?;
        let (input, specs, classes) = Self::parse_architecture(arch)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut network = Sequential::<f32>::new(input, specs, &mut rng)?;
        let count = r.u32().ok_or(NnError::Truncated)? as usize;
        let mut slots = network.named_tensors_mut();
        if count != slots.len() {
            return Err(NnError::InvalidSpec(format!(
                "{count} tensor records, architecture needs {}",
                slots.len()
            )));
        }
        for (expected_name, slot) in slots.iter_mut() {
            let name_len = usize::from(r.u16().ok_or(NnError::Truncated)?);
            let name = r.take(name_len).ok_or(NnError::Truncated)?;
            if name != expected_name.as_bytes() {
                return Err(NnError::InvalidSpec(format!(
                    "record {:?}, expected {expected_name}",
                    String::from_utf8_lossy(name)
                )));
            }
            let rank = usize::from(r.u8().ok_or(NnError::Truncated)?);
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize).ok_or(NnError::Truncated))
                .collect::<Result<Vec<_>, _>>()?;
            if shape != slot.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "{expected_name}: {shape:?} vs {:?}",
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                let b = r.take(4).ok_or(NnError::Truncated)?;
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
        if r.remaining() != 0 {
            return Err(NnError::Truncated);
        }
        drop(slots);
        Ok(Self { network, classes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes()?).map_err(NnError::Io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path).map_err(NnError::Io)?)
    }
}
