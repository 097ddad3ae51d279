//! A small CPU network engine: NCHW `f64` tensors, sequential layer graphs
//! with residual blocks, explicit backward passes and first-order
//! optimizers.
//!
//! Fully-connected layers operate on `(N, F, 1, 1)` tensors so every layer
//! speaks the same 4-D type.

mod layers;
pub mod loss;
mod optim;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::PadMode;
pub use optim::{Optimizer, OptimizerKind};

use layers::Op;

pub type Tensor = Array4<f64>;

/// A learnable (or tracked) array with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    /// Running statistics are stored as params but never updated by an
    /// optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Kaiming normal, fan-in.
    #[default]
    He,
    /// Glorot uniform.
    Xavier,
    Normal { std: f64 },
    Zero,
    /// Centre tap set to 1 on matching channels; needs in == out.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        pad_mode: PadMode,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        init: Init,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        init: Init,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    MaxPool {
        size: usize,
    },
    Upsample {
        factor: usize,
    },
    InstanceNorm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    BatchNorm {
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Flatten,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<NamedSpec>,
        #[serde(default)]
        shortcut: Vec<NamedSpec>,
    },
}

fn yes() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: LayerSpec,
}

impl NamedSpec {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

/// `(channels, height, width)` for one sample.
pub type Shape = [usize; 3];

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

impl LayerSpec {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [c, h, w] = input;
        let bad = |m: String| Err(Error::validation(m));
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if c != *in_channels {
                    return bad(format!("conv expects {in_channels} channels, got {c}"));
                }
                match (
                    conv_out(h, *kernel, *stride, *padding),
                    conv_out(w, *kernel, *stride, *padding),
                ) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([*out_channels, oh, ow]),
                    _ => bad(format!("conv kernel {kernel} too large for {h}x{w}")),
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if c * h * w != *in_features || h != 1 || w != 1 {
                    return bad(format!(
                        "linear expects ({in_features},1,1), got ({c},{h},{w})"
                    ));
                }
                Ok([*out_features, 1, 1])
            }
            LayerSpec::MaxPool { size } => {
                if h < *size || w < *size {
                    return bad(format!("pool {size} larger than {h}x{w}"));
                }
                Ok([c, h / size, w / size])
            }
            LayerSpec::Upsample { factor } => Ok([c, h * factor, w * factor]),
            LayerSpec::BatchNorm { channels, .. } => {
                if c != *channels {
                    return bad(format!("batchnorm expects {channels} channels, got {c}"));
                }
                Ok(input)
            }
            LayerSpec::Flatten => Ok([c * h * w, 1, 1]),
            LayerSpec::Residual { body, shortcut } => {
                let a = specs_output_shape(body, input)?;
                let b = specs_output_shape(shortcut, input)?;
                if a != b {
                    return bad(format!("residual branches disagree: {a:?} vs {b:?}"));
                }
                Ok(a)
            }
            LayerSpec::Relu
            | LayerSpec::LeakyRelu { .. }
            | LayerSpec::Tanh
            | LayerSpec::Sigmoid
            | LayerSpec::InstanceNorm { .. } => Ok(input),
        }
    }
}

pub fn specs_output_shape(specs: &[NamedSpec], input: Shape) -> Result<Shape> {
    specs.iter().try_fold(input, |s, n| n.spec.output_shape(s))
}

/// Shape of the output of the node named by a dotted `path`; descends into
/// residual bodies.
pub fn shape_at(specs: &[NamedSpec], input: Shape, path: &str) -> Result<Shape> {
    let (head, rest) = match path.split_once('.') {
        Some((h, r)) => (h, Some(r)),
        None => (path, None),
    };
    let mut shape = input;
    for node in specs {
        if node.name == head {
            return match (rest, &node.spec) {
                (None, spec) => spec.output_shape(shape),
                (Some(r), LayerSpec::Residual { body, .. }) => shape_at(body, shape, r),
                (Some(_), _) => Err(Error::validation(format!(
                    "layer '{head}' has no sub-layers"
                ))),
            };
        }
        shape = node.spec.output_shape(shape)?;
    }
    Err(Error::validation(format!("no layer named '{path}'")))
}

/// Counts parameters without allocating them.
pub fn specs_param_count(specs: &[NamedSpec]) -> usize {
    specs
        .iter()
        .map(|n| match &n.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => out_channels * in_channels * kernel * kernel + if *bias { *out_channels } else { 0 },
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => out_features * in_features + out_features,
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
            LayerSpec::Residual { body, shortcut } => {
                specs_param_count(body) + specs_param_count(shortcut)
            }
            _ => 0,
        })
        .sum()
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: Op,
}

/// An ordered chain of named layers.
#[derive(Debug, Clone)]
pub struct Sequential {
    nodes: Vec<Node>,
}

impl Sequential {
    pub fn from_specs(specs: &[NamedSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(specs, &mut rng)
    }

    fn build(specs: &[NamedSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let nodes = specs
            .iter()
            .map(|n| {
                Ok(Node {
                    name: n.name.clone(),
                    op: Op::build(&n.spec, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes })
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Inference pass; batch norm uses running statistics.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.nodes.iter().fold(x.clone(), |acc, n| n.op.forward(&acc))
    }

    /// Inference pass truncated after the node at `path` (dotted for
    /// residual bodies).
    pub fn forward_to(&self, x: &Tensor, path: &str) -> Result<Tensor> {
        let (head, rest) = match path.split_once('.') {
            Some((h, r)) => (h, Some(r)),
            None => (path, None),
        };
        let mut acc = x.clone();
        for node in &self.nodes {
            if node.name == head {
                return match (rest, &node.op) {
                    (None, op) => Ok(op.forward(&acc)),
                    (Some(r), Op::Residual { body, .. }) => body.forward_to(&acc, r),
                    (Some(_), _) => Err(Error::validation(format!(
                        "layer '{head}' has no sub-layers"
                    ))),
                };
            }
            acc = node.op.forward(&acc);
        }
        Err(Error::validation(format!("no layer named '{path}'")))
    }

    /// Training pass; caches what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut acc = x.clone();
        for node in &mut self.nodes {
            acc = node.op.forward_train(&acc);
        }
        acc
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// Must follow `forward_train`.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for node in self.nodes.iter_mut().rev() {
            g = node.op.backward(&g);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param> {
        self.nodes.iter().flat_map(|n| n.op.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.nodes.iter_mut().flat_map(|n| n.op.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        for n in &mut self.nodes {
            n.op.clear_cache();
        }
    }

    /// Copies values (not gradients) from another network of identical
    /// structure.
    pub fn copy_values_from(&mut self, other: &Sequential) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.value.shape() != s.value.shape() {
                return Err(Error::Checkpoint("parameter shape mismatch".into()));
            }
            d.value.assign(&s.value);
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_params(&mut buf, &self.params()).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let arrays = read_params(&mut bytes.as_slice())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut params = self.params_mut();
        if arrays.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} tensors, found {}",
                path.display(),
                params.len(),
                arrays.len()
            )));
        }
        for (p, a) in params.iter_mut().zip(arrays) {
            if p.value.shape() != a.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    path.display(),
                    a.shape(),
                    p.value.shape()
                )));
            }
            p.value = a;
        }
        Ok(())
    }

    /// Loads tensors in order until the first shape mismatch (typically a
    /// classifier head of a different width). Returns how many were loaded.
    pub fn load_weights_prefix(&mut self, path: &Path) -> Result<usize> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let arrays = read_params(&mut bytes.as_slice())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut loaded = 0;
        for (p, a) in self.params_mut().into_iter().zip(arrays) {
            if p.value.shape() != a.shape() {
                break;
            }
            p.value = a;
            loaded += 1;
        }
        Ok(loaded)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"SVNN";

fn write_params<W: Write>(w: &mut W, params: &[&Param]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> std::io::Result<Vec<ArrayD<f64>>> {
    let invalid = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(invalid("bad weights magic"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32b)?;
        let ndim = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u64b)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64b)?;
            data.push(f64::from_le_bytes(u64b));
        }
        out.push(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| invalid("bad shape"))?);
    }
    Ok(out)
}

/// Stacks `(C, H, W)` samples into a batch.
pub fn stack(samples: &[ndarray::Array3<f64>]) -> Tensor {
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("samples share a shape")
}

#[cfg(test)]
mod tests;
