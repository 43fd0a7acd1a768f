//! Dense and convolutional layers, their initialization, and the named
//! parameter container used by networks and checkpoints.

use rand::Rng;

use crate::array::NdArray;
use crate::error::{NumericsError, Result};
use crate::kernels::{self, ConvSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d(ConvSpec),
}

/// Weights and bias of one layer.
///
/// Dense weights are `(out, in)`; conv weights are `(out, in, k, k)`. The
/// bias is always `(out,)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: NdArray,
    pub bias: NdArray,
}

/// Uniform fan-in initialization: `U(-a, a)` with `a = gain * sqrt(3 / fan_in)`,
/// giving weight variance `gain^2 / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f32, rng: &mut R) -> NdArray {
    let a = gain * (3.0 / fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    NdArray::new(shape.to_vec(), data).expect("shape product matches")
}

/// Gain for layers followed by a ReLU.
pub const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

impl LayerParams {
    pub fn dense<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f32, rng: &mut R) -> Self {
        Self {
            kind: LayerKind::Dense,
            weights: fan_in_uniform(&[out_dim, in_dim], in_dim, gain, rng),
            bias: NdArray::zeros(&[out_dim]),
        }
    }

    pub fn conv2d<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, spec: ConvSpec, gain: f32, rng: &mut R) -> Self {
        let k = spec.kernel;
        Self {
            kind: LayerKind::Conv2d(spec),
            weights: fan_in_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, gain, rng),
            bias: NdArray::zeros(&[out_ch]),
        }
    }

    /// Builds a layer from existing tensors, checking that they agree.
    pub fn from_parts(kind: LayerKind, weights: NdArray, bias: NdArray) -> Result<Self> {
        let ok = match kind {
            LayerKind::Dense => weights.rank() == 2,
            LayerKind::Conv2d(spec) => {
                weights.rank() == 4 && weights.shape()[2] == spec.kernel && weights.shape()[3] == spec.kernel
            }
        };
        if !ok || bias.shape() != [weights.shape()[0]] {
            return Err(NumericsError::ShapeMismatch {
                op: "LayerParams::from_parts",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { kind, weights, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Output shape for a given input shape, or a shape-mismatch error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || NumericsError::ShapeMismatch {
            op: "layer forward",
            left: self.weights.shape().to_vec(),
            right: input.to_vec(),
        };
        match self.kind {
            LayerKind::Dense => {
                if input != [self.in_dim()] {
                    return Err(mismatch());
                }
                Ok(vec![self.out_dim()])
            }
            LayerKind::Conv2d(spec) => {
                if input.len() != 3 || input[0] != self.in_dim() {
                    return Err(mismatch());
                }
                let oh = spec.out_extent(input[1]).ok_or_else(mismatch)?;
                let ow = spec.out_extent(input[2]).ok_or_else(mismatch)?;
                Ok(vec![self.out_dim(), oh, ow])
            }
        }
    }
}

/// Applies one layer (no activation) to `input`.
pub fn forward(params: &LayerParams, input: &NdArray) -> Result<NdArray> {
    let out_shape = params.output_shape(input.shape())?;
    let data = match params.kind {
        LayerKind::Dense => kernels::dense_forward(
            params.weights.data(),
            params.bias.data(),
            input.data(),
            params.out_dim(),
            params.in_dim(),
        ),
        LayerKind::Conv2d(spec) => {
            let s = input.shape();
            kernels::conv2d_forward(
                input.data(),
                s[0],
                s[1],
                s[2],
                params.weights.data(),
                params.bias.data(),
                params.out_dim(),
                spec,
                out_shape[1],
                out_shape[2],
            )
        }
    };
    NdArray::new(out_shape, data)
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<NdArray>,
}

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Where a layer's tensors live inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerHandle {
    pub kind: LayerKind,
    pub weights: ParamId,
    pub bias: ParamId,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: NdArray) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    /// Registers a layer's tensors as `<prefix>.weight` / `<prefix>.bias`.
    pub fn push_layer(&mut self, prefix: &str, layer: LayerParams) -> LayerHandle {
        let weights = self.push(format!("{prefix}.weight"), layer.weights);
        let bias = self.push(format!("{prefix}.bias"), layer.bias);
        LayerHandle { kind: layer.kind, weights, bias }
    }

    pub fn layer(&self, handle: LayerHandle) -> LayerParams {
        LayerParams {
            kind: handle.kind,
            weights: self.tensors[handle.weights].clone(),
            bias: self.tensors[handle.bias].clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(NdArray::len).sum()
    }

    /// Copies tensors named `<prefix>.*` from `other` into this store,
    /// matching by name. Every tensor of this store must be found.
    pub fn load_prefixed(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for i in 0..self.len() {
            let full = format!("{prefix}.{}", self.names[i]);
            let src = other.find(&full).ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor {full}")))?;
            other.get(src).ensure_shape("load_prefixed", self.tensors[i].shape())?;
            self.tensors[i] = other.get(src).clone();
        }
        Ok(())
    }

    /// Appends all tensors of `other` under `<prefix>.<name>`.
    pub fn extend_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (name, t) in other.iter() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }
}
