//! Modality encoders.
//!
//! [`MlpEncoder`] is a feed-forward network mapping a batch of observations
//! (one row per sample) into the joint embedding space. Weights are held in
//! `f64` for arithmetic but always rounded to `f32` after initialization and
//! after every update, so the single-precision checkpoint format loses
//! nothing and a deserialized encoder is identical to the original.
//!
//! [`ReferenceEncoder`] is a frozen single-layer `tanh` encoder built from a
//! seed. It stands in for a pretrained backbone that later stages align to.

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_for;
use crate::tape::{NodeId, Tape};

pub use crate::tape::Activation;

pub const ENCODER_MAGIC: &[u8; 4] = b"GBEC";
pub const ENCODER_VERSION: u32 = 1;

const TAG_ACTIVATION_MASK: u8 = 0x0f;
const TAG_OUTPUT_ACTIVATED: u8 = 0x40;
const TAG_FROZEN: u8 = 0x80;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    activation: Activation,
    activate_output: bool,
    frozen: bool,
    seed: u64,
}

/// Nodes produced by [`MlpEncoder::forward_tape`].
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    pub output: NodeId,
    /// `[W0, b0, W1, b1, ...]`; parameter leaves when trainable, constants when frozen.
    pub params: Vec<NodeId>,
}

impl MlpEncoder {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `dims` lists every layer width from input to output. The activation is
    /// applied after each hidden layer; the output layer is linear.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = rng_for(seed, "glorot");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // Largest f32 not exceeding the bound, so rounding cannot overshoot.
            let mut bound32 = bound as f32;
            if bound32 as f64 > bound {
                bound32 = f32::from_bits(bound32.to_bits() - 1);
            }
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| {
                let x = rng.random_range(-bound..=bound) as f32;
                x.clamp(-bound32, bound32) as f64
            })?;
            weights.push(w);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(MlpEncoder {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            activate_output: false,
            frozen: false,
            seed,
        })
    }

    /// A trainable copy of `src`, whose layer widths must equal `dst_dims`.
    pub fn init_from(src: &MlpEncoder, dst_dims: &[usize]) -> Result<Self> {
        validate_dims(dst_dims)?;
        if src.dims != dst_dims {
            let src_layers: Vec<_> = src.dims.windows(2).map(|p| (p[0], p[1])).collect();
            let dst_layers: Vec<_> = dst_dims.windows(2).map(|p| (p[0], p[1])).collect();
            let mut mismatches = Vec::new();
            for i in 0..src_layers.len().max(dst_layers.len()) {
                let s = src_layers.get(i);
                let d = dst_layers.get(i);
                if s != d {
                    mismatches.push(format!(
                        "layer {i}: source {} vs destination {}",
                        s.map_or("absent".into(), |(a, b)| format!("{a}x{b}")),
                        d.map_or("absent".into(), |(a, b)| format!("{a}x{b}")),
                    ));
                }
            }
            return Err(Error::config(format!(
                "cannot initialize from encoder with different shape: {}",
                mismatches.join("; ")
            )));
        }
        let mut out = src.clone();
        out.frozen = false;
        Ok(out)
    }

    /// Builds an encoder from explicit layers. Entries are rounded to `f32`.
    pub fn from_layers(
        weights: Vec<Matrix>,
        biases: Vec<Matrix>,
        activation: Activation,
        activate_output: bool,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::config("encoder needs one bias per weight matrix and at least one layer"));
        }
        let mut dims = vec![weights[0].rows()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *dims.last().unwrap() || b.rows() != 1 || b.cols() != w.cols() {
                return Err(Error::config(format!(
                    "layer {i}: weight {} does not chain with bias {} after width {}",
                    w.shape(),
                    b.shape(),
                    dims.last().unwrap()
                )));
            }
            dims.push(w.cols());
        }
        validate_dims(&dims)?;
        let mut enc = MlpEncoder {
            dims,
            weights,
            biases,
            activation,
            activate_output,
            frozen: false,
            seed: 0,
        };
        enc.round_to_storage();
        Ok(enc)
    }

    pub fn with_output_activation(mut self, on: bool) -> Self {
        self.activate_output = on;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Parameters in `[W0, b0, W1, b1, ...]` order.
    pub fn parameters(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in [`Self::parameters`] order.
    ///
    /// Values are taken as-is (no `f32` rounding) so finite-difference probes
    /// see the exact perturbation.
    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Rounds every parameter to single precision.
    pub fn round_to_storage(&mut self) {
        for p in self.parameters_mut() {
            p.round_to_f32();
        }
    }

    fn layer_activates(&self, layer: usize) -> bool {
        layer + 1 < self.weights.len() || self.activate_output
    }

    /// Raw (un-normalized) embeddings for a `k × d_in` batch.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "encoder forward",
                left: batch.shape(),
                right: self.weights[0].shape(),
            });
        }
        let mut h = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if self.layer_activates(l) {
                let act = self.activation;
                h = h.map(|x| act.apply(x))?;
            }
        }
        Ok(h)
    }

    /// Records the forward pass on a tape.
    ///
    /// Trainable encoders contribute parameter leaves; frozen encoders
    /// contribute constants, so no adjoint can reach their weights.
    pub fn forward_tape(&self, tape: &mut Tape, input: NodeId) -> Result<EncoderGraph> {
        let in_shape = tape.value(input).shape();
        if in_shape.1 != self.input_dim() {
            return Err(Error::Dimension {
                op: "encoder forward",
                left: in_shape,
                right: self.weights[0].shape(),
            });
        }
        let mut params = Vec::with_capacity(2 * self.weights.len());
        let mut h = input;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wn, bn) = if self.frozen {
                (tape.constant(w.clone()), tape.constant(b.clone()))
            } else {
                (tape.param(w.clone()), tape.param(b.clone()))
            };
            params.push(wn);
            params.push(bn);
            h = tape.matmul(h, wn)?;
            h = tape.add_row(h, bn)?;
            if self.layer_activates(l) {
                h = tape.activate(h, self.activation)?;
            }
        }
        Ok(EncoderGraph { output: h, params })
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ENCODER_MAGIC);
        w.u32(ENCODER_VERSION);
        let mut tag = match self.activation {
            Activation::Relu => 0u8,
            Activation::Tanh => 1u8,
        };
        if self.activate_output {
            tag |= TAG_OUTPUT_ACTIVATED;
        }
        if self.frozen {
            tag |= TAG_FROZEN;
        }
        w.u8(tag);
        w.usize32(self.weights.len());
        for &d in &self.dims {
            w.usize32(d);
        }
        w.u64(self.seed);
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            w.matrix_f32(wm);
            w.matrix_f32(b);
        }
        w.into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let enc = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(enc)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(ENCODER_MAGIC)?;
        r.version(ENCODER_VERSION)?;
        let tag_at = r.offset();
        let tag = r.u8("activation tag")?;
        let activation = match tag & TAG_ACTIVATION_MASK {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::format(tag_at, format!("unknown activation tag {other}"))),
        };
        if tag & !(TAG_ACTIVATION_MASK | TAG_OUTPUT_ACTIVATED | TAG_FROZEN) != 0 {
            return Err(Error::format(tag_at, format!("reserved bits set in tag {tag:#04x}")));
        }
        let layers_at = r.offset();
        let layers = r.u32("layer count")? as usize;
        if layers == 0 || layers > 1024 {
            return Err(Error::format(layers_at, format!("implausible layer count {layers}")));
        }
        let mut dims = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            let at = r.offset();
            let d = r.u32("layer dim")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero layer dimension"));
            }
            dims.push(d);
        }
        let seed = r.u64("init seed")?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for pair in dims.windows(2) {
            weights.push(r.matrix_f32(pair[0], pair[1], "weights")?);
            biases.push(r.matrix_f32(1, pair[1], "biases")?);
        }
        Ok(MlpEncoder {
            dims,
            weights,
            biases,
            activation,
            activate_output: tag & TAG_OUTPUT_ACTIVATED != 0,
            frozen: tag & TAG_FROZEN != 0,
            seed,
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!(
            "encoder needs input and output widths, got {dims:?}"
        )));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::config(format!("encoder width {i} is zero in {dims:?}")));
    }
    Ok(())
}

/// Frozen single-layer `tanh` encoder, a deterministic function of its seed
/// and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    inner: MlpEncoder,
}

impl ReferenceEncoder {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        let inner = MlpEncoder::init(&[input_dim, output_dim], Activation::Tanh, seed)?
            .with_output_activation(true)
            .frozen();
        Ok(ReferenceEncoder { inner })
    }

    /// The reference encoder for observations `x·R` of a modality whose
    /// inputs are an orthogonal rotation `R` of this encoder's inputs.
    ///
    /// The result maps `x·R` to the same embedding this encoder gives `x`
    /// (up to `f32` rounding of the rotated weights).
    pub fn rotated(&self, rotation: &Matrix) -> Result<Self> {
        let w = rotation.transpose().matmul(&self.inner.weights[0])?;
        let mut inner = MlpEncoder::from_layers(
            vec![w],
            vec![self.inner.biases[0].clone()],
            Activation::Tanh,
            true,
        )?
        .frozen();
        inner.seed = self.inner.seed;
        Ok(ReferenceEncoder { inner })
    }

    pub fn encoder(&self) -> &MlpEncoder {
        &self.inner
    }

    pub fn into_encoder(self) -> MlpEncoder {
        self.inner
    }
}
