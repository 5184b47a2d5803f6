//! Fully-connected regressor mapping an observation vector to body and camera
//! parameters, plus its checkpoint format.
//!
//! Output layout: `3J` axis-angle values, `S` shape coefficients, then three
//! camera values `(s_raw, tx, ty)`. The camera scale is `softplus(s_raw) + 0.5`
//! so it stays positive whatever the weights are.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::body_model::{BodyParams, CameraParams, Skeleton};
use crate::diffcore::{check_finite, DiffError, GradientVector, Layout, LayoutBlock, ParamVector, Primitive};
use crate::scalar::Scalar;

/// Added to `softplus` so the camera scale never reaches zero.
pub const CAMERA_SCALE_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub joints: usize,
    pub shape_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl RegressorSpec {
    pub fn new(joints: usize, shape_dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            joints,
            shape_dim,
            hidden,
            activation,
        }
    }

    /// Default spec for a skeleton: two hidden layers of 128 tanh units.
    pub fn for_skeleton<T: Scalar>(skeleton: &Skeleton<T>) -> Self {
        Self::new(
            skeleton.joint_count(),
            skeleton.shape_dim(),
            vec![128, 128],
            Activation::Tanh,
        )
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Flattened noisy 2D joints plus per-joint confidence.
    pub fn input_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn output_dim(&self) -> usize {
        3 * self.joints + self.shape_dim + 3
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim())) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Per layer: `layerK.weight` with shape `[out, in]` (row-major), then `layerK.bias`.
    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        for (k, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            blocks.push(LayoutBlock {
                name: format!("layer{k}.weight"),
                shape: vec![fan_out, fan_in],
            });
            blocks.push(LayoutBlock {
                name: format!("layer{k}.bias"),
                shape: vec![fan_out],
            });
        }
        Layout::new(blocks)
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// SHA-256 over the canonical JSON of the spec, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex_digest(json.as_bytes())
    }

    pub fn check_params<T: Scalar>(&self, params: &ParamVector<T>) -> Result<(), DiffError> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(DiffError::LayoutMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases, determined by `seed`.
pub fn init_params<T: Scalar>(spec: &RegressorSpec, seed: u64) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(T::lit(rng.random_range(-bound..bound)));
        }
        values.extend(std::iter::repeat_n(T::zero(), fan_out));
    }
    ParamVector::new(Arc::new(spec.layout()), values).expect("layout matches init")
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|}) avoids overflow for large |x|
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// One forward pass with every activation kept for [`RegressorPass::backward`].
#[derive(Debug, Clone)]
pub struct RegressorPass<T> {
    /// `activations[0]` is the input; `activations[k]` is the output of hidden layer `k`.
    activations: Vec<Vec<T>>,
    /// Raw (pre-transform) network output.
    pub raw: Vec<T>,
    pub body: BodyParams<T>,
    pub camera: CameraParams<T>,
}

pub fn regress<T: Scalar>(
    spec: &RegressorSpec,
    params: &ParamVector<T>,
    observation: &[T],
) -> Result<(BodyParams<T>, CameraParams<T>), DiffError> {
    let pass = forward(spec, params, observation)?;
    Ok((pass.body, pass.camera))
}

pub fn forward<T: Scalar>(
    spec: &RegressorSpec,
    params: &ParamVector<T>,
    observation: &[T],
) -> Result<RegressorPass<T>, DiffError> {
    spec.check_params(params)?;
    if observation.len() != spec.input_dim() {
        return Err(DiffError::Dimension {
            what: "observation",
            expected: spec.input_dim(),
            actual: observation.len(),
        });
    }
    let w = params.as_slice();
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut activations: Vec<Vec<T>> = Vec::with_capacity(dims.len());
    let mut input = observation.to_vec();
    let mut offset = 0;
    let mut raw = Vec::new();
    for (k, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let weight = &w[offset..offset + fan_in * fan_out];
        let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut out: Vec<T> = bias.to_vec();
        for (o, row) in out.iter_mut().zip(weight.chunks_exact(fan_in)) {
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(&input) {
                acc = acc + *a * *b;
            }
            *o = *o + acc;
        }
        check_finite(Primitive::Affine, &out)?;
        if k < last {
            match spec.activation {
                Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(T::zero())),
            }
            activations.push(std::mem::replace(&mut input, out));
        } else {
            activations.push(std::mem::take(&mut input));
            raw = out;
        }
    }

    let j = spec.joints;
    let theta = raw[..3 * j]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let beta = raw[3 * j..3 * j + spec.shape_dim].to_vec();
    let c = &raw[3 * j + spec.shape_dim..];
    let scale = softplus(c[0]) + T::lit(CAMERA_SCALE_OFFSET);
    check_finite(Primitive::Softplus, &[scale])?;
    Ok(RegressorPass {
        activations,
        body: BodyParams::estimate(theta, beta),
        camera: CameraParams {
            scale,
            trans: [c[1], c[2]],
        },
        raw,
    })
}

impl<T: Scalar> RegressorPass<T> {
    /// Backpropagates gradients on `(θ, β, camera scale, tx, ty)` to the weights.
    pub fn backward(
        &self,
        spec: &RegressorSpec,
        params: &ParamVector<T>,
        d_theta: &[[T; 3]],
        d_beta: &[T],
        d_camera: [T; 3],
    ) -> Result<GradientVector<T>, DiffError> {
        let j = spec.joints;
        let mut delta = Vec::with_capacity(spec.output_dim());
        for d in d_theta {
            delta.extend_from_slice(d);
        }
        delta.extend_from_slice(d_beta);
        let s_raw = self.raw[3 * j + spec.shape_dim];
        delta.push(d_camera[0] * sigmoid(s_raw));
        delta.push(d_camera[1]);
        delta.push(d_camera[2]);
        if delta.len() != spec.output_dim() {
            return Err(DiffError::Dimension {
                what: "output gradient",
                expected: spec.output_dim(),
                actual: delta.len(),
            });
        }

        let w = params.as_slice();
        let dims = spec.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for (fan_in, fan_out) in &dims {
            offsets.push(acc);
            acc += fan_in * fan_out + fan_out;
        }
        let mut grad = vec![T::zero(); acc];
        for k in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[k];
            let off = offsets[k];
            let input = &self.activations[k];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (o, d) in delta.iter().enumerate() {
                    gb[o] = *d;
                    if *d == T::zero() {
                        continue;
                    }
                    for (g, x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g = *d * *x;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let weight = &w[off..off + fan_in * fan_out];
            let mut d_in = vec![T::zero(); fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == T::zero() {
                    continue;
                }
                for (di, wv) in d_in.iter_mut().zip(&weight[o * fan_in..(o + 1) * fan_in]) {
                    *di = *di + *d * *wv;
                }
            }
            // input of layer k is the activated output of layer k-1
            match spec.activation {
                Activation::Tanh => {
                    for (di, a) in d_in.iter_mut().zip(input) {
                        *di = *di * (T::one() - *a * *a);
                    }
                    check_finite(Primitive::Tanh, &d_in)?;
                }
                Activation::Relu => {
                    for (di, a) in d_in.iter_mut().zip(input) {
                        if *a <= T::zero() {
                            *di = T::zero();
                        }
                    }
                    check_finite(Primitive::Relu, &d_in)?;
                }
            }
            delta = d_in;
        }
        check_finite(Primitive::Affine, &grad)?;
        GradientVector::new(Arc::clone(params.layout()), grad)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint at byte {position}: {reason}")]
    Corrupt { position: usize, reason: String },
    #[error("checkpoint was written for a different regressor spec")]
    SpecMismatch,
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MAPV";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON written next to every checkpoint (`<file>.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub spec: RegressorSpec,
    pub seed: u64,
    pub role: String,
    pub param_count: usize,
}

/// Binary checkpoint:
///
/// ```text
/// magic "MAPV" | version u32 LE | spec hash (64 ASCII hex bytes)
/// | layout JSON length u64 LE | layout JSON | value count u64 LE
/// | values as f64 LE
/// ```
pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    spec: &RegressorSpec,
    params: &ParamVector<T>,
) -> Result<(), CheckpointError> {
    spec.check_params(params).map_err(|_| CheckpointError::SpecMismatch)?;
    let layout = serde_json::to_vec(params.layout().as_ref())?;
    let mut buf = Vec::with_capacity(96 + layout.len() + 8 * params.len());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(spec.hash().as_bytes());
    buf.extend_from_slice(&(layout.len() as u64).to_le_bytes());
    buf.extend_from_slice(&layout);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(
    mut input: R,
    spec: &RegressorSpec,
) -> Result<ParamVector<T>, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor::new(&bytes);
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    if cur.take(64)? != spec.hash().as_bytes() {
        return Err(CheckpointError::SpecMismatch);
    }
    let layout_len = cur.u64()? as usize;
    let layout_pos = cur.pos;
    let layout: Layout =
        serde_json::from_slice(cur.take(layout_len)?).map_err(|e| CheckpointError::Corrupt {
            position: layout_pos,
            reason: format!("layout: {e}"),
        })?;
    if layout != spec.layout() {
        return Err(CheckpointError::SpecMismatch);
    }
    let n = cur.u64()? as usize;
    if n != layout.len() {
        return Err(CheckpointError::Corrupt {
            position: cur.pos - 8,
            reason: format!("value count {n} does not match layout length {}", layout.len()),
        });
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(T::lit(cur.f64()?));
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt {
            position: cur.pos,
            reason: "trailing bytes".into(),
        });
    }
    ParamVector::new(Arc::new(layout), values).map_err(|e| CheckpointError::Corrupt {
        position: 0,
        reason: e.to_string(),
    })
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt {
                position: self.pos,
                reason: format!("truncated: needed {n} more bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
