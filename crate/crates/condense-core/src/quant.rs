//! Weight binarization and low-bit activation quantization.
//!
//! The quantized regime pairs 1-bit filter weights (a sign code plus one
//! positive scale per output channel, decoding to exactly `{-scale, +scale}`)
//! with 2-bit feature maps produced by a half-wave quantizer. The
//! full-precision path keeps 32-bit weights and leaky-ReLU activations.

use crate::error::{Error, Result};

/// Weight storage mode of a layer or network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum WeightScheme {
    Full32,
    Binary1,
}

/// Activation applied to convolution accumulators before storage.
///
/// `Hwgq2` is a half-wave uniform quantizer: non-positive inputs map to code
/// 0, positive inputs to `clamp(floor(x / delta + 0.5), 0, 3)`, so the
/// dequantized levels are `{0, delta, 2*delta, 3*delta}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ActQuantizer {
    Identity,
    LeakyRelu { slope: f32 },
    Hwgq2 { delta: f32 },
}

impl ActQuantizer {
    pub fn hwgq2(delta: f32) -> Result<Self> {
        if delta.is_nan() || delta <= 0.0 || !delta.is_finite() {
            return Err(Error::InvalidParameter { what: "hwgq2 step", value: delta as f64 });
        }
        Ok(ActQuantizer::Hwgq2 { delta })
    }

    /// Apply to a finite value. Callers validate finiteness up front; use
    /// [`quantize_act`] for the checked entry point.
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ActQuantizer::Identity => x,
            ActQuantizer::LeakyRelu { slope } => {
                if x < 0.0 {
                    slope as f64 * x
                } else {
                    x
                }
            }
            ActQuantizer::Hwgq2 { delta } => {
                if x <= 0.0 {
                    0.0
                } else {
                    (x / delta as f64 + 0.5).floor().min(3.0)
                }
            }
        }
    }

    /// True when outputs are 2-bit codes rather than real values.
    pub fn is_quantizing(&self) -> bool {
        matches!(self, ActQuantizer::Hwgq2 { .. })
    }
}

/// Checked activation: errors on NaN or infinite input, otherwise applies the
/// quantizer. For `Hwgq2` the returned value is the integer code as a real.
pub fn quantize_act(x: f64, q: &ActQuantizer) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput { value: x });
    }
    Ok(q.apply(x))
}

/// Filter bank of one convolution layer.
///
/// Values are ordered `(out, in, ky, kx)`; binary codes pack that order
/// least-significant-bit first, one sign bit per weight (bit set = positive).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Full {
        values: Vec<f32>,
        biases: Option<Vec<f32>>,
    },
    Binary {
        codes: Vec<u8>,
        scales: Vec<f32>,
        biases: Option<Vec<f32>>,
    },
}

impl LayerWeights {
    pub fn scheme(&self) -> WeightScheme {
        match self {
            LayerWeights::Full { .. } => WeightScheme::Full32,
            LayerWeights::Binary { .. } => WeightScheme::Binary1,
        }
    }

    pub fn biases(&self) -> Option<&[f32]> {
        match self {
            LayerWeights::Full { biases, .. } | LayerWeights::Binary { biases, .. } => {
                biases.as_deref()
            }
        }
    }
}

/// Set bit `idx` semantics for packed sign codes.
#[inline]
pub fn get_bit(bytes: &[u8], idx: usize) -> bool {
    (bytes[idx / 8] >> (idx % 8)) & 1 == 1
}

/// Pack booleans least-significant-bit first, padding the last byte with
/// zeros.
pub fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut cur = 0u8;
    let mut n = 0;
    for b in bits {
        if b {
            cur |= 1 << (n % 8);
        }
        n += 1;
        if n % 8 == 0 {
            out.push(cur);
            cur = 0;
        }
    }
    if n % 8 != 0 {
        out.push(cur);
    }
    out
}

/// Binarize a full-precision filter bank: one sign bit per weight
/// (`w >= 0` maps to `+1`) and one scale per output channel equal to the mean
/// absolute weight of that channel's filter.
///
/// Errors with [`Error::ZeroScaleFilter`] if any output channel's filter is
/// identically zero; such a layer should stay at full precision.
pub fn binarize_weights(values: &[f32], out_channels: usize) -> Result<(Vec<u8>, Vec<f32>)> {
    assert!(out_channels > 0 && !values.is_empty(), "filter bank must be non-empty");
    assert_eq!(values.len() % out_channels, 0, "bank length must split evenly over channels");
    let per_channel = values.len() / out_channels;
    let mut scales = Vec::with_capacity(out_channels);
    for c in 0..out_channels {
        let slice = &values[c * per_channel..(c + 1) * per_channel];
        let sum: f64 = slice.iter().map(|w| w.abs() as f64).sum();
        let scale = (sum / per_channel as f64) as f32;
        if scale <= 0.0 {
            return Err(Error::ZeroScaleFilter { channel: c });
        }
        scales.push(scale);
    }
    let codes = pack_bits(values.iter().map(|&w| w >= 0.0));
    Ok((codes, scales))
}

/// Decode one binarized weight to `+scale` or `-scale`.
#[inline]
pub fn decode_weight(codes: &[u8], idx: usize, scale: f32) -> f32 {
    if get_bit(codes, idx) {
        scale
    } else {
        -scale
    }
}
