//! Forward kernels: same-size convolution, cross-channel pooling, and 2x2
//! spatial pooling.
//!
//! Cross-channel pooling reduces channels `j*alpha .. j*alpha + alpha` to one
//! output channel per pixel; window and stride are both `alpha`, so the
//! spatial resolution never changes. Spatial pooling is the usual 2x2 max.
//!
//! Per output pixel every kernel accumulates taps in a fixed order (input
//! channel, then kernel row, then kernel column) in double precision. The
//! block-streaming executor drives the same per-pixel routines, which is what
//! makes its output bit-identical to the naive executor.

use crate::error::{Error, Result};
use crate::quant::{get_bit, LayerWeights};
use crate::tensor::{BitWidth, Tensor};

/// Convolution geometry. Spatial stride is always 1 and padding keeps the
/// output the same size as the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    /// Output channels of the filter bank. When the layer carries
    /// cross-channel pooling this is the expanded count (`alpha` times the
    /// stored output channels).
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) || kernel > 7 {
            return Err(Error::UnsupportedKernel { kernel });
        }
        Ok(ConvParams { out_channels, in_channels, kernel, padding: (kernel - 1) / 2 })
    }

    pub fn weights_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Reduction used by cross-channel pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PoolOp {
    Max,
    Avg,
    Min,
}

/// Cross-channel pooling parameters: non-overlapping windows of `alpha`
/// channels. `alpha = 1` disables condensation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct XPoolParams {
    pub alpha: usize,
    pub op: PoolOp,
}

impl XPoolParams {
    pub fn new(alpha: usize, op: PoolOp) -> Self {
        assert!(alpha >= 1, "alpha must be at least 1");
        XPoolParams { alpha, op }
    }

    pub fn disabled() -> Self {
        XPoolParams { alpha: 1, op: PoolOp::Max }
    }
}

/// Spatial pooling parameters: fixed 2x2 max window. Stride 2 halves each
/// spatial extent (rounding up); stride 1 preserves them, treating
/// out-of-range taps as minus infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SPoolParams {
    pub stride: usize,
}

impl SPoolParams {
    pub fn new(stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidParameter { what: "spatial pooling stride", value: stride as f64 });
        }
        Ok(SPoolParams { stride })
    }

    pub fn out_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// Argmax channel offsets recorded by cross-channel max pooling, one per
/// output element; each offset is within that element's `alpha` window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XPoolTrace {
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    offsets: Vec<u8>,
}

impl XPoolTrace {
    pub fn new(out_channels: usize, height: usize, width: usize) -> Self {
        XPoolTrace { out_channels, height, width, offsets: vec![0; out_channels * height * width] }
    }

    pub fn get(&self, j: usize, y: usize, x: usize) -> usize {
        self.offsets[(j * self.height + y) * self.width + x] as usize
    }

    pub fn set(&mut self, j: usize, y: usize, x: usize, offset: usize) {
        self.offsets[(j * self.height + y) * self.width + x] = offset as u8;
    }
}

/// Raw convolution accumulator for one output pixel: the tap sum over
/// (input channel, kernel row, kernel column) with zero padding, before any
/// scale or bias. Binary weights contribute `+x` or `-x`; the per-channel
/// scale is applied by [`conv_finalize`].
pub fn conv_pixel(
    input: &Tensor,
    weights: &LayerWeights,
    p: &ConvParams,
    out_channel: usize,
    y: usize,
    x: usize,
) -> f64 {
    let k = p.kernel;
    let pad = p.padding;
    let mut acc = 0.0f64;
    for n in 0..p.in_channels {
        let w_base = (out_channel * p.in_channels + n) * k * k;
        for u in 0..k {
            let iy = y + u;
            if iy < pad || iy - pad >= input.height() {
                continue;
            }
            for v in 0..k {
                let ix = x + v;
                if ix < pad || ix - pad >= input.width() {
                    continue;
                }
                let xval = input.get(n, iy - pad, ix - pad) as f64;
                match weights {
                    LayerWeights::Full { values, .. } => {
                        acc += values[w_base + u * k + v] as f64 * xval;
                    }
                    LayerWeights::Binary { codes, .. } => {
                        if get_bit(codes, w_base + u * k + v) {
                            acc += xval;
                        } else {
                            acc -= xval;
                        }
                    }
                }
            }
        }
    }
    acc
}

/// Apply the scheme's per-channel scale and optional bias to a raw
/// accumulator.
pub fn conv_finalize(weights: &LayerWeights, out_channel: usize, acc: f64) -> f64 {
    let (scaled, biases) = match weights {
        LayerWeights::Full { biases, .. } => (acc, biases),
        LayerWeights::Binary { scales, biases, .. } => {
            debug_assert!(acc.abs() < i32::MAX as f64, "accumulator exceeds modeled 32-bit width");
            (scales[out_channel] as f64 * acc, biases)
        }
    };
    match biases {
        Some(b) => scaled + b[out_channel] as f64,
        None => scaled,
    }
}

fn check_conv_inputs(input: &Tensor, weights: &LayerWeights, p: &ConvParams) -> Result<()> {
    if input.channels() != p.in_channels {
        return Err(Error::ChannelMismatch { expected: p.in_channels, got: input.channels() });
    }
    let needed = p.weights_len();
    let ok = match weights {
        LayerWeights::Full { values, .. } => values.len() == needed,
        LayerWeights::Binary { codes, scales, .. } => {
            codes.len() == needed.div_ceil(8) && scales.len() == p.out_channels
        }
    };
    if !ok {
        return Err(Error::UnsupportedMode {
            op: "conv_forward",
            detail: "weight bank size does not match layer parameters",
        });
    }
    Ok(())
}

/// Same-size convolution producing a 32-bit accumulator tensor (scale and
/// bias applied, activation not yet).
pub fn conv_forward(input: &Tensor, weights: &LayerWeights, p: &ConvParams) -> Result<Tensor> {
    check_conv_inputs(input, weights, p)?;
    let (h, w) = (input.height(), input.width());
    let mut out = Tensor::zeros(h, w, p.out_channels, BitWidth::B32);
    for oc in 0..p.out_channels {
        for y in 0..h {
            for x in 0..w {
                let acc = conv_pixel(input, weights, p, oc, y, x);
                out.set(oc, y, x, conv_finalize(weights, oc, acc) as f32, crate::tensor::Narrowing::Store32);
            }
        }
    }
    Ok(out)
}

/// Reduce one cross-channel window. Returns the pooled value and the offset
/// of the element that produced it (first occurrence wins ties, so max/min
/// gradients route to the lowest channel index).
pub fn xpool_reduce(window: &[f32], op: PoolOp) -> (f32, usize) {
    debug_assert!(!window.is_empty());
    match op {
        PoolOp::Max => {
            let mut best = window[0];
            let mut at = 0;
            for (i, &v) in window.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            (best, at)
        }
        PoolOp::Min => {
            let mut best = window[0];
            let mut at = 0;
            for (i, &v) in window.iter().enumerate().skip(1) {
                if v < best {
                    best = v;
                    at = i;
                }
            }
            (best, at)
        }
        PoolOp::Avg => {
            let sum: f64 = window.iter().map(|&v| v as f64).sum();
            ((sum / window.len() as f64) as f32, 0)
        }
    }
}

/// Cross-channel pooling over a whole tensor. Resolution is unchanged;
/// channels shrink by the window factor. A trace is recorded for max pooling.
pub fn xpool_forward(input: &Tensor, p: &XPoolParams) -> Result<(Tensor, Option<XPoolTrace>)> {
    if !input.channels().is_multiple_of(p.alpha) {
        return Err(Error::ChannelsNotDivisible { channels: input.channels(), alpha: p.alpha });
    }
    let (h, w) = (input.height(), input.width());
    let out_channels = input.channels() / p.alpha;
    let mut out = Tensor::zeros(h, w, out_channels, input.bits());
    let narrow = out.natural_narrowing();
    let mut trace = if p.op == PoolOp::Max {
        Some(XPoolTrace::new(out_channels, h, w))
    } else {
        None
    };
    let mut window = vec![0.0f32; p.alpha];
    for j in 0..out_channels {
        for y in 0..h {
            for x in 0..w {
                for (t, slot) in window.iter_mut().enumerate() {
                    *slot = input.get(j * p.alpha + t, y, x);
                }
                let (v, at) = xpool_reduce(&window, p.op);
                out.set(j, y, x, v, narrow);
                if let Some(tr) = trace.as_mut() {
                    tr.set(j, y, x, at);
                }
            }
        }
    }
    Ok((out, trace))
}

/// One 2x2 spatial pooling output value; taps outside the plane are skipped,
/// which matches padding with the minimum representable value.
pub fn spool_window_value(input: &Tensor, channel: usize, oy: usize, ox: usize, stride: usize) -> f32 {
    let mut best = f32::NEG_INFINITY;
    for dy in 0..2 {
        let iy = oy * stride + dy;
        if iy >= input.height() {
            continue;
        }
        for dx in 0..2 {
            let ix = ox * stride + dx;
            if ix >= input.width() {
                continue;
            }
            let v = input.get(channel, iy, ix);
            if v > best {
                best = v;
            }
        }
    }
    best
}

/// 2x2 max pooling over every channel.
pub fn spool_forward(input: &Tensor, p: &SPoolParams) -> Result<Tensor> {
    let (oh, ow) = p.out_dims(input.height(), input.width());
    let mut out = Tensor::zeros(oh, ow, input.channels(), input.bits());
    let narrow = out.natural_narrowing();
    for c in 0..input.channels() {
        for y in 0..oh {
            for x in 0..ow {
                out.set(c, y, x, spool_window_value(input, c, y, x, p.stride), narrow);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::decode_weight;
    use crate::tensor::Narrowing;

    fn tensor_from(h: usize, w: usize, c: usize, bits: BitWidth, vals: &[f32]) -> Tensor {
        assert_eq!(vals.len(), h * w * c);
        let mut t = Tensor::zeros(h, w, c, bits);
        let narrow = t.natural_narrowing();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.set(ch, y, x, vals[(ch * h + y) * w + x], narrow);
                }
            }
        }
        t
    }

    #[test]
    fn identity_kernel_widens_input() {
        let input = tensor_from(3, 3, 1, BitWidth::B8, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let p = ConvParams::new(1, 1, 1).unwrap();
        let w = LayerWeights::Full { values: vec![1.0], biases: None };
        let out = conv_forward(&input, &w, &p).unwrap();
        assert_eq!(out.bits(), BitWidth::B32);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.get(0, y, x), input.get(0, y, x));
            }
        }
    }

    #[test]
    fn box_filter_on_one_hot_matches_triple_loop() {
        // 3x3 all-ones kernel over a one-hot input is 1 exactly where the
        // kernel covers the hot pixel: a 3x3 plateau clipped at borders.
        let mut vals = vec![0.0; 9];
        vals[4] = 1.0; // center
        let input = tensor_from(3, 3, 1, BitWidth::B8, &vals);
        let p = ConvParams::new(1, 1, 3).unwrap();
        let w = LayerWeights::Full { values: vec![1.0; 9], biases: None };
        let out = conv_forward(&input, &w, &p).unwrap();
        // Independent scalar oracle.
        for y in 0..3i64 {
            for x in 0..3i64 {
                let mut expect = 0.0f64;
                for u in -1..=1i64 {
                    for v in -1..=1i64 {
                        let (iy, ix) = (y + u, x + v);
                        if (0..3).contains(&iy) && (0..3).contains(&ix) {
                            expect += vals[(iy * 3 + ix) as usize] as f64;
                        }
                    }
                }
                assert_eq!(out.get(0, y as usize, x as usize) as f64, expect);
            }
        }
    }

    #[test]
    fn kernel_constraints() {
        assert!(ConvParams::new(1, 1, 9).is_err());
        assert!(ConvParams::new(1, 1, 4).is_err());
        assert!(ConvParams::new(1, 1, 7).is_ok());
        let input = Tensor::zeros(2, 2, 3, BitWidth::B8);
        let p = ConvParams::new(1, 2, 1).unwrap();
        let w = LayerWeights::Full { values: vec![1.0, 1.0], biases: None };
        assert!(matches!(conv_forward(&input, &w, &p), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn binary_path_equals_dequantized_full_path() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let p = ConvParams::new(cout, cin, k).unwrap();
            let full: Vec<f32> = (0..p.weights_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (codes, scales) = crate::quant::binarize_weights(&full, cout).unwrap();
            // Dequantized bank: every weight replaced by its channel's +-scale.
            let dequant: Vec<f32> = full
                .iter()
                .enumerate()
                .map(|(i, _)| decode_weight(&codes, i, scales[i / (p.weights_len() / cout)]))
                .collect();
            let mut input = Tensor::zeros(h, w, cin, BitWidth::B2);
            for c in 0..cin {
                for y in 0..h {
                    for x in 0..w {
                        input.set(c, y, x, rng.gen_range(0..4) as f32, Narrowing::RoundSaturate);
                    }
                }
            }
            let binary = LayerWeights::Binary { codes, scales, biases: None };
            let fullw = LayerWeights::Full { values: dequant, biases: None };
            let a = conv_forward(&input, &binary, &p).unwrap();
            let b = conv_forward(&input, &fullw, &p).unwrap();
            assert_eq!(a, b, "case {case}");
        }
    }

    #[test]
    fn xpool_examples() {
        let input = tensor_from(1, 1, 2, BitWidth::B8, &[3.0, 7.0]);
        let (out, trace) = xpool_forward(&input, &XPoolParams::new(2, PoolOp::Max)).unwrap();
        assert_eq!(out.get(0, 0, 0), 7.0);
        assert_eq!(trace.unwrap().get(0, 0, 0), 1);

        let input = tensor_from(1, 1, 2, BitWidth::B8, &[2.0, 4.0]);
        let (out, trace) = xpool_forward(&input, &XPoolParams::new(2, PoolOp::Avg)).unwrap();
        assert_eq!(out.get(0, 0, 0), 3.0);
        assert!(trace.is_none());

        let input = tensor_from(2, 2, 3, BitWidth::B8, &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        for op in [PoolOp::Max, PoolOp::Avg, PoolOp::Min] {
            let (out, _) = xpool_forward(&input, &XPoolParams::new(1, op)).unwrap();
            assert_eq!(out, input, "alpha=1 must be the identity mapping");
        }
    }

    #[test]
    fn xpool_rejects_indivisible_channels() {
        let input = Tensor::zeros(1, 1, 3, BitWidth::B8);
        assert!(matches!(
            xpool_forward(&input, &XPoolParams::new(2, PoolOp::Max)),
            Err(Error::ChannelsNotDivisible { .. })
        ));
    }

    #[test]
    fn xpool_max_ties_break_to_lowest_channel() {
        let input = tensor_from(1, 1, 4, BitWidth::B8, &[5.0, 5.0, 1.0, 5.0]);
        let (out, trace) = xpool_forward(&input, &XPoolParams::new(4, PoolOp::Max)).unwrap();
        assert_eq!(out.get(0, 0, 0), 5.0);
        assert_eq!(trace.unwrap().get(0, 0, 0), 0);
    }

    #[test]
    fn spool_constant_plane() {
        let input = tensor_from(4, 4, 1, BitWidth::B8, &[9.0; 16]);
        let out = spool_forward(&input, &SPoolParams::new(2).unwrap()).unwrap();
        assert_eq!((out.height(), out.width()), (2, 2));
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(0, y, x), 9.0);
            }
        }
    }

    #[test]
    fn spool_stride2_window_max() {
        let vals: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let input = tensor_from(4, 4, 1, BitWidth::B8, &vals);
        let out = spool_forward(&input, &SPoolParams::new(2).unwrap()).unwrap();
        assert_eq!(
            [out.get(0, 0, 0), out.get(0, 0, 1), out.get(0, 1, 0), out.get(0, 1, 1)],
            [6.0, 8.0, 14.0, 16.0]
        );
    }

    #[test]
    fn spool_stride1_preserves_dims() {
        let input = Tensor::zeros(16, 16, 2, BitWidth::B8);
        let out = spool_forward(&input, &SPoolParams::new(1).unwrap()).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (16, 16, 2));
    }

    #[test]
    fn xpool_max_bounds_its_window() {
        // Max output dominates every contributing input and equals at least
        // one of them.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let alpha = [1usize, 2, 4][rng.gen_range(0..3)];
            let channels = alpha * rng.gen_range(1..=3);
            let vals: Vec<f32> = (0..channels * 4).map(|_| rng.gen_range(0..256) as f32).collect();
            let input = tensor_from(2, 2, channels, BitWidth::B8, &vals);
            let (out, _) = xpool_forward(&input, &XPoolParams::new(alpha, PoolOp::Max)).unwrap();
            for j in 0..channels / alpha {
                for y in 0..2 {
                    for x in 0..2 {
                        let window: Vec<f32> =
                            (0..alpha).map(|t| input.get(j * alpha + t, y, x)).collect();
                        let m = out.get(j, y, x);
                        assert!(window.iter().all(|&v| m >= v));
                        assert!(window.contains(&m));
                    }
                }
            }
        }
    }

    #[test]
    fn xpool_max_commutes_with_monotone_activation() {
        // relu(xpool_max(x)) == xpool_max(relu(x)) pointwise on codes.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let relu = crate::quant::ActQuantizer::LeakyRelu { slope: 0.0 };
        for _ in 0..20 {
            let vals: Vec<f32> = (0..8).map(|_| rng.gen_range(0..4) as f32).collect();
            let input = tensor_from(1, 1, 8, BitWidth::B8, &vals);
            let p = XPoolParams::new(4, PoolOp::Max);
            let (pooled, _) = xpool_forward(&input, &p).unwrap();
            let pooled_then_act = relu.apply(pooled.get(0, 0, 0) as f64);
            let acted: Vec<f32> = vals.iter().map(|&v| relu.apply(v as f64) as f32).collect();
            let acted_input = tensor_from(1, 1, 8, BitWidth::B8, &acted);
            let (act_then_pool, _) = xpool_forward(&acted_input, &p).unwrap();
            assert_eq!(pooled_then_act as f32, act_then_pool.get(0, 0, 0));
        }
    }
}
