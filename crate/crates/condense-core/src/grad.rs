//! Double-precision training path: dense forward kernels and the analytic
//! adjoints needed to train full-precision networks that contain
//! cross-channel pooling layers.
//!
//! Cross-channel max pooling backpropagates by routing each output-pixel
//! gradient to the channel recorded as the argmax during the forward pass;
//! average pooling splits the gradient evenly over its window. Quantized
//! layers have no backward path.

use crate::error::{Error, Result};
use crate::layers::{ConvParams, PoolOp, XPoolParams, XPoolTrace};
use crate::quant::LayerWeights;

/// Dense (C, H, W) array of f64 values, the working representation of the
/// training path.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PlaneMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        PlaneMap { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &PlaneMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Full-precision convolution kernel with per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub params: ConvParams,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        let params = ConvParams::new(out_channels, in_channels, kernel)?;
        Ok(ConvKernel {
            params,
            weights: vec![0.0; params.weights_len()],
            bias: vec![0.0; out_channels],
        })
    }

    #[inline]
    fn widx(&self, oc: usize, n: usize, u: usize, v: usize) -> usize {
        ((oc * self.params.in_channels + n) * self.params.kernel + u) * self.params.kernel + v
    }
}

/// Same-size convolution on dense maps.
pub fn conv_fwd(input: &PlaneMap, k: &ConvKernel) -> Result<PlaneMap> {
    let p = &k.params;
    if input.channels != p.in_channels {
        return Err(Error::ChannelMismatch { expected: p.in_channels, got: input.channels });
    }
    let mut out = PlaneMap::zeros(p.out_channels, input.height, input.width);
    let pad = p.padding;
    for oc in 0..p.out_channels {
        for y in 0..input.height {
            for x in 0..input.width {
                let mut acc = k.bias[oc];
                for n in 0..p.in_channels {
                    for u in 0..p.kernel {
                        let iy = y + u;
                        if iy < pad || iy - pad >= input.height {
                            continue;
                        }
                        for v in 0..p.kernel {
                            let ix = x + v;
                            if ix < pad || ix - pad >= input.width {
                                continue;
                            }
                            acc += k.weights[k.widx(oc, n, u, v)] * input.get(n, iy - pad, ix - pad);
                        }
                    }
                }
                out.set(oc, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// Gradients produced by the convolution adjoint.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: PlaneMap,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Standard convolution adjoints: gradients with respect to the input, the
/// weights, and the bias.
pub fn conv_bwd(grad_out: &PlaneMap, input: &PlaneMap, k: &ConvKernel) -> Result<ConvGrads> {
    let p = &k.params;
    if grad_out.channels != p.out_channels {
        return Err(Error::ChannelMismatch { expected: p.out_channels, got: grad_out.channels });
    }
    if input.channels != p.in_channels {
        return Err(Error::ChannelMismatch { expected: p.in_channels, got: input.channels });
    }
    let pad = p.padding;
    let mut grads = ConvGrads {
        input: PlaneMap::zeros(input.channels, input.height, input.width),
        weights: vec![0.0; k.weights.len()],
        bias: vec![0.0; p.out_channels],
    };
    for oc in 0..p.out_channels {
        for y in 0..input.height {
            for x in 0..input.width {
                let g = grad_out.get(oc, y, x);
                grads.bias[oc] += g;
                for n in 0..p.in_channels {
                    for u in 0..p.kernel {
                        let iy = y + u;
                        if iy < pad || iy - pad >= input.height {
                            continue;
                        }
                        for v in 0..p.kernel {
                            let ix = x + v;
                            if ix < pad || ix - pad >= input.width {
                                continue;
                            }
                            let xi = input.idx(n, iy - pad, ix - pad);
                            grads.input.data[xi] += k.weights[k.widx(oc, n, u, v)] * g;
                            grads.weights[k.widx(oc, n, u, v)] += input.data[xi] * g;
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Convolution backward for a stored layer: defined for full-precision
/// weights only; binarized layers report an unsupported-mode error.
pub fn conv_backward(
    grad_out: &PlaneMap,
    input: &PlaneMap,
    weights: &LayerWeights,
    p: &ConvParams,
) -> Result<ConvGrads> {
    let (values, biases) = match weights {
        LayerWeights::Full { values, biases } => (values, biases),
        LayerWeights::Binary { .. } => {
            return Err(Error::UnsupportedMode {
                op: "conv_backward",
                detail: "gradients are only defined for full-precision layers",
            })
        }
    };
    let mut kernel = ConvKernel::new(p.out_channels, p.in_channels, p.kernel)?;
    for (dst, src) in kernel.weights.iter_mut().zip(values.iter()) {
        *dst = *src as f64;
    }
    if let Some(b) = biases {
        for (dst, src) in kernel.bias.iter_mut().zip(b.iter()) {
            *dst = *src as f64;
        }
    }
    conv_bwd(grad_out, input, &kernel)
}

/// Cross-channel pooling forward on dense maps. Max and min record the
/// winning channel offset per output element.
pub fn xpool_fwd(input: &PlaneMap, p: &XPoolParams) -> Result<(PlaneMap, Option<XPoolTrace>)> {
    if !input.channels.is_multiple_of(p.alpha) {
        return Err(Error::ChannelsNotDivisible { channels: input.channels, alpha: p.alpha });
    }
    let out_channels = input.channels / p.alpha;
    let mut out = PlaneMap::zeros(out_channels, input.height, input.width);
    let mut trace = match p.op {
        PoolOp::Max | PoolOp::Min => Some(XPoolTrace::new(out_channels, input.height, input.width)),
        PoolOp::Avg => None,
    };
    for j in 0..out_channels {
        for y in 0..input.height {
            for x in 0..input.width {
                match p.op {
                    PoolOp::Max | PoolOp::Min => {
                        let mut best = input.get(j * p.alpha, y, x);
                        let mut at = 0;
                        for t in 1..p.alpha {
                            let v = input.get(j * p.alpha + t, y, x);
                            let wins = if p.op == PoolOp::Max { v > best } else { v < best };
                            if wins {
                                best = v;
                                at = t;
                            }
                        }
                        out.set(j, y, x, best);
                        trace.as_mut().unwrap().set(j, y, x, at);
                    }
                    PoolOp::Avg => {
                        let mut sum = 0.0;
                        for t in 0..p.alpha {
                            sum += input.get(j * p.alpha + t, y, x);
                        }
                        out.set(j, y, x, sum / p.alpha as f64);
                    }
                }
            }
        }
    }
    Ok((out, trace))
}

/// Cross-channel pooling backward. Max (and min) route each gradient to the
/// recorded channel; average spreads `grad / alpha` over the window.
pub fn xpool_backward(
    grad_out: &PlaneMap,
    trace: Option<&XPoolTrace>,
    p: &XPoolParams,
) -> Result<PlaneMap> {
    let mut grad_in = PlaneMap::zeros(grad_out.channels * p.alpha, grad_out.height, grad_out.width);
    match p.op {
        PoolOp::Max | PoolOp::Min => {
            let tr = trace.ok_or_else(|| Error::TraceMismatch {
                detail: "max/min pooling backward requires the forward trace".into(),
            })?;
            if tr.out_channels != grad_out.channels
                || tr.height != grad_out.height
                || tr.width != grad_out.width
            {
                return Err(Error::TraceMismatch {
                    detail: format!(
                        "trace shape ({}, {}, {}) does not match gradient ({}, {}, {})",
                        tr.out_channels,
                        tr.height,
                        tr.width,
                        grad_out.channels,
                        grad_out.height,
                        grad_out.width
                    ),
                });
            }
            for j in 0..grad_out.channels {
                for y in 0..grad_out.height {
                    for x in 0..grad_out.width {
                        let t = tr.get(j, y, x);
                        debug_assert!(t < p.alpha);
                        grad_in.set(j * p.alpha + t, y, x, grad_out.get(j, y, x));
                    }
                }
            }
        }
        PoolOp::Avg => {
            for j in 0..grad_out.channels {
                for y in 0..grad_out.height {
                    for x in 0..grad_out.width {
                        let share = grad_out.get(j, y, x) / p.alpha as f64;
                        for t in 0..p.alpha {
                            grad_in.set(j * p.alpha + t, y, x, share);
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Leaky-ReLU forward.
pub fn leaky_fwd(input: &PlaneMap, slope: f64) -> PlaneMap {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Leaky-ReLU backward given the layer's forward input.
pub fn leaky_bwd(grad_out: &PlaneMap, input: &PlaneMap, slope: f64) -> PlaneMap {
    let mut out = grad_out.clone();
    for (g, &x) in out.data.iter_mut().zip(input.data.iter()) {
        if x < 0.0 {
            *g *= slope;
        }
    }
    out
}

/// One stage of a trainable network.
#[derive(Debug, Clone)]
pub enum TrainLayer {
    Conv(ConvKernel),
    Act { slope: f64 },
    XPool(XPoolParams),
}

/// A small sequential full-precision network used for gradient checks and
/// training smoke tests. Parameters are the conv weights and biases,
/// flattened layer by layer.
#[derive(Debug, Clone)]
pub struct TrainNet {
    pub layers: Vec<TrainLayer>,
}

struct Tape {
    inputs: Vec<PlaneMap>,
    traces: Vec<Option<XPoolTrace>>,
}

impl TrainNet {
    pub fn forward(&self, x: &PlaneMap) -> Result<PlaneMap> {
        Ok(self.forward_tape(x)?.0)
    }

    fn forward_tape(&self, x: &PlaneMap) -> Result<(PlaneMap, Tape)> {
        let mut tape = Tape { inputs: Vec::new(), traces: Vec::new() };
        let mut cur = x.clone();
        for layer in &self.layers {
            tape.inputs.push(cur.clone());
            let (next, trace) = match layer {
                TrainLayer::Conv(k) => (conv_fwd(&cur, k)?, None),
                TrainLayer::Act { slope } => (leaky_fwd(&cur, *slope), None),
                TrainLayer::XPool(p) => xpool_fwd(&cur, p)?,
            };
            tape.traces.push(trace);
            cur = next;
        }
        Ok((cur, tape))
    }

    /// Backpropagate `grad_out`; returns the gradient with respect to the
    /// network input and accumulates parameter gradients into `param_grads`
    /// (flat layout matching [`TrainNet::get_param`]).
    fn backward(&self, tape: &Tape, grad_out: PlaneMap, param_grads: &mut [f64]) -> Result<PlaneMap> {
        let mut grad = grad_out;
        let mut param_end = self.param_count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                TrainLayer::Conv(k) => {
                    let n_params = k.weights.len() + k.bias.len();
                    let g = conv_bwd(&grad, &tape.inputs[i], k)?;
                    let base = param_end - n_params;
                    for (dst, src) in
                        param_grads[base..base + k.weights.len()].iter_mut().zip(&g.weights)
                    {
                        *dst += *src;
                    }
                    for (dst, src) in
                        param_grads[base + k.weights.len()..param_end].iter_mut().zip(&g.bias)
                    {
                        *dst += *src;
                    }
                    param_end = base;
                    grad = g.input;
                }
                TrainLayer::Act { slope } => {
                    grad = leaky_bwd(&grad, &tape.inputs[i], *slope);
                }
                TrainLayer::XPool(p) => {
                    grad = xpool_backward(&grad, tape.traces[i].as_ref(), p)?;
                }
            }
        }
        Ok(grad)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                TrainLayer::Conv(k) => k.weights.len() + k.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if let TrainLayer::Conv(k) = layer {
                if idx < k.weights.len() {
                    return k.weights[idx];
                }
                idx -= k.weights.len();
                if idx < k.bias.len() {
                    return k.bias[idx];
                }
                idx -= k.bias.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, v: f64) {
        for layer in self.layers.iter_mut() {
            if let TrainLayer::Conv(k) = layer {
                if idx < k.weights.len() {
                    k.weights[idx] = v;
                    return;
                }
                idx -= k.weights.len();
                if idx < k.bias.len() {
                    k.bias[idx] = v;
                    return;
                }
                idx -= k.bias.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Mean squared error over a sample set.
    pub fn mse(&self, inputs: &[PlaneMap], targets: &[PlaneMap]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, t) in inputs.iter().zip(targets) {
            let y = self.forward(x)?;
            debug_assert!(y.same_shape(t));
            for (a, b) in y.data.iter().zip(t.data.iter()) {
                let d = a - b;
                total += d * d;
            }
            count += y.data.len();
        }
        Ok(total / count as f64)
    }

    /// Analytic gradient of [`TrainNet::mse`] with respect to all parameters,
    /// plus the gradient with respect to each input sample.
    pub fn mse_grads(
        &self,
        inputs: &[PlaneMap],
        targets: &[PlaneMap],
    ) -> Result<(Vec<f64>, Vec<PlaneMap>)> {
        let mut param_grads = vec![0.0; self.param_count()];
        let mut input_grads = Vec::with_capacity(inputs.len());
        let mut passes = Vec::with_capacity(inputs.len());
        let mut count = 0usize;
        for x in inputs {
            let pass = self.forward_tape(x)?;
            count += pass.0.data.len();
            passes.push(pass);
        }
        for ((y, tape), t) in passes.iter().zip(targets) {
            let mut grad_out = PlaneMap::zeros(y.channels, y.height, y.width);
            for (g, (a, b)) in grad_out.data.iter_mut().zip(y.data.iter().zip(t.data.iter())) {
                *g = 2.0 * (a - b) / count as f64;
            }
            input_grads.push(self.backward(tape, grad_out, &mut param_grads)?);
        }
        Ok((param_grads, input_grads))
    }

    /// Plain gradient-descent step.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) {
        for (i, g) in grads.iter().enumerate() {
            let v = self.get_param(i) - lr * g;
            self.set_param(i, v);
        }
    }
}
