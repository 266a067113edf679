//! Network descriptions: a line-oriented text format, the built-in network
//! constructors, and the binary weight-file format.
//!
//! A network is an ordered list of layers over a fixed input shape. Conv
//! layers carry the expanded filter bank (`out` counts filters, so a layer
//! with cross-channel pooling condenses `out` channels down to
//! `out / alpha`); spatial pooling layers only change resolution.
//!
//! ## Text format
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! input 512 512 3 8
//! scheme w1a2
//! conv out=32 in=3 k=3 alpha=2 op=max act=hwgq2:0.5 bias=no
//! spool stride=2
//! ```
//!
//! `input` takes height, width, channels, bits. `conv` requires `out` and
//! `k`; `alpha` defaults to 1 (condensation disabled), `op` to `max`, `act`
//! to the scheme's default activation, `bias` to `no`, and `in` is optional
//! but checked against the channel chain when present.
//!
//! ## Weight file (`CNDW`)
//!
//! Magic `CNDW`, version and conv-layer count as u32 LE, then per layer:
//! out/in/k as u32 LE, a scheme byte (0 = full32, 1 = binary1), per-channel
//! scales (f32 LE, all 1.0 for full32), a bias flag byte plus per-channel
//! f32 biases when set, then the weights: f32 LE values for full32 or sign
//! bits packed LSB-first for binary1.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{ConvParams, PoolOp, SPoolParams, XPoolParams};
use crate::quant::{binarize_weights, ActQuantizer, LayerWeights, WeightScheme};
use crate::tensor::{read_exact, read_u32, BitWidth};

/// Magic chars of the weight file.
pub const WEIGHTS_MAGIC: [u8; 4] = *b"CNDW";
/// Weight file format version.
pub const WEIGHTS_VERSION: u32 = 1;

/// Net-level quantization regime: full-precision weights and feature maps,
/// or 1-bit weights with 2-bit feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum QuantScheme {
    Full32,
    W1A2,
}

impl QuantScheme {
    pub fn weight_scheme(self) -> WeightScheme {
        match self {
            QuantScheme::Full32 => WeightScheme::Full32,
            QuantScheme::W1A2 => WeightScheme::Binary1,
        }
    }

    /// Storage width of computed feature-map sets.
    pub fn act_bits(self) -> BitWidth {
        match self {
            QuantScheme::Full32 => BitWidth::B32,
            QuantScheme::W1A2 => BitWidth::B2,
        }
    }

    fn default_act(self) -> ActQuantizer {
        match self {
            QuantScheme::Full32 => ActQuantizer::LeakyRelu { slope: 0.1 },
            QuantScheme::W1A2 => ActQuantizer::Hwgq2 { delta: 0.5 },
        }
    }
}

/// A convolution layer, optionally fused with cross-channel pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    /// Filter-bank geometry; `conv.out_channels` is the expanded count.
    pub conv: ConvParams,
    /// Condensation window; `alpha = 1` disables it.
    pub xpool: XPoolParams,
    pub act: ActQuantizer,
    pub bias: bool,
}

impl ConvLayerSpec {
    /// Channels actually stored after condensation.
    pub fn stored_channels(&self) -> usize {
        self.conv.out_channels / self.xpool.alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    SPool(SPoolParams),
}

/// Validated network description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub input_bits: BitWidth,
    pub scheme: QuantScheme,
    pub layers: Vec<LayerSpec>,
}

/// Resolved shape of one layer in the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub index: usize,
    /// `convN` or `poolN`, both 1-based.
    pub name: String,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Stored channels after condensation.
    pub out_c: usize,
    /// Expanded channels before condensation (equals `out_c` for pooling
    /// layers and for conv layers with `alpha = 1`).
    pub expanded_c: usize,
    pub alpha: usize,
}

impl LayerShape {
    pub fn is_conv(&self) -> bool {
        self.name.starts_with("conv")
    }
}

impl NetworkDef {
    /// Walk the layer chain and resolve every layer's shapes. The chain is
    /// valid by construction for parsed and built networks.
    pub fn shapes(&self) -> Vec<LayerShape> {
        let (mut h, mut w, mut c) = (self.input_h, self.input_w, self.input_c);
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut convs, mut pools) = (0usize, 0usize);
        for (index, layer) in self.layers.iter().enumerate() {
            let shape = match layer {
                LayerSpec::Conv(spec) => {
                    convs += 1;
                    let s = LayerShape {
                        index,
                        name: format!("conv{convs}"),
                        in_h: h,
                        in_w: w,
                        in_c: c,
                        out_h: h,
                        out_w: w,
                        out_c: spec.stored_channels(),
                        expanded_c: spec.conv.out_channels,
                        alpha: spec.xpool.alpha,
                    };
                    c = s.out_c;
                    s
                }
                LayerSpec::SPool(p) => {
                    pools += 1;
                    let (oh, ow) = p.out_dims(h, w);
                    let s = LayerShape {
                        index,
                        name: format!("pool{pools}"),
                        in_h: h,
                        in_w: w,
                        in_c: c,
                        out_h: oh,
                        out_w: ow,
                        out_c: c,
                        expanded_c: c,
                        alpha: 1,
                    };
                    h = oh;
                    w = ow;
                    s
                }
            };
            shapes.push(shape);
        }
        shapes
    }

    /// Conv layers in order, with their resolved input channel counts.
    pub fn conv_layers(&self) -> Vec<(&ConvLayerSpec, LayerShape)> {
        let shapes = self.shapes();
        self.layers
            .iter()
            .zip(shapes)
            .filter_map(|(l, s)| match l {
                LayerSpec::Conv(spec) => Some((spec, s)),
                LayerSpec::SPool(_) => None,
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut c = self.input_c;
        for layer in &self.layers {
            if let LayerSpec::Conv(spec) = layer {
                if spec.conv.in_channels != c {
                    return Err(Error::ChannelMismatch { expected: c, got: spec.conv.in_channels });
                }
                if spec.conv.out_channels % spec.xpool.alpha != 0 {
                    return Err(Error::ChannelsNotDivisible {
                        channels: spec.conv.out_channels,
                        alpha: spec.xpool.alpha,
                    });
                }
                if self.scheme == QuantScheme::W1A2 && !spec.act.is_quantizing() {
                    return Err(Error::InvalidParameter {
                        what: "w1a2 networks require hwgq2 activations",
                        value: 0.0,
                    });
                }
                c = spec.stored_channels();
            }
        }
        Ok(())
    }

    /// Convert to the full-precision regime: leaky-ReLU activations with the
    /// final conv layer left linear.
    pub fn to_full_precision(&self) -> NetworkDef {
        let mut out = self.clone();
        out.scheme = QuantScheme::Full32;
        let last_conv = out
            .layers
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, l)| matches!(l, LayerSpec::Conv(_)).then_some(i));
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if let LayerSpec::Conv(spec) = layer {
                spec.act = if Some(i) == last_conv {
                    ActQuantizer::Identity
                } else {
                    ActQuantizer::LeakyRelu { slope: 0.1 }
                };
            }
        }
        out
    }

    /// Convert to the quantized regime with the given half-wave step.
    pub fn to_w1a2(&self, delta: f32) -> Result<NetworkDef> {
        let act = ActQuantizer::hwgq2(delta)?;
        let mut out = self.clone();
        out.scheme = QuantScheme::W1A2;
        for layer in out.layers.iter_mut() {
            if let LayerSpec::Conv(spec) = layer {
                spec.act = act;
            }
        }
        Ok(out)
    }

    /// Canonical text form; parsing it back yields an equal definition.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "input {} {} {} {}\n",
            self.input_h,
            self.input_w,
            self.input_c,
            self.input_bits.bits()
        ));
        out.push_str(match self.scheme {
            QuantScheme::Full32 => "scheme full32\n",
            QuantScheme::W1A2 => "scheme w1a2\n",
        });
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv(spec) => {
                    let op = match spec.xpool.op {
                        PoolOp::Max => "max",
                        PoolOp::Avg => "avg",
                        PoolOp::Min => "min",
                    };
                    let act = match spec.act {
                        ActQuantizer::Identity => "identity".to_string(),
                        ActQuantizer::LeakyRelu { slope } => {
                            if slope == 0.0 {
                                "relu".to_string()
                            } else {
                                format!("leaky:{slope}")
                            }
                        }
                        ActQuantizer::Hwgq2 { delta } => format!("hwgq2:{delta}"),
                    };
                    out.push_str(&format!(
                        "conv out={} in={} k={} alpha={} op={} act={} bias={}\n",
                        spec.conv.out_channels,
                        spec.conv.in_channels,
                        spec.conv.kernel,
                        spec.xpool.alpha,
                        op,
                        act,
                        if spec.bias { "yes" } else { "no" },
                    ));
                }
                LayerSpec::SPool(p) => {
                    out.push_str(&format!("spool stride={}\n", p.stride));
                }
            }
        }
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_kv(token: &str, line: usize) -> Result<(&str, &str)> {
    token
        .split_once('=')
        .ok_or_else(|| parse_err(line, format!("expected key=value, got `{token}`")))
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| parse_err(line, format!("invalid number `{value}` for `{key}`")))
}

/// Parse the text format into a validated [`NetworkDef`]. Errors carry the
/// 1-based line number of the offending directive.
pub fn parse_network(text: &str) -> Result<NetworkDef> {
    let mut input: Option<(usize, usize, usize, BitWidth)> = None;
    let mut scheme = QuantScheme::Full32;
    let mut scheme_line: Option<usize> = None;
    let mut layers: Vec<(usize, LayerSpec)> = Vec::new();
    let mut cur_channels: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let directive = tokens.next().unwrap();
        match directive {
            "input" => {
                if input.is_some() {
                    return Err(parse_err(lineno, "duplicate input directive"));
                }
                let vals: Vec<&str> = tokens.collect();
                if vals.len() != 4 {
                    return Err(parse_err(lineno, "input expects: height width channels bits"));
                }
                let h: usize = parse_num(vals[0], "height", lineno)?;
                let w: usize = parse_num(vals[1], "width", lineno)?;
                let c: usize = parse_num(vals[2], "channels", lineno)?;
                let bits_raw: u32 = parse_num(vals[3], "bits", lineno)?;
                let bits = BitWidth::from_bits(bits_raw)
                    .map_err(|_| parse_err(lineno, format!("unsupported input bits {bits_raw}")))?;
                if h == 0 || w == 0 || c == 0 {
                    return Err(parse_err(lineno, "input extents must be positive"));
                }
                input = Some((h, w, c, bits));
                cur_channels = Some(c);
            }
            "scheme" => {
                if !layers.is_empty() {
                    return Err(parse_err(lineno, "scheme must precede layer directives"));
                }
                scheme = match tokens.next() {
                    Some("full32") => QuantScheme::Full32,
                    Some("w1a2") => QuantScheme::W1A2,
                    other => {
                        return Err(parse_err(
                            lineno,
                            format!("unknown scheme `{}`", other.unwrap_or("")),
                        ))
                    }
                };
                scheme_line = Some(lineno);
            }
            "conv" => {
                let c_in = cur_channels
                    .ok_or_else(|| parse_err(lineno, "conv before input directive"))?;
                let mut out: Option<usize> = None;
                let mut k: Option<usize> = None;
                let mut alpha = 1usize;
                let mut declared_in: Option<usize> = None;
                let mut op = PoolOp::Max;
                let mut act: Option<ActQuantizer> = None;
                let mut bias = false;
                for token in tokens {
                    let (key, value) = parse_kv(token, lineno)?;
                    match key {
                        "out" => out = Some(parse_num(value, key, lineno)?),
                        "k" => k = Some(parse_num(value, key, lineno)?),
                        "alpha" => alpha = parse_num(value, key, lineno)?,
                        "in" => declared_in = Some(parse_num(value, key, lineno)?),
                        "op" => {
                            op = match value {
                                "max" => PoolOp::Max,
                                "avg" => PoolOp::Avg,
                                "min" => PoolOp::Min,
                                other => {
                                    return Err(parse_err(lineno, format!("unknown op `{other}`")))
                                }
                            }
                        }
                        "act" => {
                            act = Some(match value {
                                "identity" => ActQuantizer::Identity,
                                "relu" => ActQuantizer::LeakyRelu { slope: 0.0 },
                                other => {
                                    if let Some(s) = other.strip_prefix("leaky:") {
                                        ActQuantizer::LeakyRelu {
                                            slope: parse_num(s, "leaky slope", lineno)?,
                                        }
                                    } else if let Some(d) = other.strip_prefix("hwgq2:") {
                                        ActQuantizer::hwgq2(parse_num(d, "hwgq2 step", lineno)?)
                                            .map_err(|e| parse_err(lineno, e.to_string()))?
                                    } else {
                                        return Err(parse_err(
                                            lineno,
                                            format!("unknown activation `{other}`"),
                                        ));
                                    }
                                }
                            })
                        }
                        "bias" => {
                            bias = match value {
                                "yes" => true,
                                "no" => false,
                                other => {
                                    return Err(parse_err(
                                        lineno,
                                        format!("bias must be yes or no, got `{other}`"),
                                    ))
                                }
                            }
                        }
                        other => return Err(parse_err(lineno, format!("unknown key `{other}`"))),
                    }
                }
                let out = out.ok_or_else(|| parse_err(lineno, "conv requires out="))?;
                let k = k.ok_or_else(|| parse_err(lineno, "conv requires k="))?;
                if let Some(declared) = declared_in {
                    if declared != c_in {
                        return Err(parse_err(
                            lineno,
                            format!("channel chain mismatch: in={declared} but previous layer provides {c_in}"),
                        ));
                    }
                }
                if alpha == 0 || out % alpha != 0 {
                    return Err(parse_err(
                        lineno,
                        format!("alpha {alpha} does not divide expanded channels {out}"),
                    ));
                }
                let conv = ConvParams::new(out, c_in, k).map_err(|e| parse_err(lineno, e.to_string()))?;
                let spec = ConvLayerSpec {
                    conv,
                    xpool: XPoolParams::new(alpha, op),
                    act: act.unwrap_or_else(|| scheme.default_act()),
                    bias,
                };
                cur_channels = Some(spec.stored_channels());
                layers.push((lineno, LayerSpec::Conv(spec)));
            }
            "spool" => {
                if cur_channels.is_none() {
                    return Err(parse_err(lineno, "spool before input directive"));
                }
                let mut stride = 2usize;
                for token in tokens {
                    let (key, value) = parse_kv(token, lineno)?;
                    match key {
                        "stride" => stride = parse_num(value, key, lineno)?,
                        other => return Err(parse_err(lineno, format!("unknown key `{other}`"))),
                    }
                }
                let p = SPoolParams::new(stride).map_err(|e| parse_err(lineno, e.to_string()))?;
                layers.push((lineno, LayerSpec::SPool(p)));
            }
            other => return Err(parse_err(lineno, format!("unknown directive `{other}`"))),
        }
    }

    let (input_h, input_w, input_c, input_bits) =
        input.ok_or_else(|| parse_err(1, "missing input directive"))?;
    let def = NetworkDef {
        input_h,
        input_w,
        input_c,
        input_bits,
        scheme,
        layers: layers.iter().map(|(_, l)| l.clone()).collect(),
    };
    def.validate().map_err(|e| match e {
        Error::InvalidParameter { what, .. } if what.contains("hwgq2") => {
            parse_err(scheme_line.unwrap_or(1), "w1a2 networks require hwgq2 activations")
        }
        other => other,
    })?;
    Ok(def)
}

/// Stored output channels of each of the nine conv layers.
const STORED_OUT: [usize; 9] = [16, 32, 64, 128, 256, 512, 1024, 1024, 30];

/// The base detection network: nine conv layers and six 2x2 max-pooling
/// layers over a 512x512x3 8-bit input, quantized to 1-bit weights and 2-bit
/// feature maps. The sixth pooling layer keeps resolution (stride 1).
pub fn build_tiny_yolov2() -> NetworkDef {
    build_condensation(1).expect("alpha 1 is always supported")
}

/// The condensation variant: the first four conv layers expand their filter
/// banks by `alpha` and condense back with cross-channel max pooling.
/// `alpha = 1` is exactly [`build_tiny_yolov2`].
pub fn build_condensation(alpha: usize) -> Result<NetworkDef> {
    if ![1, 2, 4].contains(&alpha) {
        return Err(Error::InvalidParameter { what: "condensation factor", value: alpha as f64 });
    }
    let scheme = QuantScheme::W1A2;
    let mut layers = Vec::new();
    let mut c_in = 3usize;
    for (i, &stored) in STORED_OUT.iter().enumerate() {
        let layer_alpha = if i < 4 { alpha } else { 1 };
        let kernel = if i == 8 { 1 } else { 3 };
        let conv = ConvParams::new(stored * layer_alpha, c_in, kernel)?;
        layers.push(LayerSpec::Conv(ConvLayerSpec {
            conv,
            xpool: XPoolParams::new(layer_alpha, PoolOp::Max),
            act: scheme.default_act(),
            bias: false,
        }));
        c_in = stored;
        // Pooling layers follow conv1-conv6; the sixth preserves resolution.
        if i < 5 {
            layers.push(LayerSpec::SPool(SPoolParams::new(2)?));
        } else if i == 5 {
            layers.push(LayerSpec::SPool(SPoolParams::new(1)?));
        }
    }
    let def = NetworkDef {
        input_h: 512,
        input_w: 512,
        input_c: 3,
        input_bits: BitWidth::B8,
        scheme,
        layers,
    };
    def.validate()?;
    Ok(def)
}

/// One conv layer's stored filter bank plus its geometry, making the store
/// self-describing for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: LayerWeights,
}

/// All conv-layer filter banks of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub layers: Vec<StoredLayer>,
}

impl WeightStore {
    /// Serialize in the `CNDW` format.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            for field in [layer.out_channels as u32, layer.in_channels as u32, layer.kernel as u32] {
                w.write_all(&field.to_le_bytes())?;
            }
            match &layer.weights {
                LayerWeights::Full { values, biases } => {
                    w.write_all(&[0u8])?;
                    for _ in 0..layer.out_channels {
                        w.write_all(&1.0f32.to_le_bytes())?;
                    }
                    write_biases(w, biases, layer.out_channels)?;
                    for v in values {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                LayerWeights::Binary { codes, scales, biases } => {
                    w.write_all(&[1u8])?;
                    for s in scales {
                        w.write_all(&s.to_le_bytes())?;
                    }
                    write_biases(w, biases, layer.out_channels)?;
                    w.write_all(codes)?;
                }
            }
        }
        Ok(())
    }

    /// Deserialize and validate against a network's conv-layer topology.
    /// Errors name the first offending layer (0-based conv index).
    pub fn load<R: Read>(r: &mut R, net: &NetworkDef) -> Result<WeightStore> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "weight header")?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::Format { message: format!("bad weight magic {magic:?}") });
        }
        let version = read_u32(r, "weight version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format { message: format!("unsupported weight version {version}") });
        }
        let expected = net.conv_layers();
        let count = read_u32(r, "layer count")? as usize;
        if count != expected.len() {
            return Err(Error::Format {
                message: format!("file has {count} conv layers, network has {}", expected.len()),
            });
        }
        let mut layers = Vec::with_capacity(count);
        for (i, (spec, _)) in expected.iter().enumerate() {
            let layer = read_stored_layer(r, i).map_err(|e| match e {
                Error::Format { message } => {
                    Error::LayerShapeMismatch { layer: i, message }
                }
                other => other,
            })?;
            if layer.out_channels != spec.conv.out_channels
                || layer.in_channels != spec.conv.in_channels
                || layer.kernel != spec.conv.kernel
            {
                return Err(Error::LayerShapeMismatch {
                    layer: i,
                    message: format!(
                        "file declares {}x{}x{}x{}, network expects {}x{}x{}x{}",
                        layer.out_channels,
                        layer.in_channels,
                        layer.kernel,
                        layer.kernel,
                        spec.conv.out_channels,
                        spec.conv.in_channels,
                        spec.conv.kernel,
                        spec.conv.kernel,
                    ),
                });
            }
            if layer.weights.scheme() != net.scheme.weight_scheme() {
                return Err(Error::LayerShapeMismatch {
                    layer: i,
                    message: "weight scheme does not match the network's quantization scheme".into(),
                });
            }
            layers.push(layer);
        }
        Ok(WeightStore { layers })
    }
}

fn write_biases<W: Write>(w: &mut W, biases: &Option<Vec<f32>>, out_channels: usize) -> Result<()> {
    match biases {
        Some(b) => {
            debug_assert_eq!(b.len(), out_channels);
            w.write_all(&[1u8])?;
            for v in b {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    Ok(())
}

fn read_f32_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_stored_layer<R: Read>(r: &mut R, index: usize) -> Result<StoredLayer> {
    let what = format!("conv layer {index}");
    let out_channels = read_u32(r, &what)? as usize;
    let in_channels = read_u32(r, &what)? as usize;
    let kernel = read_u32(r, &what)? as usize;
    let mut scheme = [0u8; 1];
    read_exact(r, &mut scheme, &what)?;
    let scales = read_f32_vec(r, out_channels, &what)?;
    let mut bias_flag = [0u8; 1];
    read_exact(r, &mut bias_flag, &what)?;
    let biases = match bias_flag[0] {
        0 => None,
        1 => Some(read_f32_vec(r, out_channels, &what)?),
        other => {
            return Err(Error::Format { message: format!("{what}: bad bias flag {other}") });
        }
    };
    let n_weights = out_channels * in_channels * kernel * kernel;
    let weights = match scheme[0] {
        0 => LayerWeights::Full { values: read_f32_vec(r, n_weights, &what)?, biases },
        1 => {
            let mut codes = vec![0u8; n_weights.div_ceil(8)];
            read_exact(r, &mut codes, &what)?;
            LayerWeights::Binary { codes, scales, biases }
        }
        other => {
            return Err(Error::Format { message: format!("{what}: bad scheme byte {other}") });
        }
    };
    Ok(StoredLayer { out_channels, in_channels, kernel, weights })
}

/// Seeded random weights for a network: full-precision values drawn uniformly
/// from [-0.5, 0.5), binarized afterwards when the network is quantized.
pub fn init_random_weights(net: &NetworkDef, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (spec, _) in net.conv_layers() {
        let n = spec.conv.weights_len();
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let biases = if spec.bias {
            Some((0..spec.conv.out_channels).map(|_| rng.gen_range(-0.5f32..0.5)).collect())
        } else {
            None
        };
        let weights = match net.scheme {
            QuantScheme::Full32 => LayerWeights::Full { values, biases },
            QuantScheme::W1A2 => {
                let (codes, scales) = binarize_weights(&values, spec.conv.out_channels)?;
                LayerWeights::Binary { codes, scales, biases }
            }
        };
        layers.push(StoredLayer {
            out_channels: spec.conv.out_channels,
            in_channels: spec.conv.in_channels,
            kernel: spec.conv.kernel,
            weights,
        });
    }
    Ok(WeightStore { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_net_parses() {
        let def = parse_network("input 8 8 3 8\nconv out=4 k=3 alpha=1 act=relu\n").unwrap();
        assert_eq!(def.layers.len(), 1);
        let shapes = def.shapes();
        assert_eq!(shapes[0].out_c, 4);
        assert_eq!(shapes[0].expanded_c, 4);
        assert_eq!((shapes[0].out_h, shapes[0].out_w), (8, 8));
    }

    #[test]
    fn builder_round_trips_through_text() {
        for alpha in [1, 2, 4] {
            let def = build_condensation(alpha).unwrap();
            let text = def.to_text();
            let back = parse_network(&text).unwrap();
            assert_eq!(back, def, "alpha={alpha}");
        }
    }

    #[test]
    fn condensation_alpha2_expands_conv1() {
        let def = build_condensation(2).unwrap();
        let shapes = def.shapes();
        let conv1 = shapes.iter().find(|s| s.name == "conv1").unwrap();
        assert_eq!(conv1.expanded_c, 32);
        assert_eq!(conv1.out_c, 16);
    }

    #[test]
    fn tiny_yolov2_final_layer_is_30x1x1() {
        let def = build_tiny_yolov2();
        let convs = def.conv_layers();
        assert_eq!(convs.len(), 9);
        let (spec, shape) = &convs[8];
        assert_eq!(spec.conv.out_channels, 30);
        assert_eq!(spec.conv.kernel, 1);
        assert_eq!(shape.out_c, 30);
        assert_eq!((shape.out_h, shape.out_w), (16, 16));
        // Six pooling layers, the last one resolution-preserving.
        let pools: Vec<_> = def
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::SPool(p) => Some(p.stride),
                _ => None,
            })
            .collect();
        assert_eq!(pools, vec![2, 2, 2, 2, 2, 1]);
    }

    #[test]
    fn condensation_conv4_shapes() {
        let def = build_condensation(2).unwrap();
        let shapes = def.shapes();
        let conv4 = shapes.iter().find(|s| s.name == "conv4").unwrap();
        assert_eq!(conv4.expanded_c, 256);
        assert_eq!(conv4.out_c, 128);
    }

    #[test]
    fn condensation_weight_count_delta() {
        let count = |def: &NetworkDef| -> usize {
            def.conv_layers().iter().map(|(s, _)| s.conv.weights_len()).sum()
        };
        let tiny = count(&build_tiny_yolov2());
        let cond2 = count(&build_condensation(2).unwrap());
        assert_eq!(cond2 - tiny, 97_200);
    }

    #[test]
    fn unsupported_alpha_rejected() {
        assert!(build_condensation(3).is_err());
        assert!(build_condensation(0).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_network("input 8 8 3 8\nconv out=4 k=3 frob=1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let err = parse_network("input 8 8 3 8\nconv out=4 k=3 in=5\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("channel chain"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }

        let err = parse_network("input 8 8 3 8\nconv out=5 k=3 alpha=2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# tiny test\n\ninput 4 4 1 8  # trailing comment\nconv out=2 k=1\n";
        let def = parse_network(text).unwrap();
        assert_eq!(def.layers.len(), 1);
        assert_eq!(def.scheme, QuantScheme::Full32);
    }

    #[test]
    fn weight_store_round_trip_bytes() {
        let def = parse_network("input 8 8 3 8\nscheme w1a2\nconv out=4 k=3 alpha=2 bias=yes\n")
            .unwrap();
        let store = init_random_weights(&def, 7).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let back = WeightStore::load(&mut buf.as_slice(), &def).unwrap();
        assert_eq!(back, store);
        let mut buf2 = Vec::new();
        back.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_weight_file_names_layer() {
        let def =
            parse_network("input 8 8 3 8\nconv out=2 k=3\nspool stride=2\nconv out=4 k=1\n").unwrap();
        let store = init_random_weights(&def, 3).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        // Cut into the second conv layer's payload.
        let cut = buf.len() - 3;
        let err = WeightStore::load(&mut &buf[..cut], &def).unwrap_err();
        match err {
            Error::LayerShapeMismatch { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn wrong_topology_names_first_offending_layer() {
        let def = parse_network("input 8 8 3 8\nconv out=2 k=3\n").unwrap();
        let other = parse_network("input 8 8 3 8\nconv out=4 k=3\n").unwrap();
        let store = init_random_weights(&other, 1).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let err = WeightStore::load(&mut buf.as_slice(), &def).unwrap_err();
        assert!(matches!(err, Error::LayerShapeMismatch { layer: 0, .. }), "{err}");
    }

    #[test]
    fn seeded_weights_are_reproducible_and_seed_sensitive() {
        let small =
            parse_network("input 8 8 3 8\nscheme w1a2\nconv out=8 k=3 alpha=2\nconv out=4 k=1\n")
                .unwrap();
        let a = init_random_weights(&small, 11).unwrap();
        let b = init_random_weights(&small, 11).unwrap();
        assert_eq!(a, b);
        let mut bytes_a = Vec::new();
        a.save(&mut bytes_a).unwrap();
        let mut distinct = 0;
        for seed in 12..20 {
            let c = init_random_weights(&small, seed).unwrap();
            let mut bytes_c = Vec::new();
            c.save(&mut bytes_c).unwrap();
            if bytes_c != bytes_a {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 8);
    }

    #[test]
    fn w1a2_requires_hwgq2() {
        let err = parse_network("input 8 8 3 8\nscheme w1a2\nconv out=4 k=3 act=relu\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
