//! Two executors with byte-level accounting.
//!
//! [`run_reference`] is the naive oracle: it materializes every feature-map
//! set as a full tensor, including the expanded ("virtual") sets produced by
//! conv layers before cross-channel pooling.
//!
//! [`run_streaming`] implements the four-level loop — layer, then output
//! channel, then block, then input channel — holding only `alpha` expanded
//! blocks plus one condensed output block at a time, so no virtual set is
//! ever written to feature-map storage. Its outputs are bit-identical to the
//! reference executor's.
//!
//! Traffic accounting counts whole-set passes: a conv layer reads its input
//! set once per computed output channel (expanded channels for the reference
//! executor, condensed channels for the streaming one, whose `alpha` sibling
//! channels share each block read). Halo overlap between neighbouring blocks
//! is not charged. The working-buffer metric models the hardware's 32-bit
//! block slots and applies to the streaming executor's conv layers only;
//! spatial pooling streams through without touching the virtual-map buffer.

use crate::error::{Error, Result};
use crate::layers::{
    conv_finalize, spool_forward, spool_window_value, xpool_forward, xpool_reduce,
};
use crate::netdef::{ConvLayerSpec, LayerShape, LayerSpec, NetworkDef, WeightStore};
use crate::quant::{ActQuantizer, LayerWeights};
use crate::tensor::{set_bytes, BitWidth, Block, BlockPlan, Rect, Tensor};

/// Per-set accounting entry.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SetRecord {
    /// Producing layer (`input` for the network input).
    pub layer: String,
    /// Set name: `input`, `convN.virtual`, `convN.out`, or `poolN.out`.
    pub set: String,
    /// True for expanded pre-condensation sets.
    pub virtual_set: bool,
    /// Storage size of the set in bytes (row-padded, at its storage width).
    pub bytes: u64,
    /// Bytes read from this set over the whole run.
    pub bytes_read: u64,
    /// Bytes written to this set over the whole run.
    pub bytes_written: u64,
    /// Whether the executor materialized the set in feature-map storage.
    pub materialized: bool,
    /// Peak modeled working-buffer bytes of the producing layer
    /// (virtual block slots plus the condensed output slot, 32-bit elements).
    pub peak_buffer_bytes: u64,
}

/// Ordered per-set log of one executor run.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize)]
pub struct ExecutionLog {
    pub sets: Vec<SetRecord>,
}

impl ExecutionLog {
    /// Total bytes written to feature-map storage (the input set is given,
    /// not written).
    pub fn total_written(&self) -> u64 {
        self.sets.iter().map(|s| s.bytes_written).sum()
    }

    pub fn total_read(&self) -> u64 {
        self.sets.iter().map(|s| s.bytes_read).sum()
    }

    /// Peak modeled working buffer across all layers.
    pub fn peak_buffer(&self) -> u64 {
        self.sets.iter().map(|s| s.peak_buffer_bytes).max().unwrap_or(0)
    }

    /// CSV export with the fixed column set
    /// `layer,set,virtual,bytes_read,bytes_written,peak_buffer_bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,set,virtual,bytes_read,bytes_written,peak_buffer_bytes\n");
        for s in &self.sets {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.layer, s.set, s.virtual_set, s.bytes_read, s.bytes_written, s.peak_buffer_bytes
            ));
        }
        out
    }

    fn record(&mut self, rec: SetRecord) {
        self.sets.push(rec);
    }

    fn add_read(&mut self, set: &str, bytes: u64) {
        if let Some(rec) = self.sets.iter_mut().rev().find(|r| r.set == set) {
            rec.bytes_read += bytes;
        }
    }
}

/// A produced feature-map set: the reference executor returns all of them
/// (virtual included); the streaming executor only the stored ones.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSet {
    pub name: String,
    pub virtual_set: bool,
    pub tensor: Tensor,
}

/// Output of one executor run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub output: Tensor,
    pub sets: Vec<NamedSet>,
    pub log: ExecutionLog,
}

/// The streaming executor's per-(channel, block) working storage: `alpha`
/// expanded-block accumulators plus one condensed output slot. Occupancy can
/// never exceed `alpha + 1` blocks.
pub struct VirtualBuffer {
    alpha: usize,
    rect: Rect,
    /// Expanded-channel accumulator grids. The modeled hardware holds 32-bit
    /// accumulators; the host accumulates in f64, where the quantized path's
    /// integer values are exact.
    acc: Vec<Vec<f64>>,
    /// Condensed output block slot.
    out: Block,
}

impl VirtualBuffer {
    fn new(alpha: usize, out_channel: usize, rect: Rect) -> Self {
        let buf = VirtualBuffer {
            alpha,
            rect,
            acc: (0..alpha).map(|_| vec![0.0; rect.area()]).collect(),
            out: Block::zeros(out_channel, rect),
        };
        assert!(buf.occupancy_blocks() <= buf.alpha + 1, "virtual buffer overflow");
        buf
    }

    fn occupancy_blocks(&self) -> usize {
        self.acc.len() + 1
    }

    /// Modeled bytes: every slot holds 32-bit elements.
    fn modeled_bytes(&self) -> u64 {
        self.occupancy_blocks() as u64 * self.rect.area() as u64 * 4
    }
}

fn input_matches(net: &NetworkDef, input: &Tensor) -> Result<()> {
    if input.height() != net.input_h
        || input.width() != net.input_w
        || input.channels() != net.input_c
        || input.bits() != net.input_bits
    {
        return Err(Error::InputMismatch {
            message: format!(
                "network expects {}x{}x{} at {} bits, got {}x{}x{} at {} bits",
                net.input_h,
                net.input_w,
                net.input_c,
                net.input_bits.bits(),
                input.height(),
                input.width(),
                input.channels(),
                input.bits().bits()
            ),
        });
    }
    if input.bits() == BitWidth::B32 {
        for c in 0..input.channels() {
            for y in 0..input.height() {
                for x in 0..input.width() {
                    let v = input.get(c, y, x);
                    if !v.is_finite() {
                        return Err(Error::NonFiniteInput { value: v as f64 });
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_weights(net: &NetworkDef, store: &WeightStore) -> Result<()> {
    let convs = net.conv_layers();
    if store.layers.len() != convs.len() {
        return Err(Error::Format {
            message: format!(
                "weight store has {} conv layers, network has {}",
                store.layers.len(),
                convs.len()
            ),
        });
    }
    for (i, ((spec, _), stored)) in convs.iter().zip(&store.layers).enumerate() {
        if stored.out_channels != spec.conv.out_channels
            || stored.in_channels != spec.conv.in_channels
            || stored.kernel != spec.conv.kernel
        {
            return Err(Error::LayerShapeMismatch {
                layer: i,
                message: "weight store does not match network topology".into(),
            });
        }
    }
    Ok(())
}

/// The virtual-set element: the finalized accumulator lands in a 32-bit
/// block slot first, then the activation maps it to storage precision. Both
/// executors go through the same two rounding points, which is what keeps
/// them bit-identical.
#[inline]
fn virtual_value(weights: &LayerWeights, act: &ActQuantizer, oc: usize, acc: f64) -> f32 {
    let acc32 = conv_finalize(weights, oc, acc) as f32;
    act.apply(acc32 as f64) as f32
}

/// Activation applied to a whole accumulator tensor, producing the virtual
/// set at storage precision.
fn activate_tensor(acc: &Tensor, act: &ActQuantizer, bits: BitWidth) -> Tensor {
    let mut out = Tensor::zeros(acc.height(), acc.width(), acc.channels(), bits);
    let narrow = out.natural_narrowing();
    for c in 0..acc.channels() {
        for y in 0..acc.height() {
            for x in 0..acc.width() {
                out.set(c, y, x, act.apply(acc.get(c, y, x) as f64) as f32, narrow);
            }
        }
    }
    out
}

/// Naive executor: every set, expanded sets included, is materialized as a
/// tensor. Serves as the oracle for the streaming executor.
pub fn run_reference(net: &NetworkDef, store: &WeightStore, input: &Tensor) -> Result<RunOutput> {
    input_matches(net, input)?;
    check_weights(net, store)?;
    let act_bits = net.scheme.act_bits();
    let shapes = net.shapes();
    let mut log = ExecutionLog::default();
    log.record(SetRecord {
        layer: "input".into(),
        set: "input".into(),
        virtual_set: false,
        bytes: input.byte_len(),
        bytes_read: 0,
        bytes_written: 0,
        materialized: true,
        peak_buffer_bytes: 0,
    });
    let mut sets = Vec::new();
    let mut cur = input.clone();
    let mut cur_set = "input".to_string();
    let mut conv_idx = 0usize;
    for (layer, shape) in net.layers.iter().zip(&shapes) {
        match layer {
            LayerSpec::Conv(spec) => {
                let weights = &store.layers[conv_idx].weights;
                conv_idx += 1;
                // One full input pass per expanded output channel.
                log.add_read(&cur_set, shape.expanded_c as u64 * cur.byte_len());
                let acc = crate::layers::conv_forward(&cur, weights, &spec.conv)?;
                let virt = activate_tensor(&acc, &spec.act, act_bits);
                if shape.alpha > 1 {
                    let virt_name = format!("{}.virtual", shape.name);
                    log.record(SetRecord {
                        layer: shape.name.clone(),
                        set: virt_name.clone(),
                        virtual_set: true,
                        bytes: virt.byte_len(),
                        bytes_read: 0,
                        bytes_written: virt.byte_len(),
                        materialized: true,
                        peak_buffer_bytes: 0,
                    });
                    let (pooled, _) = xpool_forward(&virt, &spec.xpool)?;
                    log.add_read(&virt_name, virt.byte_len());
                    let out_name = format!("{}.out", shape.name);
                    log.record(SetRecord {
                        layer: shape.name.clone(),
                        set: out_name.clone(),
                        virtual_set: false,
                        bytes: pooled.byte_len(),
                        bytes_read: 0,
                        bytes_written: pooled.byte_len(),
                        materialized: true,
                        peak_buffer_bytes: 0,
                    });
                    sets.push(NamedSet { name: virt_name, virtual_set: true, tensor: virt });
                    cur = pooled;
                    cur_set = out_name;
                } else {
                    // Condensation disabled: the virtual set is the output set.
                    let out_name = format!("{}.out", shape.name);
                    log.record(SetRecord {
                        layer: shape.name.clone(),
                        set: out_name.clone(),
                        virtual_set: false,
                        bytes: virt.byte_len(),
                        bytes_read: 0,
                        bytes_written: virt.byte_len(),
                        materialized: true,
                        peak_buffer_bytes: 0,
                    });
                    cur = virt;
                    cur_set = out_name;
                }
                sets.push(NamedSet {
                    name: cur_set.clone(),
                    virtual_set: false,
                    tensor: cur.clone(),
                });
            }
            LayerSpec::SPool(p) => {
                log.add_read(&cur_set, cur.byte_len());
                let pooled = spool_forward(&cur, p)?;
                let out_name = format!("{}.out", shape.name);
                log.record(SetRecord {
                    layer: shape.name.clone(),
                    set: out_name.clone(),
                    virtual_set: false,
                    bytes: pooled.byte_len(),
                    bytes_read: 0,
                    bytes_written: pooled.byte_len(),
                    materialized: true,
                    peak_buffer_bytes: 0,
                });
                cur = pooled;
                cur_set = out_name;
                sets.push(NamedSet {
                    name: cur_set.clone(),
                    virtual_set: false,
                    tensor: cur.clone(),
                });
            }
        }
    }
    Ok(RunOutput { output: cur, sets, log })
}

/// Compute one condensed output channel's blocks for a conv layer.
/// Accumulation per output pixel runs over input channels, then kernel rows,
/// then kernel columns — the same order as the reference kernel.
fn stream_conv_channel(
    input: &Tensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    j: usize,
    plan: &BlockPlan,
    peak: &mut u64,
) -> Result<Vec<Block>> {
    let conv = &spec.conv;
    let (alpha, op, act) = (spec.xpool.alpha, spec.xpool.op, &spec.act);
    let (h, w) = (input.height(), input.width());
    let pad = conv.padding;
    let k = conv.kernel;
    let mut blocks = Vec::new();
    for rect in plan.rects(h, w) {
        let mut buf = VirtualBuffer::new(alpha, j, rect);
        *peak = (*peak).max(buf.modeled_bytes());
        for n in 0..conv.in_channels {
            // Extract the input block with its halo, clipped to the plane.
            let hy = rect.y.saturating_sub(pad);
            let hx = rect.x.saturating_sub(pad);
            let hh = (rect.y + rect.h + pad).min(h) - hy;
            let hw = (rect.x + rect.w + pad).min(w) - hx;
            let halo = input.extract_block(n, Rect::new(hy, hx, hh, hw))?;
            for (t, acc) in buf.acc.iter_mut().enumerate() {
                let oc = j * alpha + t;
                let w_base = (oc * conv.in_channels + n) * k * k;
                for by in 0..rect.h {
                    let y = rect.y + by;
                    for bx in 0..rect.w {
                        let x = rect.x + bx;
                        let mut sum = acc[by * rect.w + bx];
                        for u in 0..k {
                            let iy = y + u;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for v in 0..k {
                                let ix = x + v;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let xv = halo.value(iy - pad - hy, ix - pad - hx) as f64;
                                match weights {
                                    LayerWeights::Full { values, .. } => {
                                        sum += values[w_base + u * k + v] as f64 * xv;
                                    }
                                    LayerWeights::Binary { codes, .. } => {
                                        if crate::quant::get_bit(codes, w_base + u * k + v) {
                                            sum += xv;
                                        } else {
                                            sum -= xv;
                                        }
                                    }
                                }
                            }
                        }
                        acc[by * rect.w + bx] = sum;
                    }
                }
            }
        }
        // Finalize the alpha virtual blocks, then condense into the output
        // slot.
        let mut window = vec![0.0f32; alpha];
        for i in 0..rect.area() {
            for (t, slot) in window.iter_mut().enumerate() {
                *slot = virtual_value(weights, act, j * alpha + t, buf.acc[t][i]);
            }
            buf.out.values[i] = if alpha == 1 { window[0] } else { xpool_reduce(&window, op).0 };
        }
        blocks.push(buf.out);
    }
    Ok(blocks)
}

/// Streaming executor: the four-level loop over layers, condensed output
/// channels, blocks, and input channels. Virtual sets are never written to
/// feature-map storage; the output is bit-identical to [`run_reference`].
///
/// `threads` caps the number of output channels processed concurrently
/// (1 = sequential). Results are identical for any value.
pub fn run_streaming(
    net: &NetworkDef,
    store: &WeightStore,
    input: &Tensor,
    plan: &BlockPlan,
    threads: usize,
) -> Result<RunOutput> {
    input_matches(net, input)?;
    check_weights(net, store)?;
    let act_bits = net.scheme.act_bits();
    let shapes = net.shapes();
    let mut log = ExecutionLog::default();
    log.record(SetRecord {
        layer: "input".into(),
        set: "input".into(),
        virtual_set: false,
        bytes: input.byte_len(),
        bytes_read: 0,
        bytes_written: 0,
        materialized: true,
        peak_buffer_bytes: 0,
    });
    let mut sets = Vec::new();
    let mut cur = input.clone();
    let mut cur_set = "input".to_string();
    let mut conv_idx = 0usize;
    for (layer, shape) in net.layers.iter().zip(&shapes) {
        match layer {
            LayerSpec::Conv(spec) => {
                let weights = &store.layers[conv_idx].weights;
                conv_idx += 1;
                let mut out = Tensor::zeros(shape.out_h, shape.out_w, shape.out_c, act_bits);
                let narrow = out.natural_narrowing();
                // One full input pass per condensed output channel: the
                // alpha expanded siblings share each block read.
                log.add_read(&cur_set, shape.out_c as u64 * cur.byte_len());
                let mut peak = 0u64;
                let channel_blocks = stream_all_channels(
                    &cur, weights, spec, shape, plan, threads, &mut peak,
                )?;
                for blocks in &channel_blocks {
                    for b in blocks {
                        out.insert_block(b, narrow)?;
                    }
                }
                if shape.alpha > 1 {
                    log.record(SetRecord {
                        layer: shape.name.clone(),
                        set: format!("{}.virtual", shape.name),
                        virtual_set: true,
                        bytes: set_bytes(shape.out_h, shape.out_w, shape.expanded_c, act_bits),
                        bytes_read: 0,
                        bytes_written: 0,
                        materialized: false,
                        peak_buffer_bytes: peak,
                    });
                }
                let out_name = format!("{}.out", shape.name);
                log.record(SetRecord {
                    layer: shape.name.clone(),
                    set: out_name.clone(),
                    virtual_set: false,
                    bytes: out.byte_len(),
                    bytes_read: 0,
                    bytes_written: out.byte_len(),
                    materialized: true,
                    peak_buffer_bytes: peak,
                });
                cur = out;
                cur_set = out_name;
                sets.push(NamedSet { name: cur_set.clone(), virtual_set: false, tensor: cur.clone() });
            }
            LayerSpec::SPool(p) => {
                log.add_read(&cur_set, cur.byte_len());
                let mut out = Tensor::zeros(shape.out_h, shape.out_w, shape.out_c, cur.bits());
                let narrow = out.natural_narrowing();
                for c in 0..shape.out_c {
                    for rect in plan.rects(shape.out_h, shape.out_w) {
                        let mut block = Block::zeros(c, rect);
                        for by in 0..rect.h {
                            for bx in 0..rect.w {
                                block.values[by * rect.w + bx] =
                                    spool_window_value(&cur, c, rect.y + by, rect.x + bx, p.stride);
                            }
                        }
                        out.insert_block(&block, narrow)?;
                    }
                }
                let out_name = format!("{}.out", shape.name);
                log.record(SetRecord {
                    layer: shape.name.clone(),
                    set: out_name.clone(),
                    virtual_set: false,
                    bytes: out.byte_len(),
                    bytes_read: 0,
                    bytes_written: out.byte_len(),
                    materialized: true,
                    peak_buffer_bytes: 0,
                });
                cur = out;
                cur_set = out_name;
                sets.push(NamedSet { name: cur_set.clone(), virtual_set: false, tensor: cur.clone() });
            }
        }
    }
    Ok(RunOutput { output: cur, sets, log })
}

fn stream_all_channels(
    input: &Tensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    shape: &LayerShape,
    plan: &BlockPlan,
    threads: usize,
    peak: &mut u64,
) -> Result<Vec<Vec<Block>>> {
    let run_channel = |j: usize| -> Result<(Vec<Block>, u64)> {
        let mut local_peak = 0u64;
        let blocks = stream_conv_channel(input, weights, spec, j, plan, &mut local_peak)?;
        Ok((blocks, local_peak))
    };

    #[cfg(not(target_arch = "wasm32"))]
    if threads > 1 && shape.out_c > 1 {
        let workers = threads.min(shape.out_c);
        let chunk = shape.out_c.div_ceil(workers);
        let run_channel = &run_channel;
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..shape.out_c)
                .collect::<Vec<_>>()
                .chunks(chunk)
                .map(|js| {
                    let js = js.to_vec();
                    scope.spawn(move || js.into_iter().map(run_channel).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("executor thread panicked"))
                .collect::<Vec<_>>()
        });
        let mut out = Vec::with_capacity(shape.out_c);
        for res in results {
            let (blocks, local_peak) = res?;
            *peak = (*peak).max(local_peak);
            out.push(blocks);
        }
        return Ok(out);
    }

    let _ = threads;
    let mut out = Vec::with_capacity(shape.out_c);
    for j in 0..shape.out_c {
        let (blocks, local_peak) = run_channel(j)?;
        *peak = (*peak).max(local_peak);
        out.push(blocks);
    }
    Ok(out)
}

/// First element-level difference between two runs' stored sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffSite {
    pub set: String,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
    pub reference: f32,
    pub streaming: f32,
}

/// Locate the first differing element between the stored (non-virtual) sets
/// of two runs, in layer order.
pub fn diff_stored_sets(reference: &RunOutput, streaming: &RunOutput) -> Option<DiffSite> {
    let ref_stored: Vec<&NamedSet> = reference.sets.iter().filter(|s| !s.virtual_set).collect();
    let stream_stored: Vec<&NamedSet> = streaming.sets.iter().filter(|s| !s.virtual_set).collect();
    debug_assert_eq!(ref_stored.len(), stream_stored.len());
    for (r, s) in ref_stored.iter().zip(&stream_stored) {
        debug_assert_eq!(r.name, s.name);
        if r.tensor == s.tensor {
            continue;
        }
        let t = &r.tensor;
        for c in 0..t.channels() {
            for y in 0..t.height() {
                for x in 0..t.width() {
                    let (rv, sv) = (t.get(c, y, x), s.tensor.get(c, y, x));
                    if rv.to_bits() != sv.to_bits() {
                        return Some(DiffSite {
                            set: r.name.clone(),
                            channel: c,
                            y,
                            x,
                            reference: rv,
                            streaming: sv,
                        });
                    }
                }
            }
        }
    }
    None
}

/// Side-by-side comparison of the two executors on identical inputs.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub equal: bool,
    pub first_diff: Option<DiffSite>,
    pub reference_log: ExecutionLog,
    pub streaming_log: ExecutionLog,
    /// Write traffic avoided by never materializing virtual sets.
    pub saved_bytes: u64,
}

/// Run both executors, assert bit equality, and report both logs.
pub fn compare_runs(
    net: &NetworkDef,
    store: &WeightStore,
    input: &Tensor,
    plan: &BlockPlan,
) -> Result<CompareReport> {
    let reference = run_reference(net, store, input)?;
    let streaming = run_streaming(net, store, input, plan, 1)?;
    let first_diff = diff_stored_sets(&reference, &streaming);
    let saved_bytes = reference.log.total_written() - streaming.log.total_written();
    Ok(CompareReport {
        equal: first_diff.is_none(),
        first_diff,
        reference_log: reference.log,
        streaming_log: streaming.log,
        saved_bytes,
    })
}
