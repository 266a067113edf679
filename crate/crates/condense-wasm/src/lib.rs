//! Browser bindings for the condensation-network engine.
//!
//! Three entry points back the demo page, all returning JSON strings the
//! page renders onto canvases and tables:
//!
//! - [`traffic_report`] — per-set storage traffic with and without virtual
//!   feature maps for the built-in networks (the bandwidth explorer),
//! - [`memory_report`] — the weight/feature-map memory table plus the MAC
//!   model against the base network,
//! - [`stream_demo`] — a live run of both executors on a small seeded
//!   network, returning log rows, the buffer bound, and rendered channel
//!   planes.
//!
//! Build with `wasm-pack build --target web` (or `cargo build --target
//! wasm32-unknown-unknown` plus `wasm-bindgen`); the same functions compile
//! and run natively for tests.

use condense_core::analysis;
use condense_core::exec::{diff_stored_sets, run_reference, run_streaming};
use condense_core::harness::random_input;
use condense_core::layers::PoolOp;
use condense_core::netdef::{build_condensation, init_random_weights, parse_network, NetworkDef};
use condense_core::tensor::BlockPlan;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn err_json(message: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": message.to_string() }).to_string()
}

fn built(alpha: u32) -> Result<NetworkDef, String> {
    build_condensation(alpha as usize).map_err(|e| e.to_string())
}

/// Storage-traffic report for a built-in network at the given activation
/// width. JSON: `{sets: [{layer, set, virtual_set, bytes}...],
/// total_without_virtual, total_with_virtual, savings_fraction,
/// published: {without_kb, with_kb}}`.
#[wasm_bindgen]
pub fn traffic_report(alpha: u32, act_bits: u32) -> String {
    let net = match built(alpha) {
        Ok(n) => n,
        Err(e) => return err_json(e),
    };
    match analysis::traffic_totals(&net, act_bits) {
        Ok(report) => {
            #[derive(Serialize)]
            struct Out {
                #[serde(flatten)]
                report: analysis::TrafficReport,
                published_without_kb: u64,
                published_with_kb: u64,
            }
            serde_json::to_string(&Out {
                report,
                published_without_kb: analysis::REPORTED_TRAFFIC_KB_WITHOUT,
                published_with_kb: analysis::REPORTED_TRAFFIC_KB_WITH,
            })
            .unwrap_or_else(err_json)
        }
        Err(e) => err_json(e),
    }
}

/// Memory table plus MAC model for a built-in network against the base
/// (`alpha = 1`) network.
#[wasm_bindgen]
pub fn memory_report(alpha: u32, w_bits: u32) -> String {
    let (base, net) = match (built(1), built(alpha)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return err_json(e),
    };
    let memory = match analysis::memory_report(&net, w_bits, 8) {
        Ok(m) => m,
        Err(e) => return err_json(e),
    };
    let perf = match analysis::mac_model(
        ("base", &base),
        ("selected", &net),
        analysis::REPORTED_MACS_PER_CYCLE,
        analysis::REPORTED_CLOCK_HZ,
    ) {
        Ok(p) => p,
        Err(e) => return err_json(e),
    };
    #[derive(Serialize)]
    struct Out {
        memory: analysis::MemoryReport,
        perf: analysis::PerfReport,
    }
    serde_json::to_string(&Out { memory, perf }).unwrap_or_else(err_json)
}

#[derive(Serialize)]
struct PlaneImage {
    set: String,
    channel: usize,
    height: usize,
    width: usize,
    /// Row-major grayscale, 0..=255.
    pixels: Vec<u8>,
}

#[derive(Serialize)]
struct StreamDemo {
    net_text: String,
    equal: bool,
    peak_buffer_bytes: u64,
    saved_bytes: u64,
    streaming_written: u64,
    reference_written: u64,
    log_csv: String,
    planes: Vec<PlaneImage>,
}

/// Run both executors on a small seeded condensation network and report the
/// outcome. `op` is `max`, `avg`, or `min`; `size` is the square input
/// extent (clamped to 16..=96); block extents are clamped to 4..=64.
#[wasm_bindgen]
pub fn stream_demo(alpha: u32, size: u32, seed: u32, block: u32, op: &str) -> String {
    let alpha = match alpha {
        1 | 2 | 4 => alpha as usize,
        _ => return err_json("alpha must be 1, 2, or 4"),
    };
    let size = size.clamp(16, 96) as usize;
    let block = block.clamp(4, 64) as usize;
    let op = match op {
        "max" => PoolOp::Max,
        "avg" => PoolOp::Avg,
        "min" => PoolOp::Min,
        other => return err_json(format!("unknown pooling op `{other}`")),
    };
    let op_key = match op {
        PoolOp::Max => "max",
        PoolOp::Avg => "avg",
        PoolOp::Min => "min",
    };
    let text = format!(
        "input {size} {size} 3 8\nscheme w1a2\n\
         conv out={} in=3 k=3 alpha={alpha} op={op_key} act=hwgq2:0.5 bias=no\n\
         spool stride=2\n\
         conv out={} in=8 k=3 alpha={alpha} op={op_key} act=hwgq2:0.5 bias=no\n",
        8 * alpha,
        8 * alpha,
    );
    let net = match parse_network(&text) {
        Ok(n) => n,
        Err(e) => return err_json(e),
    };
    let store = match init_random_weights(&net, seed as u64) {
        Ok(s) => s,
        Err(e) => return err_json(e),
    };
    let input = random_input(&net, seed as u64 ^ 0xA5A5);
    let plan = BlockPlan::new(block, block);
    let reference = match run_reference(&net, &store, &input) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    let streaming = match run_streaming(&net, &store, &input, &plan, 1) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    let equal = diff_stored_sets(&reference, &streaming).is_none();

    let mut planes = Vec::new();
    for set in &streaming.sets {
        let t = &set.tensor;
        for channel in 0..t.channels().min(4) {
            let mut pixels = Vec::with_capacity(t.height() * t.width());
            let mut max = f32::MIN;
            let mut min = f32::MAX;
            for y in 0..t.height() {
                for x in 0..t.width() {
                    let v = t.get(channel, y, x);
                    max = max.max(v);
                    min = min.min(v);
                }
            }
            let span = (max - min).max(1e-9);
            for y in 0..t.height() {
                for x in 0..t.width() {
                    pixels.push((255.0 * (t.get(channel, y, x) - min) / span) as u8);
                }
            }
            planes.push(PlaneImage {
                set: set.name.clone(),
                channel,
                height: t.height(),
                width: t.width(),
                pixels,
            });
        }
    }

    serde_json::to_string(&StreamDemo {
        net_text: text,
        equal,
        peak_buffer_bytes: streaming.log.peak_buffer(),
        saved_bytes: reference.log.total_written() - streaming.log.total_written(),
        streaming_written: streaming.log.total_written(),
        reference_written: reference.log.total_written(),
        log_csv: streaming.log.to_csv(),
        planes,
    })
    .unwrap_or_else(err_json)
}
