//! `condense` — run and analyze condensation networks.
//!
//! Subcommands: `run` (streaming inference), `compare` (streaming vs naive
//! executor), `memory` / `traffic` / `perf` (accounting reports), and
//! `gradcheck` (finite-difference validation of the training path).
//!
//! Exit codes: 0 on success, 2 on validation errors, 3 on numerical-check
//! failures.

mod gradcheck;
mod inputs;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condense_core::analysis;
use condense_core::error::Error;
use condense_core::exec::{compare_runs, run_streaming};
use condense_core::netdef::{
    build_condensation, build_tiny_yolov2, init_random_weights, parse_network, NetworkDef,
    WeightStore,
};
use condense_core::tensor::BlockPlan;

#[derive(Parser)]
#[command(name = "condense", version, about = "Condensation-network inference and accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Streaming inference over a network; writes the output tensor snapshot
    /// and the per-set execution log.
    Run(RunArgs),
    /// Run both executors, check bit equality, and report both logs.
    Compare(CompareArgs),
    /// Weight-memory and feature-map-memory report.
    Memory(MemoryArgs),
    /// All-layer traffic with and without virtual feature maps.
    Traffic(TrafficArgs),
    /// MAC counts and ideal times for two networks.
    Perf(PerfArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Full32,
    W1a2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct NetSource {
    /// Built-in network (`tiny-yolov2`, `condensation:2`, `condensation:4`)
    /// or a path to a `.net` file.
    #[arg(long)]
    net: String,
    /// Override the network's quantization scheme.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
}

impl NetSource {
    fn load(&self) -> Result<NetworkDef, Error> {
        let net = resolve_net(&self.net)?;
        Ok(match self.scheme {
            None => net,
            Some(SchemeArg::Full32) => net.to_full_precision(),
            Some(SchemeArg::W1a2) => net.to_w1a2(0.5)?,
        })
    }
}

fn resolve_net(spec: &str) -> Result<NetworkDef, Error> {
    match spec {
        "tiny-yolov2" => Ok(build_tiny_yolov2()),
        _ => {
            if let Some(alpha) = spec.strip_prefix("condensation:") {
                let alpha: usize = alpha.parse().map_err(|_| Error::InputMismatch {
                    message: format!("bad condensation factor `{alpha}`"),
                })?;
                build_condensation(alpha)
            } else {
                parse_network(&fs::read_to_string(spec)?)
            }
        }
    }
}

fn parse_plan(spec: &str) -> Result<BlockPlan, Error> {
    if spec == "full" {
        return Ok(BlockPlan::full_plane());
    }
    let (h, w) = spec.split_once('x').ok_or_else(|| Error::InputMismatch {
        message: format!("block plan must be HxW or `full`, got `{spec}`"),
    })?;
    let parse = |s: &str| {
        s.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(|| Error::InputMismatch {
            message: format!("bad block extent `{s}`"),
        })
    };
    Ok(BlockPlan::new(parse(h)?, parse(w)?))
}

#[derive(Args)]
struct WeightSource {
    /// Load weights from a `.cndw` file.
    #[arg(long, conflicts_with = "seed")]
    weights: Option<PathBuf>,
    /// Generate seeded random weights instead.
    #[arg(long)]
    seed: Option<u64>,
}

impl WeightSource {
    fn load(&self, net: &NetworkDef) -> Result<(WeightStore, String), Error> {
        match (&self.weights, self.seed) {
            (Some(path), None) => {
                let bytes = fs::read(path)?;
                Ok((WeightStore::load(&mut bytes.as_slice(), net)?, format!("file:{}", path.display())))
            }
            (None, Some(seed)) => Ok((init_random_weights(net, seed)?, format!("seed:{seed}"))),
            (None, None) => Err(Error::InputMismatch {
                message: "exactly one weight source required: --weights or --seed".into(),
            }),
            (Some(_), Some(_)) => unreachable!("clap rejects conflicting weight sources"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    net: NetSource,
    #[command(flatten)]
    weights: WeightSource,
    /// Input: `checker:N`, `noise:N:SEED`, `ramp:N`, or a PNM image path.
    #[arg(long)]
    input: String,
    /// Block plan `HxW` or `full`.
    #[arg(long, default_value = "32x32")]
    block: String,
    /// Output channels processed concurrently (capped by CONDENSE_THREADS).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the output tensor snapshot here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the execution log CSV here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Dump every stored intermediate set as `<name>.cnfm` into this
    /// directory.
    #[arg(long)]
    dump_sets: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    net: NetSource,
    #[command(flatten)]
    weights: WeightSource,
    #[arg(long)]
    input: String,
    #[arg(long, default_value = "32x32")]
    block: String,
    /// Write the reference executor's output snapshot here.
    #[arg(long)]
    out_reference: Option<PathBuf>,
}

#[derive(Args)]
struct MemoryArgs {
    #[command(flatten)]
    net: NetSource,
    /// Weight bit width (1 or 32).
    #[arg(long, default_value_t = 1)]
    wbits: u32,
    /// Activation width used to size the feature-map memory.
    #[arg(long, default_value_t = 8)]
    sizing_bits: u32,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct TrafficArgs {
    #[command(flatten)]
    net: NetSource,
    /// Activation bit width for set sizes (2 or 8).
    #[arg(long, default_value_t = 2)]
    act_bits: u32,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Emit a bare `(set, bytes, virtual)` series for external plotting.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Args)]
struct PerfArgs {
    /// First network (built-in name or `.net` path).
    #[arg(long)]
    net_a: String,
    /// Second network.
    #[arg(long)]
    net_b: String,
    /// MACs per clock cycle.
    #[arg(long, default_value_t = 320)]
    rate: u64,
    /// Clock in MHz.
    #[arg(long, default_value_t = 400)]
    clock_mhz: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random shapes to check.
    #[arg(long, default_value_t = 20)]
    cases: u64,
}

fn effective_threads(requested: usize) -> usize {
    let cap = std::env::var("CONDENSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(usize::MAX);
    requested.clamp(1, cap)
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn cmd_run(args: &RunArgs) -> Result<u8, Error> {
    let net = args.net.load()?;
    let (store, weight_desc) = args.weights.load(&net)?;
    let input = inputs::load_input(&net, &args.input)?;
    let plan = parse_plan(&args.block)?;
    let threads = effective_threads(args.threads);
    println!(
        "# run net={} scheme={:?} weights={} input={} block={} threads={}",
        args.net.net, net.scheme, weight_desc, args.input, args.block, threads
    );
    let out = run_streaming(&net, &store, &input, &plan, threads)?;
    let mut snapshot = Vec::new();
    out.output.write_snapshot(&mut snapshot)?;
    println!(
        "# output {}x{}x{} bits={} hash={:016x}",
        out.output.height(),
        out.output.width(),
        out.output.channels(),
        out.output.bits().bits(),
        fnv64(&snapshot)
    );
    println!(
        "# traffic written={} read={} peak_buffer={}",
        out.log.total_written(),
        out.log.total_read(),
        out.log.peak_buffer()
    );
    if let Some(path) = &args.out {
        fs::write(path, &snapshot)?;
    }
    if let Some(path) = &args.log {
        fs::write(path, out.log.to_csv())?;
    }
    if let Some(dir) = &args.dump_sets {
        fs::create_dir_all(dir)?;
        for set in &out.sets {
            let mut bytes = Vec::new();
            set.tensor.write_snapshot(&mut bytes)?;
            fs::write(dir.join(format!("{}.cnfm", set.name)), &bytes)?;
        }
    }
    Ok(0)
}

fn cmd_compare(args: &CompareArgs) -> Result<u8, Error> {
    let net = args.net.load()?;
    let (store, weight_desc) = args.weights.load(&net)?;
    let input = inputs::load_input(&net, &args.input)?;
    let plan = parse_plan(&args.block)?;
    println!(
        "# compare net={} scheme={:?} weights={} input={} block={}",
        args.net.net, net.scheme, weight_desc, args.input, args.block
    );
    let report = compare_runs(&net, &store, &input, &plan)?;
    if let Some(path) = &args.out_reference {
        // Recompute the reference output for the snapshot.
        let reference = condense_core::exec::run_reference(&net, &store, &input)?;
        let mut snapshot = Vec::new();
        reference.output.write_snapshot(&mut snapshot)?;
        fs::write(path, &snapshot)?;
    }
    println!(
        "# reference written={} streaming written={} saved={}",
        report.reference_log.total_written(),
        report.streaming_log.total_written(),
        report.saved_bytes
    );
    if report.equal {
        println!("executors agree bit-exactly");
        Ok(0)
    } else {
        let d = report.first_diff.expect("unequal runs carry a diff site");
        println!(
            "MISMATCH at {} channel {} ({}, {}): reference {} vs streaming {}",
            d.set, d.channel, d.y, d.x, d.reference, d.streaming
        );
        Ok(3)
    }
}

fn cmd_memory(args: &MemoryArgs) -> Result<u8, Error> {
    let net = args.net.load()?;
    let report = analysis::memory_report(&net, args.wbits, args.sizing_bits)?;
    match args.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(0)
}

fn cmd_traffic(args: &TrafficArgs) -> Result<u8, Error> {
    let net = args.net.load()?;
    let report = analysis::traffic_totals(&net, args.act_bits)?;
    if args.plot_data {
        print!("{}", report.to_plot_data());
    } else {
        match args.format {
            Format::Text => print!("{}", report.to_text()),
            Format::Csv => print!("{}", report.to_csv()),
        }
    }
    Ok(0)
}

fn cmd_perf(args: &PerfArgs) -> Result<u8, Error> {
    let net_a = resolve_net(&args.net_a)?;
    let net_b = resolve_net(&args.net_b)?;
    let report = analysis::mac_model(
        (&args.net_a, &net_a),
        (&args.net_b, &net_b),
        args.rate,
        args.clock_mhz * 1_000_000,
    )?;
    match args.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8, Error> {
    println!("# gradcheck seed={} cases={}", args.seed, args.cases);
    let worst = gradcheck::run(args.seed, args.cases)?;
    println!("worst relative error: {worst:.3e} (bound 1e-5)");
    if worst < 1e-5 {
        println!("gradcheck PASS");
        Ok(0)
    } else {
        println!("gradcheck FAIL");
        Ok(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Memory(args) => cmd_memory(args),
        Command::Traffic(args) => cmd_traffic(args),
        Command::Perf(args) => cmd_perf(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
