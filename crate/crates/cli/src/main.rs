//! `mevc`: run MEVC experiments, parameter sweeps, the four-setting
//! ablation check and synthetic raw sequence generation.
//!
//! Exit codes: 0 success, 1 failed assertion or invariant, 2 usage error,
//! 3 I/O error.

mod input;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mevc::bayer::{self, BayerPattern};
use mevc::experiment::{self, ExperimentConfig, SweepAxis};
use mevc::synth;
use mevc::Network;

use input::{Layout, Source};

#[derive(Debug)]
pub enum Failure {
    Assertion(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mevc",
    version,
    about = "Motion-estimation based video convolution experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run(RunArgs),
    /// Repeat a run over several values of one parameter.
    Sweep(SweepArgs),
    /// Four-setting ablation: dense, no compensation, tau=0, configured tau.
    Verify(RunArgs),
    /// Write a synthetic scene as a raw Bayer sequence plus sidecar.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Raw Bayer sequence.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sidecar of --input (default: same path with a .json extension).
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Scene JSON file or builtin: static, translate, blocks, noisy.
    #[arg(long)]
    scene: Option<String>,
    /// Mosaic pattern used to sample --scene.
    #[arg(long, default_value = "RGGB", value_parser = parse_pattern)]
    pattern: BayerPattern,
    /// How the mosaic enters the first layer.
    #[arg(long, value_enum, default_value_t = Layout::Packed)]
    layout: Layout,
}

#[derive(Args)]
struct TuningArgs {
    /// Network description JSON (default: seeded 3-layer network).
    #[arg(long)]
    net: Option<PathBuf>,
    /// JSON file with experiment parameters; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// GOP length L.
    #[arg(long)]
    gop: Option<usize>,
    /// Residual threshold tau.
    #[arg(long)]
    tau: Option<f32>,
    /// Search range R in grid steps.
    #[arg(long)]
    range: Option<usize>,
    /// Early-stop residual density; negative disables early stopping.
    #[arg(long, allow_negative_numbers = true)]
    early_stop: Option<f32>,
    /// Largest residual density that still counts as a match.
    #[arg(long)]
    beta_max: Option<f32>,
    /// Compare every frame against the dense network.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct OutputArgs {
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// gop, threshold or search_range.
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    values: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene JSON file or builtin: static, translate, blocks, noisy.
    #[arg(long)]
    scene: String,
    /// Raw output file.
    #[arg(long)]
    out: PathBuf,
    /// Sidecar path (default: --out with a .json extension).
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long, default_value = "RGGB", value_parser = parse_pattern)]
    pattern: BayerPattern,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(8..=16))]
    bit_depth: u32,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_pattern(s: &str) -> Result<BayerPattern, String> {
    s.parse().map_err(|e: mevc::MevcError| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: mevc::MevcError| e.to_string())
}

/// Defaults, then the config file, then flags.
fn resolve_config(t: &TuningArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &t.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = t.gop {
        cfg.gop_length = v;
    }
    if let Some(v) = t.tau {
        cfg.motion.threshold = v;
    }
    if let Some(v) = t.range {
        cfg.motion.search_range = v;
    }
    if let Some(v) = t.early_stop {
        cfg.motion.early_stop_density = (v >= 0.0).then_some(v);
    }
    if let Some(v) = t.beta_max {
        cfg.motion.match_max_density = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
    }
    cfg.oracle |= t.oracle;
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    cfg: ExperimentConfig,
    net: Network,
    frames: Vec<mevc::FeatureMap>,
    provenance: serde_json::Value,
}

fn prepare(args: &RunArgs) -> Result<Prepared, Failure> {
    let cfg = resolve_config(&args.tuning)?;
    let src = Source {
        input: args.input.input.clone(),
        sidecar: args.input.sidecar.clone(),
        scene: args.input.scene.clone(),
        pattern: args.input.pattern,
        layout: args.input.layout,
        seed: args.tuning.seed,
    };
    let loaded = input::load(&src)?;
    let channels = loaded
        .frames
        .first()
        .ok_or_else(|| Failure::Usage("input has no frames".into()))?
        .channels();
    let net = match &args.tuning.net {
        Some(path) => Network::load(path, &cfg.motion)?,
        None => experiment::default_network(channels, &cfg)?,
    };
    if net.input_channels() != channels {
        return Err(Failure::Usage(format!(
            "network expects {} input channels, input has {channels}",
            net.input_channels()
        )));
    }
    let provenance = serde_json::json!({
        "source": loaded.provenance,
        "net": args.tuning.net,
        "config_file": args.tuning.config,
    });
    Ok(Prepared {
        cfg,
        net,
        frames: loaded.frames,
        provenance,
    })
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => mevc::fsutil::write_atomic(path, bytes).map_err(Failure::from),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::Io(format!("stdout: {e}"))),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut p = prepare(args)?;
    let (report, run) = experiment::run_experiment(&mut p.net, &p.frames, &p.cfg, p.provenance)?;
    let bytes = match args.output.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.frames_csv()?,
    };
    emit(args.output.out.as_deref(), &bytes)?;

    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{} frames, {:.6} GFLOPs (baseline {:.6}), dFLOPs {:.2}%, alpha {}, beta {}",
        run.frames.len(),
        report.totals.total_flops as f64 / 1e9,
        report.baseline_totals.total_flops as f64 / 1e9,
        report.delta_flops_pct,
        fmt_opt(report.measured_alpha),
        fmt_opt(report.measured_beta),
    );
    if let Some(o) = report.oracle_error {
        eprintln!(
            "oracle: max|err| {:.3e} (frame {}), mean|err| {:.3e}",
            o.max_abs, o.worst_frame, o.mean_abs
        );
    }
    let violations = experiment::check_invariants(&p.net, &run, &report);
    if violations.is_empty() {
        Ok(())
    } else {
        for v in &violations {
            eprintln!("invariant violated: {v}");
        }
        Err(Failure::Assertion(format!(
            "{} invariant violation(s)",
            violations.len()
        )))
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let mut p = prepare(&args.run)?;
    let report = experiment::sweep(&mut p.net, &p.frames, &p.cfg, args.axis, &args.values, p.provenance)?;
    let bytes = match args.run.output.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    emit(args.run.output.out.as_deref(), &bytes)?;
    eprintln!("{:>10} {:>12} {:>9} {:>12}", "value", "GFLOPs", "dFLOPs%", "max|err|");
    for r in &report.rows {
        let err = r.oracle_max_abs.map_or("-".to_string(), |e| format!("{e:.3e}"));
        eprintln!(
            "{:>10} {:>12.6} {:>9.2} {:>12}",
            r.value, r.gflops, r.delta_flops_pct, err
        );
    }
    Ok(())
}

fn cmd_verify(args: &RunArgs) -> Result<(), Failure> {
    let mut p = prepare(args)?;
    let report = experiment::verify(&mut p.net, &p.frames, &p.cfg, p.provenance)?;
    if let Some(out) = &args.output.out {
        let bytes = match args.output.format {
            Format::Json => report.to_json()?,
            Format::Csv => report.to_csv()?,
        };
        emit(Some(out), &bytes)?;
    }
    print!("{}", report.matrix());
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("setting {}: {}", c.setting, c.name))
            .collect();
        Err(Failure::Assertion(format!("failed: {}", failed.join("; "))))
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = input::resolve_scene(&args.scene, args.seed)?;
    let frames = synth::generate_bayer(&spec, args.pattern)?;
    let sidecar = args
        .sidecar
        .clone()
        .unwrap_or_else(|| input::default_sidecar(&args.out));
    let meta = bayer::write_raw_sequence(&frames, args.bit_depth, &args.out, &sidecar)?;
    eprintln!(
        "wrote {} frames of {}x{} {} at {} bits to {}",
        meta.frame_count,
        meta.height,
        meta.width,
        meta.pattern,
        meta.bit_depth,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Assertion(m) => eprintln!("error: {m}"),
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Io(m) => eprintln!("i/o error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
