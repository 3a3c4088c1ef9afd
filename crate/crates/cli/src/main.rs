//! Command-line entry point for the secure valley-filling toolkit.
//!
//! `valleyfill run` executes one experiment (private, plaintext,
//! quantized-oracle, or attack-replay); `valleyfill verify` runs the
//! small-scale self-checks. Exit codes classify failures: 2 config,
//! 3 transport, 4 integrity, 5 io/parse.

mod config;
mod handoff;
mod runners;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Mode, RunConfig, TransportChoice};
use valleyfill::Error;

#[derive(Parser)]
#[command(name = "valleyfill", version, about = "Privacy-preserving EV charging control: secret-shared aggregation inside a projected-gradient valley-filling optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Run one experiment and write its result files.
    Run(RunArgs),
    /// Run the small-scale verification suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// What to execute.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Load the reference experiment configuration (20 EVs, 48 slots,
    /// δ=3, k=3, e=2³¹−1, γ=0.01, β=1, 300 iterations).
    #[arg(long)]
    paper_preset: bool,
    /// Flat key = value config file; flags still take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fleet size.
    #[arg(long)]
    n: Option<usize>,
    /// Number of time slots.
    #[arg(long)]
    slots: Option<usize>,
    /// Slot length in hours.
    #[arg(long)]
    dt: Option<f64>,
    /// Preserved decimal digits of the fixed-point codec.
    #[arg(long)]
    delta: Option<u32>,
    /// Masking polynomial degree (reconstruction needs degree+1 points).
    #[arg(long)]
    degree: Option<usize>,
    /// Prime field modulus.
    #[arg(long)]
    modulus: Option<u64>,
    /// Primal step size.
    #[arg(long)]
    gamma: Option<f64>,
    /// Dual step size.
    #[arg(long)]
    beta: Option<f64>,
    /// Per-agent convergence tolerance.
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Baseline load CSV (one kW value per row); default is the bundled
    /// synthetic valley profile.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Synthetic baseline peak, kW.
    #[arg(long)]
    peak_kw: Option<f64>,
    /// Synthetic baseline valley floor, kW.
    #[arg(long)]
    valley_kw: Option<f64>,
    /// Charger rating, kW.
    #[arg(long)]
    r_max: Option<f64>,
    /// Lower end of the demand range, kWh.
    #[arg(long)]
    demand_lo: Option<f64>,
    /// Upper end of the demand range, kWh.
    #[arg(long)]
    demand_hi: Option<f64>,
    #[arg(long, value_enum)]
    transport: Option<TransportChoice>,
    /// Address table for TCP runs (host:port per line). Omit to let the
    /// coordinator assign loopback ports.
    #[arg(long)]
    addresses: Option<PathBuf>,
    /// none | eavesdropper | coalition:1,2,...
    #[arg(long)]
    adversary: Option<String>,
    /// Output directory for result files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run as a single agent of a multi-process TCP fleet.
    #[arg(long)]
    agent_id: Option<u16>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Fleet size for the protocol-level checks.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Flip one share in flight to demonstrate the integrity failure path.
    #[arg(long)]
    inject_corruption: bool,
}

fn resolve(args: &RunArgs) -> valleyfill::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if args.paper_preset {
        cfg.apply_paper_preset();
    }
    if let Some(path) = &args.config {
        let file = config::load_config_file(path)?;
        config::apply_config_file(&mut cfg, &file)?;
    }
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.slots {
        cfg.slots = v;
    }
    if let Some(v) = args.dt {
        cfg.dt = v;
    }
    if let Some(v) = args.delta {
        cfg.delta = v;
    }
    if let Some(v) = args.degree {
        cfg.degree = v;
    }
    if let Some(v) = args.modulus {
        cfg.modulus = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.eps0 {
        cfg.eps0 = v;
    }
    if let Some(v) = args.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = &args.baseline {
        cfg.baseline_path = Some(v.clone());
    }
    if let Some(v) = args.peak_kw {
        cfg.peak_kw = v;
    }
    if let Some(v) = args.valley_kw {
        cfg.valley_kw = v;
    }
    if let Some(v) = args.r_max {
        cfg.r_max = v;
    }
    if let Some(v) = args.demand_lo {
        cfg.demand_lo = v;
    }
    if let Some(v) = args.demand_hi {
        cfg.demand_hi = v;
    }
    if let Some(v) = args.transport {
        cfg.transport = v;
    }
    if let Some(v) = &args.addresses {
        cfg.addresses = Some(v.clone());
    }
    if let Some(a) = &args.adversary {
        cfg.adversary = config::parse_adversary(a)?;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    cfg.agent_id = args.agent_id;
    // Environment may override only the output directory; scientific
    // parameters stay explicit.
    if let Ok(out) = std::env::var("VALLEYFILL_OUT") {
        if !out.is_empty() {
            cfg.out = PathBuf::from(out);
        }
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::FieldMismatch { .. }
        | Error::DivisionByZero
        | Error::Range(_)
        | Error::Threshold { .. } => 2,
        Error::Transport(_) | Error::RoundAbort { .. } => 3,
        Error::Integrity { .. } => 4,
        Error::Io(_) | Error::Parse { .. } => 5,
    }
}

fn category(err: &Error) -> &'static str {
    match exit_code_for(err) {
        2 => "config",
        3 => "transport",
        4 => "integrity",
        5 => "io",
        _ => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = std::env::var("VALLEYFILL_LOG")
        .map(|v| v.eq_ignore_ascii_case("quiet"))
        .unwrap_or(false);

    let outcome = match &cli.command {
        Commands::Run(args) => resolve(args).and_then(|cfg| {
            let summary = runners::execute_run(&cfg)?;
            if !quiet && cfg.agent_id.is_none() {
                summary.print();
                println!("results:             {}", cfg.out.display());
            }
            Ok(())
        }),
        Commands::Verify(args) => verify::run_verify(&verify::VerifyOptions {
            inject_corruption: args.inject_corruption,
            n: args.n,
        }),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error ({}): {err}", category(&err));
            ExitCode::from(exit_code_for(&err))
        }
    }
}
