use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rbbc::adversary::AdversaryKind;
use rbbc::world::Protocol;
use rbbc_bench::config::{ExperimentConfig, Proposers};
use rbbc_bench::experiment::{emit_all, run_sweep};
use rbbc_bench::BenchError;

#[derive(Parser)]
#[command(name = "bench", about = "Run simulated consensus experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its reports.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    faulty: Option<usize>,
    /// "all" or "t+1".
    #[arg(long)]
    proposers: Option<Proposers>,
    #[arg(long)]
    proposal_size: Option<usize>,
    #[arg(long)]
    adversary: Option<AdversaryKind>,
    #[arg(long)]
    byzantine_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    duration_ms: Option<u64>,
    #[arg(long)]
    warmup_rounds: Option<u64>,
    /// "aws14", "uniform:<ms>" or a CSV path.
    #[arg(long)]
    latency_matrix: Option<String>,
    #[arg(long)]
    gst_ms: Option<f64>,
    #[arg(long)]
    gst_delay_factor: Option<f64>,
    #[arg(long)]
    jitter_ms: Option<f64>,
    #[arg(long)]
    requesters: Option<usize>,
    /// Comma-separated region names.
    #[arg(long, value_delimiter = ',')]
    requester_regions: Option<Vec<String>>,
    #[arg(long)]
    genesis_per_requester: Option<u64>,
    #[arg(long)]
    genesis_utxos_per_requester: Option<usize>,
    #[arg(long)]
    verify_cost_us: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s.to_ascii_lowercase().as_str() {
        "rbbc" => Ok(Protocol::Rbbc),
        "cons1" => Ok(Protocol::Cons1),
        _ => Err(format!("expected rbbc or cons1, got {s:?}")),
    }
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn effective(a: RunArgs) -> Result<(ExperimentConfig, bool), BenchError> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    set!(c.protocol, a.protocol);
    set!(c.nodes, a.nodes);
    if a.faulty.is_some() {
        c.faulty = a.faulty;
    }
    set!(c.proposers, a.proposers);
    set!(c.proposal_size, a.proposal_size);
    set!(c.adversary.kind, a.adversary);
    if a.byzantine_count.is_some() {
        c.adversary.count = a.byzantine_count;
    }
    set!(c.seed, a.seed);
    set!(c.seeds, a.seeds);
    if a.rounds.is_some() {
        c.rounds = a.rounds;
        c.duration_ms = None;
    }
    if a.duration_ms.is_some() {
        c.duration_ms = a.duration_ms;
        c.rounds = None;
    }
    set!(c.warmup_rounds, a.warmup_rounds);
    set!(c.network.latency_matrix, a.latency_matrix);
    set!(c.network.gst_ms, a.gst_ms);
    set!(c.network.gst_delay_factor, a.gst_delay_factor);
    set!(c.network.jitter_ms, a.jitter_ms);
    set!(c.requesters.count, a.requesters);
    set!(c.requesters.regions, a.requester_regions);
    set!(c.requesters.genesis_per_requester, a.genesis_per_requester);
    set!(c.requesters.genesis_utxos_per_requester, a.genesis_utxos_per_requester);
    set!(c.verify_cost_us, a.verify_cost_us);
    set!(c.out_dir, a.out_dir);
    Ok((c, a.print_config))
}

fn run(a: RunArgs) -> Result<(), BenchError> {
    let (cfg, print) = effective(a)?;
    if print {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let matrix = cfg.matrix()?;
    for (a, b, bw) in matrix.bandwidth_warnings() {
        if a < b {
            let r = matrix.regions();
            log::warn!("latency matrix: {} - {} bandwidth {bw} Mbps exceeds the nominal cap", r[a], r[b]);
        }
    }
    let results = run_sweep(&cfg)?;
    println!(
        "{:>6} {:>7} {:>4} {:>8} {:>12} {:>10} {:>10} {:>12} {:>8}",
        "seed", "proto", "n", "blocks", "valid_tx/s", "lat_ms", "read/s", "valid/block", "invalid"
    );
    for r in &results {
        let m = &r.report;
        println!(
            "{:>6} {:>7} {:>4} {:>8} {:>12.1} {:>10.1} {:>10.1} {:>12.1} {:>8.1}",
            m.seed, m.protocol.to_string(), m.n, m.blocks, m.valid_tx_per_sec, m.inter_block_ms, m.reads_per_sec,
            m.valid_tx_per_block, m.invalid_tx_per_block
        );
    }
    emit_all(&cfg.out_dir, &results)?;
    println!("reports written to {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
