//! `ssilab`: command-line front end for the SSI analysis engine.
//!
//! Exit status: 0 when the artifact was written, 1 when `validate` finds a
//! defective dump, 2 on any error (with a one-line diagnostic on stderr).

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ssilab", version, about = "Syntactic specialization analysis over activation dumps")]
struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, env = "SSILAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the SSI table of a dump.
    Ssi(SsiArgs),
    /// Select syntax-sensitive neurons per phenomenon.
    Neurons(NeuronsArgs),
    /// Build targeted and random ablation masks from a neuron selection.
    Masks(MasksArgs),
    /// Compare the neuron selections of two runs.
    Overlap(OverlapArgs),
    /// Grammaticality-judgment accuracy from log-probabilities.
    Accuracy(AccuracyArgs),
    /// Perplexity impact of targeted versus random ablation.
    AblationReport(AblationArgs),
    /// SSI and accuracy progression over a run's checkpoints.
    Dynamics(DynamicsArgs),
    /// Divergence between two runs over shared checkpoints.
    Diverge(DivergeArgs),
    /// Correlate layer profiles and test group differences.
    Compare(CompareArgs),
    /// Generate a synthetic dump with known structure.
    Synth(SynthArgs),
    /// Check a dump for structural and numeric defects.
    Validate(ValidateArgs),
}

/// Alias so clap treats the parsed list as a single value.
type LayerList = Vec<usize>;

#[derive(Args, Debug, Clone)]
struct SsiFlags {
    /// Average over at most this many sampled pairs per cell.
    #[arg(long)]
    pair_cap: Option<u64>,
    /// Seed for pair sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layers to analyze, e.g. `0,3,6-11`.
    #[arg(long, value_parser = output::parse_layers)]
    layers: Option<LayerList>,
    #[arg(long, value_enum, default_value_t = Kernel::UnitSum)]
    kernel: Kernel,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Kernel {
    UnitSum,
    Pairwise,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Policy {
    NormalizeThenSubtract,
    SubtractRaw,
}

#[derive(Args, Debug)]
struct SsiArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: SsiFlags,
    #[arg(long, value_enum, default_value_t = Policy::NormalizeThenSubtract)]
    policy: Policy,
}

#[derive(Args, Debug)]
struct NeuronsArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of neurons kept by consistency rank.
    #[arg(long, default_value_t = 0.25)]
    quantile: f64,
    /// Minimum distinctiveness z-score (strict).
    #[arg(long, default_value_t = 2.0)]
    z: f64,
}

#[derive(Args, Debug)]
struct MasksArgs {
    /// Output of `ssilab neurons`.
    #[arg(long)]
    neurons: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use one phenomenon's selection instead of the union of all.
    #[arg(long)]
    phenomenon: Option<String>,
}

#[derive(Args, Debug)]
struct OverlapArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AccuracyArgs {
    #[arg(long)]
    logprobs: PathBuf,
    /// `.csv` writes CSV; anything else writes JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    targeted: PathBuf,
    #[arg(long)]
    random: PathBuf,
    /// `.csv` writes CSV; anything else writes JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DynamicsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Treat this checkpoint as final, ignoring later ones.
    #[arg(long)]
    final_ckpt: Option<u64>,
    /// Long-format CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON with the growth test and ΔSSI–ΔAccuracy correlation.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Last checkpoint (millions of tokens) of the early phase.
    #[arg(long, default_value_t = 16)]
    boundary: u64,
    #[command(flatten)]
    flags: SsiFlags,
}

#[derive(Args, Debug)]
struct DivergeArgs {
    #[arg(long)]
    manifest_a: PathBuf,
    #[arg(long)]
    manifest_b: PathBuf,
    #[arg(long, default_value_t = 16)]
    boundary: u64,
    /// Long-format CSV covering both runs.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON with phase means and the per-cell phase test.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    flags: SsiFlags,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// `family=path` of an SSI table CSV; repeat per run.
    #[arg(long = "profile", required = true, value_parser = output::parse_profile)]
    profiles: Vec<(String, PathBuf)>,
    /// Family pair `X:Y` whose correlations form group A.
    #[arg(long, value_parser = output::parse_group)]
    group_a: (String, String),
    /// Family pair `X:Y` whose correlations form group B.
    #[arg(long, value_parser = output::parse_group)]
    group_b: (String, String),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[cfg(feature = "parallel")]
fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_threads: Option<usize>) -> anyhow::Result<()> {
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<ExitCode> {
        init_threads(cli.threads)?;
        commands::run(cli.command)
    };
    match run() {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
