//! `windmill` command-line driver.

mod commands;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::exit_code;

#[derive(Parser, Debug)]
#[command(name = "windmill", version, about = "Elaborate, map and simulate WindMill CGRA instances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Elaborate an architecture and print its resource report.
    Generate(GenerateArgs),
    /// Map a dataflow graph to a configuration bitstream.
    Map(MapArgs),
    /// Run the load/configure/launch/store protocol and write results and stats.
    Sim(SimArgs),
    /// Like `sim`, plus a per-PE and per-LSU text report.
    Report(SimArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Output directory for `report.txt`, `resources.csv` and
    /// `elaboration.json`; with `--sweep`, the CSV file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parameter grid, e.g. `rows=4,8,16` or `sm_banks=4..=16`. Repeatable;
    /// emits one CSV row per configuration.
    #[arg(long)]
    sweep: Vec<String>,
    /// Worker threads for a sweep.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    timestamps: bool,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    dfg: PathBuf,
    /// Bitstream file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    bitstream: PathBuf,
    /// Flat little-endian 32-bit data image.
    #[arg(long)]
    data: PathBuf,
    /// Host command script; defaults to the boot sequence for RPU 0 that
    /// loads the whole image and stores it back.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Output directory for `results.bin` and `stats.csv` (plus
    /// `report.txt` for `report`).
    #[arg(long)]
    out: PathBuf,
    /// Deadlock guard: longest allowed launch, and longest stretch without
    /// any progress, in cycles. Exceeding it exits with status 4.
    #[arg(long, default_value_t = 1_000_000)]
    cycle_limit: u64,
    #[arg(long)]
    timestamps: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WINDMILL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a.arch, a.out.as_deref(), &a.sweep, a.jobs, a.timestamps),
        Command::Map(a) => commands::map(&a.arch, &a.dfg, &a.out),
        Command::Sim(a) => commands::sim(&a, false),
        Command::Report(a) => commands::sim(&a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
