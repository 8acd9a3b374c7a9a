use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use log::{debug, info};
use windmill::arch::{derive_counts, parse_arch_file, ArchError, ArchParams, ResourceReport};
use windmill::bitstream::BitstreamError;
use windmill::dfg::{parse_dfg, DfgError};
use windmill::diag::{elaborate, Component, SealedBuild};
use windmill::host::{boot_script, parse_script, HostError};
use windmill::mapper::{emit_bitstream, map as map_dfg, MapError};
use windmill::plugins::{standard_plugins, CPE};
use windmill::stats::SimStats;
use windmill::system::{SimError, System};

use crate::sweep;
use crate::SimArgs;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_UNMAPPABLE: u8 = 3;
pub const EXIT_CYCLE_LIMIT: u8 = 4;

/// Malformed input that none of the core parsers owns (data images, sweep
/// specifications).
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ArchError>()
            || cause.is::<DfgError>()
            || cause.is::<HostError>()
            || cause.is::<BitstreamError>()
            || cause.is::<InputError>()
        {
            return EXIT_INPUT;
        }
        if cause.is::<MapError>() {
            return EXIT_UNMAPPABLE;
        }
        match cause.downcast_ref::<SimError>() {
            Some(SimError::CycleLimitExceeded { .. }) => return EXIT_CYCLE_LIMIT,
            Some(SimError::Bitstream(_) | SimError::Host(_)) => return EXIT_INPUT,
            _ => {}
        }
    }
    EXIT_FAILURE
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_arch(path: &Path) -> Result<ArchParams> {
    let text = read_text(path)?;
    parse_arch_file(&text).with_context(|| path.display().to_string())
}

fn stamp(on: bool) -> String {
    if !on {
        return String::new();
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("generated_at_unix: {secs}\n")
}

/// Human-readable resource report of an elaborated build.
pub fn resource_text(build: &SealedBuild, counts: &ResourceReport) -> String {
    let p = &build.params;
    let mut s = String::new();
    let _ = writeln!(s, "array: {}x{} {} {:?}", p.rows, p.cols, p.topology.keyword(), p.exec_mode);
    let _ = writeln!(s, "gpe: {}", counts.gpe);
    let _ = writeln!(s, "lsu: {}", counts.lsu);
    let _ = writeln!(s, "cpe: {}", counts.cpe);
    let _ = writeln!(s, "context_words_per_pe: {}", counts.context_words_per_pe);
    let _ = writeln!(s, "context_bits_total: {}", counts.context_bits_total);
    let _ = writeln!(s, "sm_banks: {}", counts.sm_banks);
    let _ = writeln!(s, "bank: {}x{}", counts.bank_depth, counts.bank_width);
    let _ = writeln!(s, "sm_bytes: {}", counts.sm_bytes);
    let _ = writeln!(s, "links: {}", counts.links);
    let _ = writeln!(s, "shared_regs_total: {}", counts.shared_regs_total);
    let _ = writeln!(s, "rpu_count: {}", counts.rpu_count);
    let _ = writeln!(s, "plugins: {}", build.plugins.join(" "));
    let _ = writeln!(s, "cpe_artifacts: {}", build.artifacts_from(CPE).count());
    let _ = writeln!(s, "services:");
    for svc in &build.services {
        let _ = writeln!(s, "  {} <- {}", svc.key, svc.provider);
    }
    let _ = writeln!(s, "pe_map:");
    for r in 0..p.rows {
        let line: String = (0..p.cols).map(|c| p.pe_types[r * p.cols + c].letter()).collect();
        let _ = writeln!(s, "  {line}");
    }
    let memories = build.artifacts.iter().filter(|a| matches!(a.component, Component::SharedMemory { .. })).count();
    let _ = writeln!(s, "shared_memory_artifacts: {memories}");
    s
}

pub fn generate(arch: &Path, out: Option<&Path>, sweep_specs: &[String], jobs: usize, timestamps: bool) -> Result<()> {
    let params = load_arch(arch)?;
    if !sweep_specs.is_empty() {
        let csv = sweep::run(&params, sweep_specs, jobs)?;
        return match out {
            Some(path) => write(path, csv),
            None => {
                print!("{csv}");
                Ok(())
            }
        };
    }
    let build = elaborate(standard_plugins(&params), params.clone()).context("elaboration")?;
    info!("elaborated {} plugins, {} artifacts", build.plugins.len(), build.artifacts.len());
    for ev in &build.log {
        debug!("{:?} {} {}", ev.phase, ev.plugin, if ev.finished { "done" } else { "start" });
    }
    let counts = derive_counts(&params);
    let text = format!("{}{}", stamp(timestamps), resource_text(&build, &counts));
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write(&dir.join("report.txt"), &text)?;
            write(&dir.join("resources.csv"), format!("{}\n{}\n", ResourceReport::CSV_HEADER, counts.csv_row()))?;
            write(&dir.join("elaboration.json"), build.to_json())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn map(arch: &Path, dfg: &Path, out: &Path) -> Result<()> {
    let params = load_arch(arch)?;
    let graph = parse_dfg(&read_text(dfg)?).with_context(|| dfg.display().to_string())?;
    let mapping = map_dfg(&graph, &params)?;
    write(out, emit_bitstream(&mapping))?;
    println!("{}", mapping.summary(&params));
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() % 4 != 0 {
        return Err(
            InputError(format!("{}: {} bytes is not a whole number of words", path.display(), bytes.len())).into()
        );
    }
    Ok(bytes.chunks_exact(4).map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect())
}

pub fn image_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// Text companion to the stats CSV: per-PE activity grids and LSU grants.
pub fn stats_text(params: &ArchParams, stats: &SimStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "total_cycles: {}", stats.total_cycles);
    let _ = writeln!(s, "host_commands: {}", stats.host_commands);
    let _ = writeln!(s, "bank_conflicts: {}", stats.bank_conflicts);
    let _ = writeln!(s, "dma_stall_cycles: {}", stats.dma_stall_cycles);
    let _ = writeln!(s, "pingpong_toggles: {}", stats.pingpong_toggles);
    let _ = writeln!(s, "utilization: {:.4}", stats.utilization());
    for (rpu, active) in stats.pe_active.iter().enumerate() {
        let _ = writeln!(s, "rpu {rpu} active cycles:");
        for row in active.chunks(params.cols) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>7}")).collect();
            let _ = writeln!(s, " {}", cells.join(""));
        }
    }
    let _ = writeln!(s, "lsu grants/requests:");
    for (i, at) in params.lsus().iter().enumerate() {
        let g = stats.grants_per_lsu.get(i).copied().unwrap_or(0);
        let r = stats.requests_per_lsu.get(i).copied().unwrap_or(0);
        let _ = writeln!(s, "  ({},{}) {g}/{r}", at.row, at.col);
    }
    s
}

pub fn sim(args: &SimArgs, with_report: bool) -> Result<()> {
    let params = load_arch(&args.arch)?;
    let bits = fs::read(&args.bitstream).with_context(|| format!("reading {}", args.bitstream.display()))?;
    let words = windmill::bitstream::bytes_to_words(&bits).with_context(|| args.bitstream.display().to_string())?;
    windmill::bitstream::decode_bitstream(&bits).with_context(|| args.bitstream.display().to_string())?;
    let image = read_image(&args.data)?;
    let script = match &args.script {
        Some(path) => parse_script(&read_text(path)?).with_context(|| path.display().to_string())?,
        None => {
            let n = image.len() as u32;
            boot_script(1, n, 0, n)
        }
    };
    let mut system = System::new(params.clone()).with_cycle_limit(args.cycle_limit);
    system.set_config_store(words);
    system.set_external(image);
    let run = system.run(&script);
    let stats = system.stats();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stamp = stamp(args.timestamps);
    write(&args.out.join("stats.csv"), stats.to_csv())?;
    if with_report {
        write(&args.out.join("report.txt"), format!("{stamp}{}", stats_text(&params, &stats)))?;
    }
    run?;
    write(&args.out.join("results.bin"), image_bytes(&system.results()))?;
    info!("{} cycles, {} host commands", stats.total_cycles, stats.host_commands);
    Ok(())
}
