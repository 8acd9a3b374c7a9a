use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use windmill::bitstream::{encode_bitstream, PeRecord};
use windmill::dfg::{parse_dfg, reference_execute};
use windmill::pe::ConfigWord;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn windmill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_windmill")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_image(path: &Path, words: &[u32]) {
    std::fs::write(path, words.iter().flat_map(|w| w.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
}

fn read_image(path: &Path) -> Vec<u32> {
    std::fs::read(path).unwrap().chunks_exact(4).map(|w| u32::from_le_bytes(w.try_into().unwrap())).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn standard() -> PathBuf {
    fixture("arch/standard.arch")
}

#[test]
fn generate_standard_lists_lsus_and_banks() {
    let o = windmill(&["generate", "--arch", p(&standard())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lsu: 28\n"));
    assert!(text.contains("sm_banks: 16\n"));
    assert!(text.contains("bank: 256x32\n"));
    assert!(text.contains("cpe_artifacts: 1\n"));
    assert!(!text.contains("generated_at"));
}

#[test]
fn generate_writes_report_csv_and_build_json() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("gen");
    let o = windmill(&["generate", "--arch", p(&standard()), "--out", p(&out), "--timestamps"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.starts_with("generated_at_unix: "));
    let csv = std::fs::read_to_string(out.join("resources.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("rows,cols,"));
    assert!(lines[1].starts_with("8,8,mesh2d,mcmd,35,28,1,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("elaboration.json")).unwrap()).unwrap();
    assert!(json["artifacts"].as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn detached_controller_has_no_cpe_artifacts() {
    let dir = TempDir::new().unwrap();
    let arch = dir.path().join("nocpe.arch");
    let text = std::fs::read_to_string(standard()).unwrap().replace("cpe = on", "cpe = off");
    std::fs::write(&arch, text).unwrap();
    let o = windmill(&["generate", "--arch", p(&arch)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("cpe: 0\n"));
    assert!(text.contains("cpe_artifacts: 0\n"));
    assert!(!text.contains("Cpe"));
}

#[test]
fn malformed_arch_exits_two() {
    let dir = TempDir::new().unwrap();
    let arch = dir.path().join("bad.arch");
    std::fs::write(&arch, "[array]\nrows = eight\n").unwrap();
    let o = windmill(&["generate", "--arch", p(&arch)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let missing = windmill(&["map", "--arch", p(&arch), "--dfg", "x", "--out", "y"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn invalid_arch_parameters_exit_two() {
    let dir = TempDir::new().unwrap();
    let arch = dir.path().join("zero.arch");
    let text = std::fs::read_to_string(standard()).unwrap().replace("sm_banks = 16", "sm_banks = 0");
    std::fs::write(&arch, text).unwrap();
    assert_eq!(windmill(&["generate", "--arch", p(&arch)]).status.code(), Some(2));
}

#[test]
fn map_vadd_reports_lsus_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let dfg = fixture("dfg/vadd.dfg");
    let o = windmill(&["map", "--arch", p(&standard()), "--dfg", p(&dfg), "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = stdout(&o);
    let lsus: usize = summary.split("lsus=").nth(1).unwrap().trim().parse().unwrap();
    assert!(lsus >= 1, "{summary}");
    assert!(summary.contains("steps=") && summary.contains("routes=") && summary.contains("pes="));
    windmill(&["map", "--arch", p(&standard()), "--dfg", p(&dfg), "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn oversized_dfg_on_two_by_two_exits_three() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.bin");
    let o = windmill(&[
        "map",
        "--arch",
        p(&fixture("arch/mesh2x2.arch")),
        "--dfg",
        p(&fixture("dfg/matmul4.dfg")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unmappable"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn malformed_dfg_exits_two() {
    let dir = TempDir::new().unwrap();
    let dfg = dir.path().join("bad.dfg");
    std::fs::write(&dfg, "s add a b\n").unwrap();
    let o = windmill(&["map", "--arch", p(&standard()), "--dfg", p(&dfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nop_bitstream_returns_the_image() {
    let dir = TempDir::new().unwrap();
    let bits = dir.path().join("nop.bin");
    std::fs::write(&bits, encode_bitstream(&[PeRecord { row: 2, col: 2, words: vec![ConfigWord::NOP] }])).unwrap();
    let image: Vec<u32> = (0..16).map(|i| i * 7 + 1).collect();
    let data = dir.path().join("img.bin");
    write_image(&data, &image);
    let out = dir.path().join("run");
    let o = windmill(&["sim", "--arch", p(&standard()), "--bitstream", p(&bits), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_image(&out.join("results.bin")), image);
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let cycles: u64 = row[0].parse().unwrap();
    assert!(cycles <= 64, "{cycles}");
}

#[test]
fn matmul_through_the_cli_matches_the_reference() {
    let dir = TempDir::new().unwrap();
    let bits = dir.path().join("mm.bin");
    let dfg_path = fixture("dfg/matmul4.dfg");
    let o = windmill(&["map", "--arch", p(&standard()), "--dfg", p(&dfg_path), "--out", p(&bits)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image: Vec<u32> = (0..48).map(|i| if i < 32 { rng.gen_range(0..1 << 16) } else { 0 }).collect();
    let data = dir.path().join("img.bin");
    write_image(&data, &image);
    let script = dir.path().join("boot.txt");
    std::fs::write(&script, windmill::host::format_script(&windmill::host::boot_script(1, 48, 0, 48))).unwrap();
    let out = dir.path().join("run");
    let o = windmill(&[
        "sim",
        "--arch",
        p(&standard()),
        "--bitstream",
        p(&bits),
        "--data",
        p(&data),
        "--script",
        p(&script),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dfg = parse_dfg(&std::fs::read_to_string(dfg_path).unwrap()).unwrap();
    assert_eq!(read_image(&out.join("results.bin")), reference_execute(&dfg, &image).unwrap());
}

fn mapped_vadd(dir: &Path) -> (PathBuf, PathBuf) {
    let bits = dir.join("vadd.bin");
    let o = windmill(&["map", "--arch", p(&standard()), "--dfg", p(&fixture("dfg/vadd.dfg")), "--out", p(&bits)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = dir.join("img.bin");
    write_image(&data, &(0..48).collect::<Vec<u32>>());
    (bits, data)
}

#[test]
fn sim_twice_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let (bits, data) = mapped_vadd(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = windmill(&[
            "report",
            "--arch",
            p(&standard()),
            "--bitstream",
            p(&bits),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        ["stats.csv", "results.bin", "report.txt"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("one"), run("two"));
}

#[test]
fn cycle_limit_exits_four_with_partial_stats() {
    let dir = TempDir::new().unwrap();
    let (bits, data) = mapped_vadd(dir.path());
    let out = dir.path().join("run");
    let o = windmill(&[
        "sim",
        "--arch",
        p(&standard()),
        "--bitstream",
        p(&bits),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--cycle-limit",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(!out.join("results.bin").exists());
}

#[test]
fn ragged_data_image_exits_two() {
    let dir = TempDir::new().unwrap();
    let (bits, data) = mapped_vadd(dir.path());
    std::fs::write(&data, [1u8, 2, 3]).unwrap();
    let o = windmill(&[
        "sim",
        "--arch",
        p(&standard()),
        "--bitstream",
        p(&bits),
        "--data",
        p(&data),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_rows_are_in_grid_order_for_any_job_count() {
    let run = |jobs: &str| {
        let o = windmill(&[
            "generate",
            "--arch",
            p(&standard()),
            "--sweep",
            "rows=2..=16",
            "--sweep",
            "topology=mesh2d,torus,onehop",
            "--jobs",
            jobs,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let one = run("1");
    assert_eq!(one.lines().count(), 1 + 15 * 3);
    assert!(one.lines().nth(1).unwrap().starts_with("2,8,mesh2d,"));
    assert!(one.lines().nth(3).unwrap().starts_with("2,8,onehop,"));
    assert_eq!(run("8"), one);
    let bad = windmill(&["generate", "--arch", p(&standard()), "--sweep", "rows=0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn log_level_comes_from_the_environment() {
    let quiet = windmill(&["generate", "--arch", p(&standard())]);
    assert!(stderr(&quiet).is_empty());
    let o = Command::new(env!("CARGO_BIN_EXE_windmill"))
        .args(["generate", "--arch", p(&standard())])
        .env("WINDMILL_LOG", "debug")
        .output()
        .unwrap();
    assert!(stderr(&o).contains("elaborated"), "{}", stderr(&o));
}
