use windmill::arch::ArchParams;
use windmill::dfg::parse_dfg;
use windmill::mapper::{emit_bitstream, map};
use windmill::stats::SimStats;
use windmill::system::System;
use windmill::workload::{build, cpe_setup_commands, Driver, PhasePlan};

const CHUNK: u32 = 8;

fn kernel(params: &ArchParams) -> Vec<u8> {
    let src = format!("loop {CHUNK}\nin x 0 +1\ny mul x #3\nz add y #1\nout z {CHUNK} +1\n");
    emit_bitstream(&map(&parse_dfg(&src).unwrap(), params).unwrap())
}

fn run(params: &ArchParams, phases: u32, driver: Driver, pingpong: bool) -> (Vec<u32>, SimStats) {
    let plan = PhasePlan { chunk: CHUNK, out_base: CHUNK, out_len: CHUNK, phases, pingpong };
    let w = build(&kernel(params), &plan, driver, params).unwrap();
    let mut sys = System::new(params.clone());
    sys.set_config_store(windmill::bitstream::bytes_to_words(&w.config_store).unwrap());
    sys.set_external((0..phases * CHUNK).map(|i| i * 5 + 2).collect());
    sys.run(&w.script).unwrap();
    (sys.results(), sys.stats())
}

fn expected(phases: u32) -> Vec<u32> {
    (0..phases * CHUNK).map(|i| (i * 5 + 2) * 3 + 1).collect()
}

fn one_rpu() -> ArchParams {
    let mut p = ArchParams::standard();
    p.rpu_count = 1;
    p
}

#[test]
fn host_driven_phases_compute_every_chunk() {
    for pingpong in [false, true] {
        let (out, stats) = run(&one_rpu(), 4, Driver::Host, pingpong);
        assert_eq!(out, expected(4), "pingpong {pingpong}");
        assert_eq!(stats.launches, 4);
        assert_eq!(stats.cpe_actions, 0);
        assert_eq!(stats.pingpong_collisions, 0);
    }
}

#[test]
fn controller_driven_phases_need_only_setup_commands() {
    for pingpong in [false, true] {
        let phases = if pingpong { 4 } else { 5 };
        let (out, stats) = run(&one_rpu(), phases, Driver::Cpe, pingpong);
        assert_eq!(out, expected(phases), "pingpong {pingpong}");
        assert_eq!(stats.host_commands as usize, cpe_setup_commands(pingpong));
        assert_eq!(stats.launches, u64::from(phases));
        assert_eq!(stats.pingpong_collisions, 0);
    }
}

#[test]
fn host_commands_grow_per_phase_without_controller() {
    let counts: Vec<u64> = (1..=4).map(|k| run(&one_rpu(), k, Driver::Host, false).1.host_commands).collect();
    assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
}

#[test]
fn pingpong_flips_once_per_phase_plus_the_initial_handover() {
    let (_, stats) = run(&one_rpu(), 4, Driver::Host, true);
    assert_eq!(stats.pingpong_toggles, 5);
}

/// Cycles of an `n`-phase reduction over `len`-word chunks, optionally
/// without the launches (DMA only).
fn reduction_cycles(params: &ArchParams, len: u32, phases: u32, pingpong: bool, launch: bool) -> SimStats {
    let src = format!("loop {len}\nin x 0 +1\nacc phi #0 s\ns add acc x\nout s {len}\n");
    let k = emit_bitstream(&map(&parse_dfg(&src).unwrap(), params).unwrap());
    let plan = PhasePlan { chunk: len, out_base: len, out_len: 1, phases, pingpong };
    let mut w = build(&k, &plan, Driver::Host, params).unwrap();
    if !launch {
        w.script.retain(|c| c.opcode != windmill::host::Action::Launch.code());
    }
    let mut sys = System::new(params.clone());
    sys.set_config_store(windmill::bitstream::bytes_to_words(&w.config_store).unwrap());
    sys.set_external((0..phases * len).collect());
    sys.run(&w.script).unwrap();
    sys.stats()
}

#[test]
fn pingpong_overlaps_transfers_with_compute() {
    let p = one_rpu();
    let (len, n) = (128, 6);
    let total = |k, pp, launch| reduction_cycles(&p, len, k, pp, launch).total_cycles;
    // steady-state per-phase costs from consecutive phase counts
    let d = total(n, false, false) - total(n - 1, false, false);
    let c = total(n, false, true) - total(n - 1, false, true) - d;
    assert!(d > 100 && c > 100, "D={d} C={c}");
    let pp = reduction_cycles(&p, len, n, true, true);
    let n = u64::from(n);
    assert!(pp.total_cycles <= d.max(c) * n + d + c, "{} vs D={d} C={c}", pp.total_cycles);
    assert!(pp.total_cycles < total(n as u32, false, true));
    assert_eq!(pp.pingpong_collisions, 0);
}
