//! Cycle-level model of the whole system: RPUs (array + private shared
//! memory + DMA), the clockwise read-only ring between RPUs, the controller
//! PE, and the host command stream.
//!
//! One system cycle runs, in order: host issue (one script line), command
//! queue processing (at most one command per RPU), the array memory phase
//! (requests, per-bank arbitration, accesses), PE ticks against the previous
//! cycle's port values, DMA, launch completion, and deferred ping-pong flips.
//!
//! When any LSU of a running array loses arbitration the whole array of that
//! RPU freezes for the cycle; LSUs that were served keep their response and do
//! not request again. A ring access keeps the array frozen for one extra
//! cycle while the data travels back.

use std::collections::VecDeque;

use log::{debug, trace};
use thiserror::Error;

use crate::arch::{ArchParams, Coord, ExecMode, PeType};
use crate::bitstream::{decode_bitstream, words_to_bytes, BitstreamError, PeRecord};
use crate::diag::{Component, SealedBuild};
use crate::host::{Action, ControlVector, HostCommand, HostError, Rtt};
use crate::interconnect::{exchange, IndexOutOfRange, PortInputs, SharedRegFile};
use crate::memory::{BankedSram, DmaController, DmaStep, Location, MemError, PaiArbiter, Transfer, TransferDir};
use crate::pe::{check_word, CapacityExceeded, ConfigWord, MemOp, MemRequest, PeInputs, PeState};
use crate::stats::SimStats;

pub const DEFAULT_CYCLE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpuStatus {
    Idle,
    Configured,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Host(#[from] HostError),
    #[error("RPU {rpu}: {action} while {status:?}")]
    ProtocolOrderViolation { rpu: usize, action: Action, status: RpuStatus },
    #[error("cycle limit {limit} exceeded at cycle {cycle}")]
    CycleLimitExceeded { limit: u64, cycle: u64 },
    #[error("bitstream record ({row},{col}): {reason}")]
    BitstreamTargetInvalid { row: u8, col: u8, reason: String },
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error("configuration store slice {start}+{len} exceeds {size} words")]
    ConfigStoreRange { start: usize, len: usize, size: usize },
    #[error("PE {at}: {source}")]
    Capacity {
        at: Coord,
        #[source]
        source: CapacityExceeded,
    },
    #[error("RPU {rpu}: {source}")]
    Memory {
        rpu: usize,
        #[source]
        source: MemError,
    },
    #[error("RPU {rpu}: {source}")]
    SharedReg {
        rpu: usize,
        #[source]
        source: IndexOutOfRange,
    },
    #[error("RPU {rpu} has no controller PE")]
    NoCpe { rpu: usize },
    #[error("target mask {mask:#x} selects no existing RPU")]
    InvalidTarget { mask: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Host,
    Cpe,
}

/// One executed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub rpu: usize,
    pub action: Action,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Local(Location),
    Ring(Location),
}

#[derive(Debug, Clone)]
pub struct Rpu {
    pub id: usize,
    pes: Vec<PeState>,
    /// PE indices of the LSUs, in arbiter requester order.
    lsus: Vec<usize>,
    cpe: Option<usize>,
    cpe_running: bool,
    sram: BankedSram,
    arbiter: PaiArbiter,
    dma: DmaController,
    sregs: SharedRegFile,
    status: RpuStatus,
    queue: VecDeque<(ControlVector, Origin)>,
    /// Remaining cycles of an ongoing configuration load.
    busy: u64,
    run_cycles: u64,
    /// Ring load data arriving next cycle: (PE index, value).
    ring_pending: Option<(usize, u32)>,
    bank_busy: Vec<bool>,
    results: Vec<u32>,
    active: Vec<u64>,
}

impl Rpu {
    fn new(id: usize, params: &ArchParams) -> Self {
        let capacity = params.context_capacity();
        let pes: Vec<PeState> = params.coords().map(|at| PeState::new(at, params.pe_type(at), capacity)).collect();
        let lsus: Vec<usize> = params.lsus().into_iter().map(|c| params.index(c)).collect();
        let ring_port = usize::from(params.rpu_count >= 2);
        Rpu {
            id,
            cpe: params.cpe().map(|c| params.index(c)),
            cpe_running: false,
            arbiter: PaiArbiter::new(lsus.len() + ring_port, params.sm_banks),
            sram: BankedSram::new(params.sm_banks, params.bank_depth),
            dma: DmaController::new(),
            sregs: SharedRegFile::new(params.shared_reg_mode, params.rows, params.cols, params.shared_reg_count),
            status: RpuStatus::Idle,
            queue: VecDeque::new(),
            busy: 0,
            run_cycles: 0,
            ring_pending: None,
            bank_busy: vec![false; params.sm_banks],
            results: Vec::new(),
            active: vec![0; pes.len()],
            pes,
            lsus,
        }
    }

    pub fn status(&self) -> RpuStatus {
        self.status
    }

    pub fn pes(&self) -> &[PeState] {
        &self.pes
    }

    pub fn sram(&self) -> &BankedSram {
        &self.sram
    }

    pub fn sram_mut(&mut self) -> &mut BankedSram {
        &mut self.sram
    }

    pub fn dma(&self) -> &DmaController {
        &self.dma
    }

    pub fn arbiter(&self) -> &PaiArbiter {
        &self.arbiter
    }

    pub fn results(&self) -> &[u32] {
        &self.results
    }

    pub fn cpe_running(&self) -> bool {
        self.cpe_running
    }

    fn array_done(&self) -> bool {
        self.pes.iter().enumerate().all(|(i, pe)| Some(i) == self.cpe || pe.is_done())
    }

    fn quiescent(&self) -> bool {
        self.queue.is_empty()
            && self.busy == 0
            && self.status != RpuStatus::Running
            && self.dma.is_idle()
            && !self.dma.toggle_pending()
            && !self.cpe_running
    }
}

#[derive(Debug, Clone)]
pub struct System {
    params: ArchParams,
    rtt: Rtt,
    rpus: Vec<Rpu>,
    ext: Vec<u32>,
    config_store: Vec<u32>,
    cycle: u64,
    cycle_limit: u64,
    host_commands: u64,
    launches: u64,
    cpe_actions: u64,
    array_stall_cycles: u64,
    pingpong_collisions: u64,
    ring_grants: u64,
    sreg_conflicts: u64,
    trace: Vec<TraceEvent>,
}

impl System {
    /// `params` must be valid.
    pub fn new(params: ArchParams) -> Self {
        let rpus = (0..params.rpu_count).map(|id| Rpu::new(id, &params)).collect();
        System {
            params,
            rtt: Rtt::default(),
            rpus,
            ext: Vec::new(),
            config_store: Vec::new(),
            cycle: 0,
            cycle_limit: DEFAULT_CYCLE_LIMIT,
            host_commands: 0,
            launches: 0,
            cpe_actions: 0,
            array_stall_cycles: 0,
            pingpong_collisions: 0,
            ring_grants: 0,
            sreg_conflicts: 0,
            trace: Vec::new(),
        }
    }

    /// System for an elaborated build: PE roles come from the emitted PE
    /// artifacts, so a detached controller leaves a plain GPE behind.
    pub fn from_build(build: &SealedBuild) -> Self {
        let mut params = build.params.clone();
        for a in &build.artifacts {
            if let Component::Pe { coord, pe_type, .. } = a.component {
                let i = params.index(coord);
                params.pe_types[i] = pe_type;
            }
        }
        Self::new(params)
    }

    pub fn with_cycle_limit(mut self, limit: u64) -> Self {
        self.cycle_limit = limit;
        self
    }

    pub fn params(&self) -> &ArchParams {
        &self.params
    }

    pub fn rtt(&self) -> &Rtt {
        &self.rtt
    }

    /// External memory image, word 0 first.
    pub fn set_external(&mut self, image: Vec<u32>) {
        self.ext = image;
    }

    pub fn set_config_store(&mut self, words: Vec<u32>) {
        self.config_store = words;
    }

    pub fn rpus(&self) -> &[Rpu] {
        &self.rpus
    }

    pub fn rpu_mut(&mut self, i: usize) -> &mut Rpu {
        &mut self.rpus[i]
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Results of every RPU, concatenated in RPU order.
    pub fn results(&self) -> Vec<u32> {
        self.rpus.iter().flat_map(|r| r.results.iter().copied()).collect()
    }

    pub fn stats(&self) -> SimStats {
        let lsu_count = self.rpus.first().map_or(0, |r| r.lsus.len());
        let mut grants = vec![0; lsu_count];
        let mut requests = vec![0; lsu_count];
        for r in &self.rpus {
            for i in 0..lsu_count {
                grants[i] += r.arbiter.grants[i];
                requests[i] += r.arbiter.requests[i];
            }
        }
        SimStats {
            total_cycles: self.cycle,
            host_commands: self.host_commands,
            launches: self.launches,
            cpe_actions: self.cpe_actions,
            bank_conflicts: self.rpus.iter().map(|r| r.arbiter.conflicts).sum(),
            dma_stall_cycles: self.rpus.iter().map(|r| r.dma.stall_cycles).sum(),
            array_stall_cycles: self.array_stall_cycles,
            pingpong_toggles: self.rpus.iter().map(|r| r.dma.toggles).sum(),
            pingpong_collisions: self.pingpong_collisions,
            pe_active: self.rpus.iter().map(|r| r.active.clone()).collect(),
            pe_idle: self.rpus.iter().map(|r| r.active.iter().map(|a| self.cycle - a).collect()).collect(),
            ring_grants: self.ring_grants,
            grants_per_lsu: grants,
            requests_per_lsu: requests,
            sreg_conflicts: self.sreg_conflicts,
        }
    }

    fn quiescent(&self) -> bool {
        self.rpus.iter().all(Rpu::quiescent)
    }

    /// Feeds the script to the host bridge and runs until every RPU is
    /// quiescent. Counters stay readable through [`System::stats`] when this
    /// returns an error.
    pub fn run(&mut self, script: &[HostCommand]) -> Result<(), SimError> {
        let mut next = 0;
        let mut stagnant = 0u64;
        while next < script.len() || !self.quiescent() {
            let host_blocked = self.rpus.iter().any(|r| r.queue.iter().any(|(cv, _)| cv.action == Action::Sync));
            let mut progress = false;
            if !host_blocked && next < script.len() {
                self.issue(&script[next])?;
                next += 1;
                progress = true;
            }
            progress |= self.step()?;
            stagnant = if progress { 0 } else { stagnant + 1 };
            let longest_run = self.rpus.iter().map(|r| r.run_cycles).max().unwrap_or(0);
            if stagnant > self.cycle_limit || longest_run > self.cycle_limit {
                return Err(SimError::CycleLimitExceeded { limit: self.cycle_limit, cycle: self.cycle });
            }
        }
        Ok(())
    }

    fn issue(&mut self, cmd: &HostCommand) -> Result<(), SimError> {
        self.host_commands += 1;
        if cmd.is_rtt_write() {
            let (op, cv) = cmd.rtt_write_entry()?;
            self.rtt.write(op, cv)?;
            return Ok(());
        }
        let cv = self.rtt.decode(cmd)?;
        let n = self.rpus.len();
        if cv.mask == 0 || (n < 32 && cv.mask >> n != 0) {
            return Err(SimError::InvalidTarget { mask: cv.mask });
        }
        debug!("cycle {}: host {} mask {:#x}", self.cycle, cv.action, cv.mask);
        for (r, rpu) in self.rpus.iter_mut().enumerate() {
            if cv.mask & (1 << r) != 0 {
                rpu.queue.push_back((cv, Origin::Host));
            }
        }
        Ok(())
    }

    /// Advances the machine by one cycle; returns whether anything other
    /// than PE computation happened.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.cycle += 1;
        let mut progress = false;
        for r in 0..self.rpus.len() {
            progress |= self.process_queue(r)?;
        }
        self.array_cycle()?;
        for (r, rpu) in self.rpus.iter_mut().enumerate() {
            let step = rpu
                .dma
                .step(&mut rpu.sram, &self.ext, &mut rpu.results, &rpu.bank_busy)
                .map_err(|source| SimError::Memory { rpu: r, source })?;
            progress |= matches!(step, DmaStep::Moved(_));
            if rpu.status == RpuStatus::Running {
                rpu.run_cycles += 1;
                if rpu.array_done() {
                    debug!("cycle {}: RPU {r} done after {} cycles", self.cycle, rpu.run_cycles);
                    rpu.status = RpuStatus::Done;
                    rpu.run_cycles = 0;
                    progress = true;
                    if rpu.dma.pingpong() {
                        rpu.dma.pingpong_toggle(true);
                    }
                }
            }
            progress |= rpu.dma.apply_pending_toggle();
        }
        Ok(progress)
    }

    fn config_records(&self, cv: &ControlVector) -> Result<Vec<PeRecord>, SimError> {
        let size = self.config_store.len();
        let start = cv.ext_base as usize;
        let len = if cv.length == 0 { size.saturating_sub(start) } else { cv.length as usize };
        if start + len > size {
            return Err(SimError::ConfigStoreRange { start, len, size });
        }
        Ok(decode_bitstream(&words_to_bytes(&self.config_store[start..start + len]))?)
    }

    fn process_queue(&mut self, r: usize) -> Result<bool, SimError> {
        let rpu = &mut self.rpus[r];
        if rpu.busy > 0 {
            rpu.busy -= 1;
            return Ok(true);
        }
        let Some(&(cv, origin)) = rpu.queue.front() else {
            return Ok(false);
        };
        let running = rpu.status == RpuStatus::Running;
        let pingpong = rpu.dma.pingpong();
        let ready = match cv.action {
            Action::LoadConfig | Action::StoreResults if running => false,
            Action::LoadConfig | Action::CpeConfig | Action::Toggle => true,
            Action::LoadData => pingpong || !running,
            Action::Launch => {
                if rpu.status == RpuStatus::Idle {
                    return Err(SimError::ProtocolOrderViolation { rpu: r, action: cv.action, status: rpu.status });
                }
                !running && !rpu.dma.toggle_pending() && (pingpong || rpu.dma.is_idle())
            }
            Action::StoreResults => !rpu.dma.toggle_pending(),
            Action::Sync => !running && rpu.dma.is_idle() && !rpu.cpe_running,
            Action::SetPingpong => !running && rpu.dma.is_idle(),
        };
        if !ready {
            return Ok(false);
        }
        match cv.action {
            Action::LoadConfig => {
                let records = self.config_records(&cv)?;
                let words = if cv.length == 0 {
                    self.config_store.len().saturating_sub(cv.ext_base as usize)
                } else {
                    cv.length as usize
                };
                self.configure(r, &records)?;
                let rpu = &mut self.rpus[r];
                rpu.busy = words as u64;
                rpu.status = RpuStatus::Configured;
            }
            Action::CpeConfig => {
                let records = self.config_records(&cv)?;
                self.configure_cpe(r, &records)?;
            }
            Action::LoadData => rpu.dma.enqueue(Transfer {
                dir: TransferDir::In,
                ext_addr: cv.ext_base,
                sm_addr: cv.sm_base,
                length: cv.length,
            }),
            Action::StoreResults => {
                rpu.dma.enqueue(Transfer { dir: TransferDir::Out, ext_addr: 0, sm_addr: cv.sm_base, length: cv.length })
            }
            Action::Launch => {
                rpu.status = RpuStatus::Running;
                rpu.run_cycles = 0;
                rpu.sregs.clear();
                for (i, pe) in rpu.pes.iter_mut().enumerate() {
                    if Some(i) != rpu.cpe {
                        pe.reset();
                    }
                }
                self.launches += 1;
            }
            Action::Sync => {}
            Action::Toggle => {
                rpu.dma.pingpong_toggle(true);
            }
            Action::SetPingpong => rpu.dma.set_pingpong(cv.mode != 0),
        }
        trace!("cycle {}: RPU {r} executes {}", self.cycle, cv.action);
        self.rpus[r].queue.pop_front();
        self.trace.push(TraceEvent { cycle: self.cycle, rpu: r, action: cv.action, origin });
        Ok(true)
    }

    fn invalid(rec: &PeRecord, reason: impl Into<String>) -> SimError {
        SimError::BitstreamTargetInvalid { row: rec.row, col: rec.col, reason: reason.into() }
    }

    /// Validates every record, then replaces all array contexts at once;
    /// PEs without a record get an empty context.
    fn configure(&mut self, r: usize, records: &[PeRecord]) -> Result<(), SimError> {
        let p = &self.params;
        let cpe = p.cpe();
        let mut contexts: Vec<Option<&[ConfigWord]>> = vec![None; p.rows * p.cols];
        for rec in records {
            let row = usize::from(rec.row);
            if row >= p.rows {
                return Err(Self::invalid(rec, "row outside the grid"));
            }
            let targets: Vec<Coord> = if rec.is_broadcast() {
                (0..p.cols).map(|c| Coord::new(row, c)).filter(|&c| Some(c) != cpe).collect()
            } else {
                if p.exec_mode == ExecMode::Scmd {
                    return Err(Self::invalid(rec, "SCMD accepts only row broadcast records"));
                }
                let at = Coord::new(row, usize::from(rec.col));
                if !p.contains(at) {
                    return Err(Self::invalid(rec, "column outside the grid"));
                }
                if Some(at) == cpe {
                    return Err(Self::invalid(rec, "the controller PE is configured with cpe_config"));
                }
                vec![at]
            };
            for at in targets {
                for (i, w) in rec.words.iter().enumerate() {
                    check_word(w, p.pe_type(at), p.topology)
                        .map_err(|e| Self::invalid(rec, format!("word {i} on {at}: {e}")))?;
                }
                if rec.words.len() > p.context_capacity() {
                    return Err(SimError::Capacity {
                        at,
                        source: CapacityExceeded { words: rec.words.len(), capacity: p.context_capacity() },
                    });
                }
                let slot = &mut contexts[p.index(at)];
                if slot.is_some() {
                    return Err(Self::invalid(rec, format!("second record for {at}")));
                }
                *slot = Some(&rec.words);
            }
        }
        let rpu = &mut self.rpus[r];
        for (i, pe) in rpu.pes.iter_mut().enumerate() {
            if Some(i) != rpu.cpe {
                let at = pe.coord;
                pe.load_context(contexts[i].unwrap_or(&[])).map_err(|source| SimError::Capacity { at, source })?;
            }
        }
        Ok(())
    }

    fn configure_cpe(&mut self, r: usize, records: &[PeRecord]) -> Result<(), SimError> {
        let at = self.params.cpe().ok_or(SimError::NoCpe { rpu: r })?;
        let mut words: &[ConfigWord] = &[];
        for rec in records {
            if rec.is_broadcast() || Coord::new(usize::from(rec.row), usize::from(rec.col)) != at {
                return Err(Self::invalid(rec, "cpe_config records must target the controller PE"));
            }
            for (i, w) in rec.words.iter().enumerate() {
                check_word(w, PeType::Cpe, self.params.topology)
                    .map_err(|e| Self::invalid(rec, format!("word {i}: {e}")))?;
            }
            words = &rec.words;
        }
        let rpu = &mut self.rpus[r];
        let idx = rpu.cpe.expect("controller index matches params");
        let pe = &mut rpu.pes[idx];
        pe.load_context(words).map_err(|source| SimError::Capacity { at, source })?;
        pe.reset();
        rpu.cpe_running = !words.is_empty();
        Ok(())
    }

    fn resolve(&self, r: usize, req: &MemRequest) -> Result<Target, SimError> {
        let own = &self.rpus[r];
        let view = own.dma.pea_view();
        let words = own.sram.view_words(view) as u32;
        if req.addr < words {
            let loc = own.sram.locate(req.addr, view).expect("address checked against view");
            return Ok(Target::Local(loc));
        }
        let n = self.rpus.len();
        let out_of_range =
            |limit: u32| SimError::Memory { rpu: r, source: MemError::AddressOutOfRange { addr: req.addr, limit } };
        if n < 2 || req.op != MemOp::Load {
            return Err(out_of_range(words));
        }
        let nb = &self.rpus[(r + 1) % n];
        let nview = nb.dma.pea_view();
        let nwords = nb.sram.view_words(nview) as u32;
        nb.sram.locate(req.addr - words, nview).map(Target::Ring).map_err(|_| out_of_range(words + nwords))
    }

    /// Memory phase and PE ticks for every RPU.
    fn array_cycle(&mut self) -> Result<(), SimError> {
        let n = self.rpus.len();
        let (topology, rows, cols) = (self.params.topology, self.params.rows, self.params.cols);

        // snapshot of port values and the memory requests they imply
        let mut ports: Vec<Vec<PortInputs>> = Vec::with_capacity(n);
        let mut requests: Vec<Vec<Option<MemRequest>>> = Vec::with_capacity(n);
        for rpu in &mut self.rpus {
            if let Some((pe, v)) = rpu.ring_pending.take() {
                rpu.pes[pe].serve(v);
            }
            let outs: Vec<Option<u32>> = rpu.pes.iter().map(PeState::port_out).collect();
            let p = exchange(topology, rows, cols, &outs);
            let mut reqs = vec![None; rpu.lsus.len()];
            if rpu.status == RpuStatus::Running {
                for (slot, &pi) in rpu.lsus.iter().enumerate() {
                    let pe = &rpu.pes[pi];
                    let inp = PeInputs { ports: p[pi], sregs: rpu.sregs.view(pe.coord) };
                    reqs[slot] = pe.mem_request(&inp);
                }
            }
            ports.push(p);
            requests.push(reqs);
        }
        let mut targets: Vec<Vec<Option<(MemRequest, Target)>>> = Vec::with_capacity(n);
        for (r, reqs) in requests.iter().enumerate() {
            let mut t = Vec::with_capacity(reqs.len());
            for req in reqs {
                t.push(match req {
                    Some(req) => Some((*req, self.resolve(r, req)?)),
                    None => None,
                });
            }
            targets.push(t);
        }

        // arbitration: LSUs of the RPU plus the ring port of its
        // counter-clockwise neighbor
        let mut granted: Vec<Vec<bool>> = Vec::with_capacity(n);
        let mut ring_slot: Vec<Option<usize>> = vec![None; n];
        for j in 0..n {
            let lsu_n = self.rpus[j].lsus.len();
            let mut bank_of: Vec<Option<usize>> = targets[j]
                .iter()
                .map(|t| match t {
                    Some((_, Target::Local(loc))) => Some(loc.bank),
                    _ => None,
                })
                .collect();
            if n >= 2 {
                let src = (j + n - 1) % n;
                let ring = targets[src].iter().enumerate().find_map(|(slot, t)| match t {
                    Some((_, Target::Ring(loc))) => Some((slot, loc.bank)),
                    _ => None,
                });
                ring_slot[src] = ring.map(|(slot, _)| slot);
                bank_of.push(ring.map(|(_, b)| b));
            }
            debug_assert_eq!(bank_of.len(), lsu_n + usize::from(n >= 2));
            granted.push(self.rpus[j].arbiter.arbitrate(&bank_of));
        }

        // accesses
        let mut ring_data: Vec<(usize, usize, u32)> = Vec::new();
        for j in 0..n {
            let rpu = &mut self.rpus[j];
            let lsu_n = rpu.lsus.len();
            rpu.bank_busy.iter_mut().for_each(|b| *b = false);
            let dma_half = rpu.dma.pingpong().then(|| rpu.dma.dma_half());
            for slot in 0..lsu_n {
                if !granted[j][slot] {
                    continue;
                }
                let Some((req, Target::Local(loc))) = targets[j][slot] else {
                    unreachable!("grant without a local request");
                };
                rpu.bank_busy[loc.bank] = true;
                if dma_half == Some(rpu.sram.half_of(loc)) {
                    self.pingpong_collisions += 1;
                }
                let pe = rpu.lsus[slot];
                match req.op {
                    MemOp::Load => {
                        let v = rpu.sram.read(loc);
                        rpu.pes[pe].serve(v);
                    }
                    MemOp::Store(v) => {
                        rpu.sram.write(loc, v);
                        rpu.pes[pe].serve(0);
                    }
                }
            }
            if n >= 2 && granted[j][lsu_n] {
                let src = (j + n - 1) % n;
                let slot = ring_slot[src].expect("ring grant has a requester");
                let Some((_, Target::Ring(loc))) = targets[src][slot] else {
                    unreachable!("ring grant without a ring request");
                };
                rpu.bank_busy[loc.bank] = true;
                if dma_half == Some(rpu.sram.half_of(loc)) {
                    self.pingpong_collisions += 1;
                }
                self.ring_grants += 1;
                ring_data.push((src, slot, rpu.sram.read(loc)));
            }
        }
        let mut ring_waiting = vec![false; n];
        for (src, slot, v) in ring_data {
            let pe = self.rpus[src].lsus[slot];
            self.rpus[src].ring_pending = Some((pe, v));
            ring_waiting[src] = true;
        }

        // PE ticks
        for r in 0..n {
            let stalled = ring_waiting[r]
                || targets[r].iter().enumerate().any(|(slot, t)| match t {
                    Some((_, Target::Local(_))) => !granted[r][slot],
                    Some((_, Target::Ring(_))) => true,
                    None => false,
                });
            let rpu = &mut self.rpus[r];
            let running = rpu.status == RpuStatus::Running;
            if running && stalled {
                self.array_stall_cycles += 1;
            }
            let tick_array = running && !stalled;
            if !tick_array && !rpu.cpe_running {
                continue;
            }
            let mut sreg_writes = Vec::new();
            let mut triggers = Vec::new();
            for (i, pe) in rpu.pes.iter_mut().enumerate() {
                let is_cpe = Some(i) == rpu.cpe;
                if !(if is_cpe { rpu.cpe_running } else { tick_array }) {
                    continue;
                }
                let inp = PeInputs { ports: ports[r][i], sregs: rpu.sregs.view(pe.coord) };
                let out = pe.tick(&inp);
                if out.active {
                    rpu.active[i] += 1;
                }
                if let Some((idx, v)) = out.sreg_write {
                    sreg_writes.push((pe.coord, idx, v));
                }
                if let Some(v) = out.rtt_trigger {
                    triggers.push(v);
                }
            }
            if let Some(c) = rpu.cpe {
                if rpu.cpe_running && rpu.pes[c].is_done() {
                    rpu.cpe_running = false;
                }
            }
            for (at, idx, v) in sreg_writes {
                rpu.sregs.write(at, idx, v).map_err(|source| SimError::SharedReg { rpu: r, source })?;
            }
            self.sreg_conflicts += rpu.sregs.commit();
            for v in triggers {
                let opcode = (v & 0xFF) as u8;
                let cv = self.rtt.decode(&HostCommand::new(opcode, &[]))?.indexed(v >> 8);
                debug!("cycle {}: CPE of RPU {r} triggers {}", self.cycle, cv.action);
                rpu.queue.push_back((cv, Origin::Cpe));
                self.cpe_actions += 1;
            }
        }
        Ok(())
    }
}

/// Outcome of a full protocol run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub results: Vec<u32>,
    pub stats: SimStats,
}

/// Runs `script` on a fresh system holding `bitstream` in its configuration
/// store and `data` in external memory.
pub fn run_protocol(
    params: &ArchParams,
    bitstream: &[u8],
    data: &[u32],
    script: &[HostCommand],
    cycle_limit: u64,
) -> Result<RunOutput, SimError> {
    let mut sys = System::new(params.clone()).with_cycle_limit(cycle_limit);
    sys.set_config_store(crate::bitstream::bytes_to_words(bitstream)?);
    sys.set_external(data.to_vec());
    sys.run(script)?;
    Ok(RunOutput { results: sys.results(), stats: sys.stats() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::{encode_bitstream, BROADCAST_COL};
    use crate::host::boot_script;
    use crate::pe::{Opcode, SrcSel};

    fn small() -> ArchParams {
        let mut p = ArchParams::with_grid(4, 4, false);
        p.rpu_count = 1;
        p
    }

    fn sys_with(p: &ArchParams, records: &[PeRecord]) -> System {
        let mut s = System::new(p.clone());
        s.set_config_store(crate::bitstream::bytes_to_words(&encode_bitstream(records)).unwrap());
        s
    }

    fn rec(row: u8, col: u8, words: Vec<ConfigWord>) -> PeRecord {
        PeRecord { row, col, words }
    }

    #[test]
    fn nop_bitstream_finishes_quickly_and_leaves_memory() {
        let p = small();
        let mut s = sys_with(&p, &[rec(1, 1, vec![ConfigWord::NOP])]);
        s.set_external((0..8).collect());
        s.run(&boot_script(1, 8, 0, 8)).unwrap();
        assert_eq!(s.results(), (0..8).collect::<Vec<u32>>());
        assert!(s.cycle() <= 64);
        assert_eq!(s.rpus()[0].status(), RpuStatus::Done);
    }

    #[test]
    fn launch_before_configuration_is_rejected() {
        let mut s = sys_with(&small(), &[]);
        let e = s.run(&[HostCommand::action(Action::Launch, &[1])]).unwrap_err();
        assert!(matches!(e, SimError::ProtocolOrderViolation { action: Action::Launch, .. }));
    }

    #[test]
    fn unknown_opcode_and_bad_mask() {
        let mut s = sys_with(&small(), &[]);
        assert_eq!(s.run(&[HostCommand::new(0x55, &[])]), Err(SimError::Host(HostError::UnknownOpcode(0x55))));
        let mut s = sys_with(&small(), &[]);
        assert!(matches!(
            s.run(&[HostCommand::action(Action::LoadConfig, &[2])]),
            Err(SimError::InvalidTarget { mask: 2 })
        ));
    }

    #[test]
    fn lsu_copy_kernel() {
        // (0,1) loads word 3 and stores it to word 9
        let p = small();
        let ld = ConfigWord::new(Opcode::Load).with_imm(3);
        let st_words = vec![
            ConfigWord::NOP,
            ConfigWord::NOP,
            ConfigWord::new(Opcode::Store).with_src(SrcSel::Acc, SrcSel::None).with_imm(9),
        ];
        let mut words = vec![ld];
        words.extend(st_words);
        let mut s = sys_with(&p, &[rec(0, 1, words)]);
        s.set_external(vec![0, 0, 0, 77]);
        s.run(&boot_script(1, 4, 9, 1)).unwrap();
        assert_eq!(s.results(), vec![77]);
    }

    #[test]
    fn invalid_targets_rejected() {
        let p = small();
        let mut s = sys_with(&p, &[rec(9, 0, vec![ConfigWord::NOP])]);
        assert!(matches!(s.run(&boot_script(1, 0, 0, 0)), Err(SimError::BitstreamTargetInvalid { row: 9, .. })));
        let mut s = sys_with(&p, &[rec(1, 1, vec![ConfigWord::new(Opcode::Load)])]);
        assert!(matches!(s.run(&boot_script(1, 0, 0, 0)), Err(SimError::BitstreamTargetInvalid { .. })));
        let mut scmd = p.clone();
        scmd.exec_mode = ExecMode::Scmd;
        let mut s = sys_with(&scmd, &[rec(1, 1, vec![ConfigWord::NOP])]);
        assert!(matches!(s.run(&boot_script(1, 0, 0, 0)), Err(SimError::BitstreamTargetInvalid { .. })));
        let mut s = sys_with(&scmd, &[rec(1, BROADCAST_COL, vec![ConfigWord::NOP; 100])]);
        s.run(&boot_script(1, 0, 0, 0)).unwrap();
        let ctx: Vec<_> = s.rpus()[0].pes()[4..8].iter().map(|pe| pe.context().to_vec()).collect();
        assert!(ctx.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cycle_limit_trips_on_long_launch() {
        let p = small();
        let spin = ConfigWord::new(Opcode::Route).with_src(SrcSel::Iter, SrcSel::None).with_iters(255);
        let mut s = sys_with(&p, &[rec(1, 1, vec![spin; 8])]).with_cycle_limit(100);
        let e = s.run(&boot_script(1, 0, 0, 0)).unwrap_err();
        assert!(matches!(e, SimError::CycleLimitExceeded { limit: 100, .. }));
        assert!(s.stats().total_cycles > 100);
    }

    #[test]
    fn ring_reads_clockwise_neighbor() {
        let mut p = ArchParams::with_grid(4, 4, false);
        p.rpu_count = 4;
        let cap = p.sm_words() as u16;
        // RPU3 LSU (0,1) loads address cap (= neighbor word 0) and stores it locally
        let words = vec![
            ConfigWord::new(Opcode::Load).with_imm(cap),
            ConfigWord::NOP,
            ConfigWord::NOP,
            ConfigWord::new(Opcode::Store).with_src(SrcSel::Acc, SrcSel::None).with_imm(5),
        ];
        let mut s = sys_with(&p, &[rec(0, 1, words)]);
        s.rpu_mut(0).sram_mut().write_word(0, 9).unwrap();
        s.run(&boot_script(0b1000, 0, 5, 1)).unwrap();
        assert_eq!(s.results(), vec![9]);
        assert_eq!(s.stats().ring_grants, 1);
        assert!(s.stats().array_stall_cycles >= 1);
    }

    #[test]
    fn store_into_ring_range_fails() {
        let mut p = ArchParams::with_grid(4, 4, false);
        p.rpu_count = 2;
        let cap = p.sm_words() as u16;
        let st = ConfigWord::new(Opcode::Store).with_src(SrcSel::Zero, SrcSel::None).with_imm(cap);
        let mut s = sys_with(&p, &[rec(0, 1, vec![st])]);
        let e = s.run(&boot_script(1, 0, 0, 0)).unwrap_err();
        assert!(matches!(e, SimError::Memory { source: MemError::AddressOutOfRange { .. }, .. }));
    }

    #[test]
    fn cpe_without_sequence_keeps_rpu_configured() {
        let p = ArchParams::with_grid(4, 4, true);
        let mut p = p;
        p.rpu_count = 1;
        let mut s = sys_with(&p, &[]);
        s.run(&[HostCommand::action(Action::LoadConfig, &[1]), HostCommand::action(Action::CpeConfig, &[1])]).unwrap();
        assert_eq!(s.rpus()[0].status(), RpuStatus::Configured);
        assert_eq!(s.stats().cpe_actions, 0);
    }

    #[test]
    fn cpe_config_without_cpe() {
        let mut s = sys_with(&small(), &[]);
        assert_eq!(s.run(&[HostCommand::action(Action::CpeConfig, &[1])]), Err(SimError::NoCpe { rpu: 0 }));
    }

    #[test]
    fn stats_conservation() {
        let p = small();
        let mut s = sys_with(&p, &[rec(0, 1, vec![ConfigWord::new(Opcode::Load).with_iters(4)])]);
        s.run(&boot_script(1, 0, 0, 0)).unwrap();
        let st = s.stats();
        assert_eq!(st.total_grants(), s.rpus()[0].arbiter().total_grants());
        for (a, i) in st.pe_active[0].iter().zip(&st.pe_idle[0]) {
            assert_eq!(a + i, st.total_cycles);
        }
        assert_eq!(st.grants_per_lsu.iter().sum::<u64>(), 4);
    }
}
