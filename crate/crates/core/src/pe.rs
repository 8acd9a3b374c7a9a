//! Processing element: configuration word format, ALU, Iteration Control
//! Block and the four-stage pipeline (fetch, decode, execute, write-back).
//!
//! Configuration word layout (64 bits):
//!
//! | bits  | field          |
//! |-------|----------------|
//! | 63:59 | opcode         |
//! | 58:55 | src0 select    |
//! | 54:51 | src1 select    |
//! | 50:47 | dst select     |
//! | 46:31 | imm16          |
//! | 30:23 | iter_count     |
//! | 22:19 | shared_reg_idx |
//! | 18:16 | next_step      |
//! | 15:0  | reserved, zero |
//!
//! Fetch and decode form the config flow; execute, write-back and the
//! accumulator form the data flow. Execute writes the accumulator, the
//! write-back latch drives the output port for one cycle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Coord, ExecMode, PeType, Topology};
use crate::interconnect::{Direction, PortInputs};
use crate::memory::lsu_addr_gen;

/// Context words per PE. SCMD pools the row's context memory, giving eight
/// times the MCMD depth.
pub fn context_capacity(mode: ExecMode, context_depth_mcmd: usize) -> usize {
    match mode {
        ExecMode::Mcmd => context_depth_mcmd,
        ExecMode::Scmd => 8 * context_depth_mcmd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Nop = 0,
    Add = 1,
    Sub = 2,
    Mul = 3,
    And = 4,
    Or = 5,
    Xor = 6,
    Shl = 7,
    Shr = 8,
    CmpLt = 9,
    Sel = 10,
    Phi = 11,
    Route = 12,
    Load = 13,
    Store = 14,
    Halt = 15,
}

impl Opcode {
    pub const ALL: [Opcode; 16] = [
        Opcode::Nop,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::CmpLt,
        Opcode::Sel,
        Opcode::Phi,
        Opcode::Route,
        Opcode::Load,
        Opcode::Store,
        Opcode::Halt,
    ];

    pub fn from_code(code: u8) -> Option<Opcode> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "nop",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::CmpLt => "lt",
            Opcode::Sel => "sel",
            Opcode::Phi => "phi",
            Opcode::Route => "route",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Halt => "halt",
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(self, Opcode::Load | Opcode::Store)
    }

    /// Two-operand arithmetic/logic ops.
    pub fn is_binary_alu(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Shr
                | Opcode::CmpLt
        )
    }

    /// Ops that also consume the accumulator as an operand.
    pub fn reads_acc(self) -> bool {
        matches!(self, Opcode::Sel | Opcode::Phi)
    }
}

/// 32-bit wrapping ALU. `SEL` picks `b` when the predicate `a` is nonzero,
/// otherwise the accumulator; `PHI` keeps the accumulator while the
/// predicate is nonzero, otherwise takes `b`.
pub fn alu(op: Opcode, a: u32, b: u32, acc: u32) -> u32 {
    match op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Mul => a.wrapping_mul(b),
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Xor => a ^ b,
        Opcode::Shl => a << (b & 31),
        Opcode::Shr => a >> (b & 31),
        Opcode::CmpLt => u32::from((a as i32) < (b as i32)),
        Opcode::Sel => {
            if a != 0 {
                b
            } else {
                acc
            }
        }
        Opcode::Phi => {
            if a != 0 {
                acc
            } else {
                b
            }
        }
        Opcode::Route => a,
        Opcode::Nop | Opcode::Load | Opcode::Store | Opcode::Halt => 0,
    }
}

/// Operand source select (4 bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SrcSel {
    Port(Direction),
    Acc,
    SharedReg,
    /// imm16, sign-extended.
    Imm,
    /// imm16[15:8], sign-extended.
    ImmHi,
    /// imm16[7:0], sign-extended.
    ImmLo,
    /// Iteration index of the current control step.
    Iter,
    Zero,
    None,
}

impl SrcSel {
    pub fn code(self) -> u8 {
        match self {
            SrcSel::Port(d) => d.index() as u8,
            SrcSel::Acc => 8,
            SrcSel::SharedReg => 9,
            SrcSel::Imm => 10,
            SrcSel::ImmHi => 11,
            SrcSel::ImmLo => 12,
            SrcSel::Iter => 13,
            SrcSel::Zero => 14,
            SrcSel::None => 15,
        }
    }

    pub fn from_code(code: u8) -> SrcSel {
        match code & 0xF {
            c @ 0..=7 => SrcSel::Port(Direction::from_index(c as usize).unwrap()),
            8 => SrcSel::Acc,
            9 => SrcSel::SharedReg,
            10 => SrcSel::Imm,
            11 => SrcSel::ImmHi,
            12 => SrcSel::ImmLo,
            13 => SrcSel::Iter,
            14 => SrcSel::Zero,
            _ => SrcSel::None,
        }
    }
}

/// Result destination (4 bits). The result always lands in the accumulator
/// and the write-back latch; `SharedReg` also writes `shared_reg_idx`,
/// `Rtt` turns the result into a control action (controller PE only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DstSel {
    Port = 0,
    SharedReg = 1,
    Rtt = 2,
}

impl DstSel {
    pub fn from_code(code: u8) -> Option<DstSel> {
        match code {
            0 => Some(DstSel::Port),
            1 => Some(DstSel::SharedReg),
            2 => Some(DstSel::Rtt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("undefined opcode {0}")]
    BadOpcode(u8),
    #[error("undefined destination select {0}")]
    BadDst(u8),
    #[error("reserved bits set: {0:#06x}")]
    ReservedBits(u16),
}

/// One control step of a PE program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigWord {
    pub opcode: Opcode,
    pub src0: SrcSel,
    pub src1: SrcSel,
    pub dst: DstSel,
    pub imm: u16,
    /// Executions of this step; 0 behaves as 1.
    pub iter_count: u8,
    /// Shared register index, or the stride of an affine LSU access.
    pub shared_reg_idx: u8,
    /// Forward offset of the step that follows once the iterations are
    /// exhausted; 0 behaves as 1.
    pub next_step: u8,
}

impl ConfigWord {
    pub const NOP: ConfigWord = ConfigWord {
        opcode: Opcode::Nop,
        src0: SrcSel::Port(Direction::North),
        src1: SrcSel::Port(Direction::North),
        dst: DstSel::Port,
        imm: 0,
        iter_count: 0,
        shared_reg_idx: 0,
        next_step: 0,
    };

    /// `op` with unused operands, one iteration, fall-through.
    pub fn new(opcode: Opcode) -> Self {
        ConfigWord {
            opcode,
            src0: SrcSel::None,
            src1: SrcSel::None,
            dst: DstSel::Port,
            imm: 0,
            iter_count: 1,
            shared_reg_idx: 0,
            next_step: 1,
        }
    }

    pub fn with_src(mut self, src0: SrcSel, src1: SrcSel) -> Self {
        self.src0 = src0;
        self.src1 = src1;
        self
    }

    pub fn with_imm(mut self, imm: u16) -> Self {
        self.imm = imm;
        self
    }

    pub fn with_iters(mut self, n: u8) -> Self {
        self.iter_count = n;
        self
    }

    pub fn with_dst(mut self, dst: DstSel) -> Self {
        self.dst = dst;
        self
    }

    pub fn with_sreg(mut self, idx: u8) -> Self {
        self.shared_reg_idx = idx & 0xF;
        self
    }

    pub fn with_next(mut self, next: u8) -> Self {
        self.next_step = next & 0x7;
        self
    }

    pub fn executions(&self) -> u32 {
        u32::from(self.iter_count.max(1))
    }

    pub fn encode(&self) -> u64 {
        (u64::from(self.opcode.code()) << 59)
            | (u64::from(self.src0.code()) << 55)
            | (u64::from(self.src1.code()) << 51)
            | ((self.dst as u64) << 47)
            | (u64::from(self.imm) << 31)
            | (u64::from(self.iter_count) << 23)
            | (u64::from(self.shared_reg_idx & 0xF) << 19)
            | (u64::from(self.next_step & 0x7) << 16)
    }

    pub fn decode(w: u64) -> Result<ConfigWord, DecodeError> {
        let reserved = (w & 0xFFFF) as u16;
        if reserved != 0 {
            return Err(DecodeError::ReservedBits(reserved));
        }
        let op = (w >> 59) as u8 & 0x1F;
        let dst = (w >> 47) as u8 & 0xF;
        Ok(ConfigWord {
            opcode: Opcode::from_code(op).ok_or(DecodeError::BadOpcode(op))?,
            src0: SrcSel::from_code((w >> 55) as u8),
            src1: SrcSel::from_code((w >> 51) as u8),
            dst: DstSel::from_code(dst).ok_or(DecodeError::BadDst(dst))?,
            imm: (w >> 31) as u16,
            iter_count: (w >> 23) as u8,
            shared_reg_idx: (w >> 19) as u8 & 0xF,
            next_step: (w >> 16) as u8 & 0x7,
        })
    }

    /// Operand selects this op actually reads.
    pub fn operand_selects(&self) -> Vec<SrcSel> {
        match self.opcode {
            Opcode::Nop | Opcode::Halt => vec![],
            Opcode::Route => vec![self.src0],
            Opcode::Load => vec![self.src1],
            _ => vec![self.src0, self.src1],
        }
        .into_iter()
        .filter(|s| *s != SrcSel::None)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WordError {
    #[error("{op} is only legal on an LSU")]
    MemoryOnNonLsu { op: &'static str },
    #[error("RTT destination is only legal on the controller PE")]
    RttOnNonCpe,
    #[error("two-hop operand select requires the one-hop topology")]
    TwoHopSelect,
}

/// Placement rules a decoded word must satisfy on a given PE.
pub fn check_word(w: &ConfigWord, pe_type: PeType, topology: Topology) -> Result<(), WordError> {
    if w.opcode.is_memory() && pe_type != PeType::Lsu {
        return Err(WordError::MemoryOnNonLsu { op: w.opcode.mnemonic() });
    }
    if w.dst == DstSel::Rtt && pe_type != PeType::Cpe {
        return Err(WordError::RttOnNonCpe);
    }
    if topology != Topology::OneHop {
        for s in [w.src0, w.src1] {
            if let SrcSel::Port(d) = s {
                if d.is_two_hop() {
                    return Err(WordError::TwoHopSelect);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{words} words exceed context capacity {capacity}")]
pub struct CapacityExceeded {
    pub words: usize,
    pub capacity: usize,
}

/// A fetched control step travelling down the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InFlight {
    Op { word: ConfigWord, iteration: u32 },
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemOp {
    Load,
    Store(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub addr: u32,
    pub op: MemOp,
}

/// Everything a PE reads from outside during one cycle.
#[derive(Debug, Clone, Copy)]
pub struct PeInputs<'a> {
    pub ports: PortInputs,
    pub sregs: &'a [Option<u32>],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeOutputs {
    /// Execute stage ran a non-NOP operation.
    pub active: bool,
    pub sreg_write: Option<(usize, u32)>,
    pub rtt_trigger: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeState {
    pub coord: Coord,
    pub pe_type: PeType,
    capacity: usize,
    context: Vec<ConfigWord>,
    pc: usize,
    /// Iteration Control Block: remaining executions per step.
    icb: Vec<u32>,
    fetch_stopped: bool,
    fetch_latch: Option<InFlight>,
    decode_latch: Option<InFlight>,
    wb_latch: Option<u32>,
    wb_halt: bool,
    acc: Option<u32>,
    served: Option<u32>,
    done: bool,
}

impl PeState {
    pub fn new(coord: Coord, pe_type: PeType, capacity: usize) -> Self {
        PeState {
            coord,
            pe_type,
            capacity,
            context: Vec::new(),
            pc: 0,
            icb: Vec::new(),
            fetch_stopped: false,
            fetch_latch: None,
            decode_latch: None,
            wb_latch: None,
            wb_halt: false,
            acc: None,
            served: None,
            done: true,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn context(&self) -> &[ConfigWord] {
        &self.context
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn acc(&self) -> Option<u32> {
        self.acc
    }

    /// Value driven to the neighbors this cycle.
    pub fn port_out(&self) -> Option<u32> {
        self.wb_latch
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn remaining_iters(&self, step: usize) -> Option<u32> {
        self.icb.get(step).copied()
    }

    /// Data-flow latches (decode output, write-back, accumulator).
    pub fn data_latches(&self) -> (Option<InFlight>, Option<u32>, Option<u32>) {
        (self.decode_latch, self.wb_latch, self.acc)
    }

    /// Replaces the context through the config flow: pc and ICB restart,
    /// fetch stage is cleared, execute/write-back latches are untouched.
    pub fn load_context(&mut self, words: &[ConfigWord]) -> Result<(), CapacityExceeded> {
        if words.len() > self.capacity {
            return Err(CapacityExceeded { words: words.len(), capacity: self.capacity });
        }
        self.context = words.to_vec();
        self.restart_config_flow();
        Ok(())
    }

    fn restart_config_flow(&mut self) {
        self.pc = 0;
        self.icb = self.context.iter().map(|w| w.executions()).collect();
        self.fetch_latch = None;
        self.fetch_stopped = false;
        self.done = self.context.is_empty();
    }

    /// Cold start for a new launch: empty pipeline, invalid accumulator.
    pub fn reset(&mut self) {
        self.restart_config_flow();
        self.decode_latch = None;
        self.wb_latch = None;
        self.wb_halt = false;
        self.acc = None;
        self.served = None;
    }

    fn operand(&self, sel: SrcSel, word: &ConfigWord, iteration: u32, inp: &PeInputs<'_>) -> Option<u32> {
        let sext8 = |b: u8| b as i8 as i32 as u32;
        match sel {
            SrcSel::Port(d) => inp.ports[d.index()],
            SrcSel::Acc => self.acc,
            SrcSel::SharedReg => inp.sregs.get(word.shared_reg_idx as usize).copied().flatten(),
            SrcSel::Imm => Some(word.imm as i16 as i32 as u32),
            SrcSel::ImmHi => Some(sext8((word.imm >> 8) as u8)),
            SrcSel::ImmLo => Some(sext8(word.imm as u8)),
            SrcSel::Iter => Some(iteration),
            SrcSel::Zero => Some(0),
            SrcSel::None => None,
        }
    }

    /// Memory access the execute stage needs this cycle, if any and not
    /// already served during a stall. `None` inside the `Some` marks an
    /// operand that is invalid, so no access happens.
    pub fn mem_request(&self, inp: &PeInputs<'_>) -> Option<MemRequest> {
        if self.served.is_some() {
            return None;
        }
        let Some(InFlight::Op { word, iteration }) = self.decode_latch else {
            return None;
        };
        let addr_operand = |s: &Self| match word.src1 {
            SrcSel::None => Some(None),
            sel => s.operand(sel, &word, iteration, inp).map(Some),
        };
        match word.opcode {
            Opcode::Load => {
                let operand = addr_operand(self)?;
                Some(MemRequest { addr: lsu_addr_gen(&word, iteration, operand), op: MemOp::Load })
            }
            Opcode::Store => {
                let value = self.operand(word.src0, &word, iteration, inp)?;
                let operand = addr_operand(self)?;
                Some(MemRequest { addr: lsu_addr_gen(&word, iteration, operand), op: MemOp::Store(value) })
            }
            _ => None,
        }
    }

    /// Records the memory response for the pending LOAD/STORE.
    pub fn serve(&mut self, data: u32) {
        self.served = Some(data);
    }

    /// Advances all four stages by one cycle.
    pub fn tick(&mut self, inp: &PeInputs<'_>) -> PeOutputs {
        let mut out = PeOutputs::default();

        // write-back: the halt marker retires one cycle after execute
        if self.wb_halt {
            self.done = true;
            self.wb_halt = false;
        }

        // execute
        let mut wb = None;
        match self.decode_latch.take() {
            Some(InFlight::Halt) => self.wb_halt = true,
            Some(InFlight::Op { word, iteration }) => {
                let served = self.served.take();
                if word.opcode != Opcode::Nop {
                    out.active = true;
                }
                let result = match word.opcode {
                    Opcode::Nop | Opcode::Halt => None,
                    Opcode::Store => None,
                    Opcode::Load => served,
                    Opcode::Route => self.operand(word.src0, &word, iteration, inp),
                    op => {
                        let a = self.operand(word.src0, &word, iteration, inp);
                        let b = self.operand(word.src1, &word, iteration, inp);
                        match (a, b) {
                            (Some(a), Some(b)) if op.reads_acc() => self.acc.map(|acc| alu(op, a, b, acc)),
                            (Some(a), Some(b)) => Some(alu(op, a, b, 0)),
                            _ => None,
                        }
                    }
                };
                if let Some(v) = result {
                    self.acc = Some(v);
                    match word.dst {
                        DstSel::Port => {}
                        DstSel::SharedReg => out.sreg_write = Some((word.shared_reg_idx as usize, v)),
                        DstSel::Rtt => out.rtt_trigger = Some(v),
                    }
                }
                wb = result;
            }
            None => {}
        }
        self.wb_latch = wb;

        // decode
        self.decode_latch = self.fetch_latch.take();

        // fetch, with the ICB deciding when to leave a step
        if !self.fetch_stopped {
            match self.context.get(self.pc) {
                None => {
                    self.fetch_latch = Some(InFlight::Halt);
                    self.fetch_stopped = true;
                }
                Some(w) if w.opcode == Opcode::Halt => {
                    self.fetch_latch = Some(InFlight::Halt);
                    self.fetch_stopped = true;
                }
                Some(&word) => {
                    let total = word.executions();
                    let remaining = &mut self.icb[self.pc];
                    let iteration = total - *remaining;
                    *remaining -= 1;
                    if *remaining == 0 {
                        *remaining = total;
                        self.pc += usize::from(word.next_step.max(1));
                    }
                    self.fetch_latch = Some(InFlight::Op { word, iteration });
                }
            }
        }
        out
    }
}
