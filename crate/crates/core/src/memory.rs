//! Shared memory: word-interleaved SRAM banks, the parallel access interface
//! with per-bank round-robin arbitration, and the DMA controller that
//! double-buffers through the row MSB.

use std::collections::VecDeque;

use thiserror::Error;

use crate::pe::ConfigWord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("shared memory address {addr} out of range (limit {limit})")]
    AddressOutOfRange { addr: u32, limit: u32 },
    #[error("external memory address {addr} out of range (size {size})")]
    ExternalOutOfRange { addr: u32, size: u32 },
}

/// LSU address generation. Affine (no address operand): `imm16 + stride *
/// iteration` with the stride taken from the shared-register field.
/// Non-affine: `imm16 + operand`.
pub fn lsu_addr_gen(word: &ConfigWord, iteration: u32, operand: Option<u32>) -> u32 {
    let base = u32::from(word.imm);
    match operand {
        None => base.wrapping_add(u32::from(word.shared_reg_idx).wrapping_mul(iteration)),
        Some(v) => base.wrapping_add(v),
    }
}

/// Which part of the banks an address space covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Full,
    /// One ping-pong half; the value is the row MSB.
    Half(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub bank: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankedSram {
    banks: usize,
    depth: usize,
    data: Vec<Vec<u32>>,
}

impl BankedSram {
    pub fn new(banks: usize, depth: usize) -> Self {
        BankedSram { banks, depth, data: vec![vec![0; depth]; banks] }
    }

    pub fn banks(&self) -> usize {
        self.banks
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn capacity(&self) -> usize {
        self.banks * self.depth
    }

    /// Words addressable through `view`.
    pub fn view_words(&self, view: View) -> usize {
        match view {
            View::Full => self.capacity(),
            View::Half(_) => self.capacity() / 2,
        }
    }

    /// Bank from the low address bits, row from the rest; a half view puts
    /// its MSB on top of the row.
    pub fn locate(&self, addr: u32, view: View) -> Result<Location, MemError> {
        let limit = self.view_words(view);
        if addr as usize >= limit {
            return Err(MemError::AddressOutOfRange { addr, limit: limit as u32 });
        }
        let a = addr as usize;
        let row = a / self.banks;
        let row = match view {
            View::Full => row,
            View::Half(h) => row + h * (self.depth / 2),
        };
        Ok(Location { bank: a % self.banks, row })
    }

    /// Ping-pong half a physical row belongs to.
    pub fn half_of(&self, loc: Location) -> usize {
        loc.row / (self.depth / 2)
    }

    pub fn read(&self, loc: Location) -> u32 {
        self.data[loc.bank][loc.row]
    }

    pub fn write(&mut self, loc: Location, value: u32) {
        self.data[loc.bank][loc.row] = value;
    }

    pub fn read_word(&self, addr: u32) -> Result<u32, MemError> {
        Ok(self.read(self.locate(addr, View::Full)?))
    }

    pub fn write_word(&mut self, addr: u32, value: u32) -> Result<(), MemError> {
        let loc = self.locate(addr, View::Full)?;
        self.write(loc, value);
        Ok(())
    }

    /// Contents in address order.
    pub fn image(&self) -> Vec<u32> {
        (0..self.capacity() as u32).map(|a| self.read_word(a).unwrap()).collect()
    }
}

/// Per-bank round-robin arbiter over a fixed set of requesters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaiArbiter {
    requesters: usize,
    /// Last granted requester per bank.
    rr_pointer: Vec<usize>,
    pub grants: Vec<u64>,
    pub requests: Vec<u64>,
    pub conflicts: u64,
}

impl PaiArbiter {
    pub fn new(requesters: usize, banks: usize) -> Self {
        PaiArbiter {
            requesters,
            rr_pointer: vec![requesters.saturating_sub(1); banks],
            grants: vec![0; requesters],
            requests: vec![0; requesters],
            conflicts: 0,
        }
    }

    pub fn requesters(&self) -> usize {
        self.requesters
    }

    pub fn pointer(&self, bank: usize) -> usize {
        self.rr_pointer[bank]
    }

    /// `bank_of[i]` is the bank requester `i` targets this cycle. Each bank
    /// grants the first requester strictly after its pointer in cyclic
    /// order; everybody else on that bank stalls and retries.
    pub fn arbitrate(&mut self, bank_of: &[Option<usize>]) -> Vec<bool> {
        assert_eq!(bank_of.len(), self.requesters);
        let mut granted = vec![false; self.requesters];
        let mut per_bank: Vec<u32> = vec![0; self.rr_pointer.len()];
        for (i, b) in bank_of.iter().enumerate() {
            if let Some(b) = *b {
                per_bank[b] += 1;
                self.requests[i] += 1;
            }
        }
        for (bank, &count) in per_bank.iter().enumerate() {
            if count == 0 {
                continue;
            }
            self.conflicts += u64::from(count - 1);
            let start = self.rr_pointer[bank];
            let winner = (1..=self.requesters)
                .map(|k| (start + k) % self.requesters)
                .find(|&i| bank_of[i] == Some(bank))
                .expect("bank has a requester");
            granted[winner] = true;
            self.grants[winner] += 1;
            self.rr_pointer[bank] = winner;
        }
        granted
    }

    pub fn total_grants(&self) -> u64 {
        self.grants.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDir {
    /// External memory to shared memory.
    In,
    /// Shared memory to the host results buffer.
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub dir: TransferDir,
    pub ext_addr: u32,
    pub sm_addr: u32,
    pub length: u32,
}

/// Outcome of one DMA cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaStep {
    Idle,
    Moved(Location),
    /// The target bank was taken by the array this cycle.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaController {
    queue: VecDeque<Transfer>,
    progress: u32,
    /// Row MSB currently owned by the DMA.
    dma_half: usize,
    pingpong: bool,
    toggle_pending: bool,
    pub toggles: u64,
    pub words_moved: u64,
    pub stall_cycles: u64,
}

impl Default for DmaController {
    fn default() -> Self {
        Self::new()
    }
}

impl DmaController {
    pub fn new() -> Self {
        DmaController {
            queue: VecDeque::new(),
            progress: 0,
            dma_half: 1,
            pingpong: false,
            toggle_pending: false,
            toggles: 0,
            words_moved: 0,
            stall_cycles: 0,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn dma_half(&self) -> usize {
        self.dma_half
    }

    pub fn pingpong(&self) -> bool {
        self.pingpong
    }

    pub fn set_pingpong(&mut self, on: bool) {
        self.pingpong = on;
    }

    pub fn toggle_pending(&self) -> bool {
        self.toggle_pending
    }

    /// Address space the array sees.
    pub fn pea_view(&self) -> View {
        if self.pingpong {
            View::Half(1 - self.dma_half)
        } else {
            View::Full
        }
    }

    /// Address space the DMA writes into and drains from.
    pub fn dma_view(&self) -> View {
        if self.pingpong {
            View::Half(self.dma_half)
        } else {
            View::Full
        }
    }

    pub fn enqueue(&mut self, t: Transfer) {
        if t.length > 0 {
            self.queue.push_back(t);
        }
    }

    /// Finish signal from the array. The MSB flip waits until the queue has
    /// drained; returns whether it took effect now.
    pub fn pingpong_toggle(&mut self, finish: bool) -> bool {
        if finish {
            self.toggle_pending = true;
        }
        self.apply_pending_toggle()
    }

    pub fn apply_pending_toggle(&mut self) -> bool {
        if self.toggle_pending && self.is_idle() {
            self.toggle_pending = false;
            self.dma_half ^= 1;
            self.toggles += 1;
            true
        } else {
            false
        }
    }

    /// Moves at most one word. `bank_busy[b]` marks banks the array was
    /// granted this cycle.
    pub fn step(
        &mut self,
        sram: &mut BankedSram,
        ext: &[u32],
        results: &mut Vec<u32>,
        bank_busy: &[bool],
    ) -> Result<DmaStep, MemError> {
        let Some(t) = self.queue.front().copied() else {
            return Ok(DmaStep::Idle);
        };
        let loc = sram.locate(t.sm_addr.wrapping_add(self.progress), self.dma_view())?;
        if bank_busy[loc.bank] {
            self.stall_cycles += 1;
            return Ok(DmaStep::Stalled);
        }
        match t.dir {
            TransferDir::In => {
                let src = t.ext_addr.wrapping_add(self.progress);
                let v =
                    *ext.get(src as usize).ok_or(MemError::ExternalOutOfRange { addr: src, size: ext.len() as u32 })?;
                sram.write(loc, v);
            }
            TransferDir::Out => results.push(sram.read(loc)),
        }
        self.words_moved += 1;
        self.progress += 1;
        if self.progress == t.length {
            self.queue.pop_front();
            self.progress = 0;
        }
        Ok(DmaStep::Moved(loc))
    }
}
