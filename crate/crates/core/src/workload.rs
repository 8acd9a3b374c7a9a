//! Multi-phase workloads: one configured kernel run over consecutive chunks
//! of the external image, driven either by host commands or by a controller
//! PE program that issues the per-phase commands itself.
//!
//! Each phase loads `chunk` words from `k * chunk` into shared memory at
//! address 0, launches, and stores `out_len` words from `out_base`. With
//! ping-pong on, the load of chunk `k + 1` runs while phase `k` computes,
//! and the finish flip hands the results of phase `k` to the DMA side.

use thiserror::Error;

use crate::arch::ArchParams;
use crate::bitstream::{bytes_to_words, encode_bitstream, BitstreamError, PeRecord};
use crate::host::{Action, HostCommand, RTT_WRITE_OPCODE};
use crate::pe::{ConfigWord, DstSel, Opcode, SrcSel};

/// RTT opcodes programmed at setup for the controller PE.
const OP_LOAD_CHUNK: u8 = 0x12;
const OP_STORE_CHUNK: u8 = 0x14;
const OP_PINGPONG_ON: u8 = 0x18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    Host,
    Cpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub chunk: u32,
    pub out_base: u32,
    pub out_len: u32,
    pub phases: u32,
    pub pingpong: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    /// Kernel bitstream followed, for the controller driver, by the
    /// controller PE's program.
    pub config_store: Vec<u8>,
    pub script: Vec<HostCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error("the architecture has no controller PE")]
    NoCpe,
    #[error("{phases} phases need {words} controller words, capacity is {capacity}")]
    CpeCapacity { phases: u32, words: usize, capacity: usize },
    #[error("phase index {0} does not fit the trigger encoding")]
    TooManyPhases(u32),
}

fn cmd(action: Action, args: &[u32]) -> HostCommand {
    HostCommand::action(action, args)
}

/// Command sequence as (action, phase index) pairs, shared by both drivers.
fn sequence(plan: &PhasePlan) -> Vec<(Action, u32)> {
    let mut seq = Vec::new();
    if plan.pingpong {
        seq.push((Action::SetPingpong, 0));
        seq.push((Action::LoadData, 0));
        seq.push((Action::Toggle, 0));
        for k in 0..plan.phases {
            seq.push((Action::Launch, k));
            if k + 1 < plan.phases {
                seq.push((Action::LoadData, k + 1));
            }
            seq.push((Action::StoreResults, k));
        }
    } else {
        for k in 0..plan.phases {
            seq.push((Action::LoadData, k));
            seq.push((Action::Launch, k));
            seq.push((Action::StoreResults, k));
        }
    }
    seq
}

pub fn build(kernel: &[u8], plan: &PhasePlan, driver: Driver, params: &ArchParams) -> Result<Workload, WorkloadError> {
    let kernel_words = bytes_to_words(kernel)?.len() as u32;
    let mask = 1;
    let seq = sequence(plan);
    match driver {
        Driver::Host => {
            let mut script = vec![cmd(Action::LoadConfig, &[mask, 0, 0, kernel_words])];
            for (action, k) in seq {
                script.push(match action {
                    Action::LoadData => cmd(action, &[mask, k * plan.chunk, 0, plan.chunk]),
                    Action::StoreResults => cmd(action, &[mask, 0, plan.out_base, plan.out_len]),
                    Action::SetPingpong => cmd(action, &[mask, 0, 0, 0, 1]),
                    _ => cmd(action, &[mask]),
                });
            }
            Ok(Workload { config_store: kernel.to_vec(), script })
        }
        Driver::Cpe => {
            let at = params.cpe().ok_or(WorkloadError::NoCpe)?;
            let capacity = params.context_capacity();
            if seq.len() > capacity {
                return Err(WorkloadError::CpeCapacity { phases: plan.phases, words: seq.len(), capacity });
            }
            let mut words = Vec::with_capacity(seq.len());
            for (action, k) in seq {
                let opcode = match action {
                    Action::LoadData => OP_LOAD_CHUNK,
                    Action::StoreResults => OP_STORE_CHUNK,
                    Action::SetPingpong => OP_PINGPONG_ON,
                    other => other.code(),
                };
                let trigger = u32::from(opcode) | k << 8;
                let imm = u16::try_from(trigger).ok().filter(|&v| v < 0x8000).ok_or(WorkloadError::TooManyPhases(k))?;
                words.push(
                    ConfigWord::new(Opcode::Route)
                        .with_src(SrcSel::Imm, SrcSel::None)
                        .with_dst(DstSel::Rtt)
                        .with_imm(imm),
                );
            }
            let program = encode_bitstream(&[PeRecord { row: at.row as u8, col: at.col as u8, words }]);
            let program_words = bytes_to_words(&program)?.len() as u32;
            let rtt = |op: u8, action: Action, fields: &[u32]| {
                let mut args = vec![u32::from(op), u32::from(action.code()), mask];
                args.extend_from_slice(fields);
                HostCommand::new(RTT_WRITE_OPCODE, &args)
            };
            let mut script = vec![
                rtt(OP_LOAD_CHUNK, Action::LoadData, &[0, 0, plan.chunk]),
                rtt(OP_STORE_CHUNK, Action::StoreResults, &[0, plan.out_base, plan.out_len]),
            ];
            if plan.pingpong {
                script.push(rtt(OP_PINGPONG_ON, Action::SetPingpong, &[0, 0, 0, 1]));
            }
            script.push(cmd(Action::LoadConfig, &[mask, 0, 0, kernel_words]));
            script.push(cmd(Action::CpeConfig, &[mask, kernel_words, 0, program_words]));
            let mut config_store = kernel.to_vec();
            config_store.extend_from_slice(&program);
            Ok(Workload { config_store, script })
        }
    }
}

/// Host commands the controller driver needs regardless of phase count.
pub fn cpe_setup_commands(pingpong: bool) -> usize {
    4 + usize::from(pingpong)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(phases: u32, pingpong: bool) -> PhasePlan {
        PhasePlan { chunk: 8, out_base: 8, out_len: 8, phases, pingpong }
    }

    #[test]
    fn host_script_grows_three_commands_per_phase() {
        let p = ArchParams::with_grid(4, 4, false);
        let kernel = encode_bitstream(&[]);
        let n = |k, pp| build(&kernel, &plan(k, pp), Driver::Host, &p).unwrap().script.len();
        assert_eq!(n(1, false), 4);
        assert_eq!(n(4, false), 13);
        assert_eq!(n(4, true) - n(3, true), 3);
    }

    #[test]
    fn controller_script_is_setup_only() {
        let p = ArchParams::with_grid(4, 4, true);
        let kernel = encode_bitstream(&[]);
        for k in 1..=4 {
            let w = build(&kernel, &plan(k, false), Driver::Cpe, &p).unwrap();
            assert_eq!(w.script.len(), cpe_setup_commands(false));
        }
        let e = build(&kernel, &plan(6, false), Driver::Cpe, &p).unwrap_err();
        assert!(matches!(e, WorkloadError::CpeCapacity { words: 18, capacity: 16, .. }));
        let none = ArchParams::with_grid(4, 4, false);
        assert_eq!(build(&kernel, &plan(1, false), Driver::Cpe, &none), Err(WorkloadError::NoCpe));
    }
}
