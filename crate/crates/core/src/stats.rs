//! Simulation counters and their CSV form.
//!
//! The CSV has exactly one header row and one data row. Columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | total_cycles | system cycles simulated |
//! | host_commands | script lines issued by the host |
//! | launches | array launches started, all RPUs |
//! | cpe_actions | RTT actions triggered by controller PEs |
//! | bank_conflicts | Σ over cycles and banks of (requesters − 1) |
//! | dma_stall_cycles | DMA cycles lost to a bank taken by the array |
//! | array_stall_cycles | running cycles frozen by a lost arbitration or ring wait |
//! | pingpong_toggles | ping-pong half flips |
//! | pingpong_collisions | cycles where DMA and a granted array access hit the same half |
//! | pe_active_cycles | Σ over PEs of cycles executing a non-NOP |
//! | pe_idle_cycles | Σ over PEs of the remaining cycles |
//! | utilization | active / (active + idle), 6 decimals |
//! | total_grants | granted shared-memory accesses, ring port included |
//! | ring_grants | grants to the ring port |
//! | grants_per_lsu | per LSU (row-major), summed over RPUs, `;`-separated |
//! | sreg_conflicts | shared-register writes lost to a same-cycle tie |

use serde::Serialize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub total_cycles: u64,
    pub host_commands: u64,
    pub launches: u64,
    pub cpe_actions: u64,
    pub bank_conflicts: u64,
    pub dma_stall_cycles: u64,
    pub array_stall_cycles: u64,
    pub pingpong_toggles: u64,
    pub pingpong_collisions: u64,
    /// `[rpu][pe]`, PEs row-major.
    pub pe_active: Vec<Vec<u64>>,
    pub pe_idle: Vec<Vec<u64>>,
    pub ring_grants: u64,
    pub grants_per_lsu: Vec<u64>,
    pub requests_per_lsu: Vec<u64>,
    pub sreg_conflicts: u64,
}

pub const CSV_HEADER: &str = "total_cycles,host_commands,launches,cpe_actions,bank_conflicts,\
dma_stall_cycles,array_stall_cycles,pingpong_toggles,pingpong_collisions,pe_active_cycles,\
pe_idle_cycles,utilization,total_grants,ring_grants,grants_per_lsu,sreg_conflicts";

impl SimStats {
    pub fn active_sum(&self) -> u64 {
        self.pe_active.iter().flatten().sum()
    }

    pub fn idle_sum(&self) -> u64 {
        self.pe_idle.iter().flatten().sum()
    }

    pub fn total_grants(&self) -> u64 {
        self.grants_per_lsu.iter().sum::<u64>() + self.ring_grants
    }

    pub fn utilization(&self) -> f64 {
        let all = self.active_sum() + self.idle_sum();
        if all == 0 {
            0.0
        } else {
            self.active_sum() as f64 / all as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let grants: Vec<String> = self.grants_per_lsu.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{}",
            self.total_cycles,
            self.host_commands,
            self.launches,
            self.cpe_actions,
            self.bank_conflicts,
            self.dma_stall_cycles,
            self.array_stall_cycles,
            self.pingpong_toggles,
            self.pingpong_collisions,
            self.active_sum(),
            self.idle_sum(),
            self.utilization(),
            self.total_grants(),
            self.ring_grants,
            grants.join(";"),
            self.sreg_conflicts,
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }
}
