//! Toolkit for the WindMill coarse-grained reconfigurable array: architecture
//! description, cycle-level simulation of PEs, interconnect, shared memory and
//! host protocol, plus a static dataflow mapper.

pub mod arch;
pub mod bitstream;
pub mod dfg;
pub mod diag;
pub mod host;
pub mod interconnect;
pub mod mapper;
pub mod memory;
pub mod pe;
pub mod plugins;
pub mod stats;
pub mod system;
pub mod workload;
