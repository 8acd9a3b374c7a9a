//! The WindMill plugin set.

use std::collections::BTreeMap;

use crate::arch::{ArchParams, ExecMode, PeType};
use crate::diag::{Component, ElabError, Payload, PhaseCtx, Plugin, ServiceKey, ServiceKind};
use crate::host::RTT_CAPACITY;
use crate::interconnect;

pub const HOST_BRIDGE: &str = "HostBridge";
pub const SHARED_MEMORY: &str = "SharedMemory";
pub const INTERCONNECT: &str = "Interconnect";
pub const CONTEXT_MEMORY: &str = "ContextMemory";
pub const SHARED_REGISTERS: &str = "SharedRegisters";
pub const GPE: &str = "Gpe";
pub const LSU: &str = "Lsu";
pub const CPE: &str = "Cpe";

pub fn host_bridge_service() -> ServiceKey {
    ServiceKey::new("HostBridgeService", ServiceKind::SignalBundle)
}
pub fn rtt_service() -> ServiceKey {
    ServiceKey::new("RttService", ServiceKind::ParameterSet)
}
/// Sink of the array's finish signal and source of launch timing.
pub fn launch_control_service() -> ServiceKey {
    ServiceKey::new("LaunchControlService", ServiceKind::Callback)
}
pub fn shared_memory_service() -> ServiceKey {
    ServiceKey::new("SharedMemoryService", ServiceKind::ParameterSet)
}
pub fn interconnect_service() -> ServiceKey {
    ServiceKey::new("InterconnectService", ServiceKind::SignalBundle)
}
pub fn context_service() -> ServiceKey {
    ServiceKey::new("ContextMemoryService", ServiceKind::ParameterSet)
}
pub fn shared_reg_service() -> ServiceKey {
    ServiceKey::new("SharedRegisterService", ServiceKind::ParameterSet)
}

fn params_payload(pairs: &[(&str, i64)]) -> Payload {
    Payload::Params(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>())
}

/// Host bridge with the register transformation table. When no controller
/// PE is part of the build it also provides launch control itself, so
/// every phase is sequenced by host commands.
pub struct HostBridgePlugin {
    pub host_launch_control: bool,
}

impl Plugin for HostBridgePlugin {
    fn name(&self) -> &str {
        HOST_BRIDGE
    }
    fn provides(&self) -> Vec<ServiceKey> {
        let mut v = vec![host_bridge_service(), rtt_service()];
        if self.host_launch_control {
            v.push(launch_control_service());
        }
        v
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let rpus = ctx.params().rpu_count as i64;
        ctx.provide(&host_bridge_service(), Payload::Signals(vec!["cmd".into(), "status".into()]))?;
        ctx.provide(&rtt_service(), params_payload(&[("entries", RTT_CAPACITY as i64), ("rpus", rpus)]))?;
        if self.host_launch_control {
            ctx.provide(&launch_control_service(), Payload::Callback("host".into()))?;
        }
        Ok(())
    }
    fn on_early(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let rpu_count = ctx.params().rpu_count;
        ctx.emit(Component::HostBridge { rpu_count, rtt_entries: RTT_CAPACITY })
    }
}

pub struct SharedMemoryPlugin;

impl Plugin for SharedMemoryPlugin {
    fn name(&self) -> &str {
        SHARED_MEMORY
    }
    fn provides(&self) -> Vec<ServiceKey> {
        vec![shared_memory_service()]
    }
    fn requires(&self) -> Vec<ServiceKey> {
        vec![launch_control_service()]
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let p = ctx.params();
        let payload = params_payload(&[
            ("banks", p.sm_banks as i64),
            ("depth", p.bank_depth as i64),
            ("width", i64::from(p.bank_width)),
        ]);
        ctx.provide(&shared_memory_service(), payload)
    }
    fn on_early(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        // the ping-pong toggle is wired to whoever owns launch timing
        ctx.get_service(&launch_control_service())?;
        let p = ctx.params();
        let component = Component::SharedMemory {
            banks: p.sm_banks,
            depth: p.bank_depth,
            width: p.bank_width,
            requesters: p.lsus().len(),
        };
        ctx.emit(component)
    }
}

pub struct InterconnectPlugin;

impl Plugin for InterconnectPlugin {
    fn name(&self) -> &str {
        INTERCONNECT
    }
    fn provides(&self) -> Vec<ServiceKey> {
        vec![interconnect_service()]
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let p = ctx.params();
        let links = interconnect::directed_links(p.topology, p.rows, p.cols);
        let payload = Payload::Signals(vec![p.topology.keyword().to_string(), format!("links={links}")]);
        ctx.provide(&interconnect_service(), payload)
    }
}

pub struct ContextMemoryPlugin;

impl Plugin for ContextMemoryPlugin {
    fn name(&self) -> &str {
        CONTEXT_MEMORY
    }
    fn provides(&self) -> Vec<ServiceKey> {
        vec![context_service()]
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let p = ctx.params();
        let payload = params_payload(&[
            ("capacity", p.context_capacity() as i64),
            ("scmd", i64::from(p.exec_mode == ExecMode::Scmd)),
        ]);
        ctx.provide(&context_service(), payload)
    }
}

pub struct SharedRegistersPlugin;

impl Plugin for SharedRegistersPlugin {
    fn name(&self) -> &str {
        SHARED_REGISTERS
    }
    fn provides(&self) -> Vec<ServiceKey> {
        vec![shared_reg_service()]
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        let p = ctx.params();
        let instances = interconnect::scope_instances(p.shared_reg_mode, p.rows, p.cols);
        let payload = params_payload(&[("instances", instances as i64), ("count", p.shared_reg_count as i64)]);
        ctx.provide(&shared_reg_service(), payload)
    }
}

fn emit_cells(ctx: &mut PhaseCtx<'_>, types: &[PeType]) -> Result<(), ElabError> {
    let capacity = ctx
        .get_service(&context_service())?
        .param("capacity")
        .ok_or_else(|| ElabError::Plugin("context capacity missing".into()))? as usize;
    ctx.get_service(&interconnect_service())?;
    let p = ctx.params().clone();
    for at in p.coords() {
        if types.contains(&p.pe_type(at)) {
            ctx.emit(Component::Pe {
                coord: at,
                pe_type: p.pe_type(at),
                context_words: capacity,
                links: interconnect::neighbors(p.topology, at, p.rows, p.cols).len(),
            })?;
        }
    }
    Ok(())
}

/// General-purpose PEs. With `claims_cpe_cells` the controller cell is
/// built as a plain GPE, which is how the controller is detached.
pub struct GpePlugin {
    pub claims_cpe_cells: bool,
}

impl Plugin for GpePlugin {
    fn name(&self) -> &str {
        GPE
    }
    fn requires(&self) -> Vec<ServiceKey> {
        vec![interconnect_service(), context_service(), shared_reg_service()]
    }
    fn on_early(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        ctx.get_service(&shared_reg_service())?;
        if self.claims_cpe_cells {
            // cells keep their position but lose the controller role
            let p = ctx.params().clone();
            let capacity = ctx.get_service(&context_service())?.param("capacity").unwrap_or(0) as usize;
            ctx.get_service(&interconnect_service())?;
            for at in p.coords() {
                let t = p.pe_type(at);
                if t == PeType::Gpe || t == PeType::Cpe {
                    ctx.emit(Component::Pe {
                        coord: at,
                        pe_type: PeType::Gpe,
                        context_words: capacity,
                        links: interconnect::neighbors(p.topology, at, p.rows, p.cols).len(),
                    })?;
                }
            }
            Ok(())
        } else {
            emit_cells(ctx, &[PeType::Gpe])
        }
    }
}

pub struct LsuPlugin;

impl Plugin for LsuPlugin {
    fn name(&self) -> &str {
        LSU
    }
    fn requires(&self) -> Vec<ServiceKey> {
        vec![interconnect_service(), context_service(), shared_memory_service()]
    }
    fn on_early(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        ctx.get_service(&shared_memory_service())?;
        emit_cells(ctx, &[PeType::Lsu])
    }
}

/// Controller PE: a GPE with access to the RTT, owning launch timing.
pub struct CpePlugin;

impl Plugin for CpePlugin {
    fn name(&self) -> &str {
        CPE
    }
    fn provides(&self) -> Vec<ServiceKey> {
        vec![launch_control_service()]
    }
    fn requires(&self) -> Vec<ServiceKey> {
        vec![interconnect_service(), context_service(), rtt_service()]
    }
    fn on_config(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        ctx.provide(&launch_control_service(), Payload::Callback("cpe".into()))
    }
    fn on_early(&self, ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        ctx.get_service(&rtt_service())?;
        emit_cells(ctx, &[PeType::Cpe])
    }
}

/// The plugin set implied by `params`.
pub fn standard_plugins(params: &ArchParams) -> Vec<Box<dyn Plugin>> {
    standard_plugins_detached(params, &[])
}

/// The plugin set with the named plugins left out. Detaching the CPE
/// hands launch control to the host bridge and its cell to the GPE plugin.
pub fn standard_plugins_detached(params: &ArchParams, detached: &[&str]) -> Vec<Box<dyn Plugin>> {
    let has_cpe = params.cpe().is_some() && !detached.contains(&CPE);
    let all: Vec<Box<dyn Plugin>> = vec![
        Box::new(HostBridgePlugin { host_launch_control: !has_cpe }),
        Box::new(InterconnectPlugin),
        Box::new(ContextMemoryPlugin),
        Box::new(SharedRegistersPlugin),
        Box::new(SharedMemoryPlugin),
        Box::new(GpePlugin { claims_cpe_cells: !has_cpe }),
        Box::new(LsuPlugin),
        Box::new(CpePlugin),
    ];
    all.into_iter().filter(|p| !detached.contains(&p.name())).filter(|p| p.name() != CPE || has_cpe).collect()
}
