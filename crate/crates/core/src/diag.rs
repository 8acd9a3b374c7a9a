//! Plugin/service elaboration.
//!
//! A build is a set of plugins. Each plugin declares the services it
//! provides and requires, and contributes to three phases that run as
//! barriers: every plugin's `on_config` finishes before any `on_early`
//! starts, and likewise for `on_late`. Within a phase plugins run in
//! registration order.
//!
//! * config: providers publish service payloads.
//! * early: plugins look up services and emit architecture components.
//! * late: plugins may look up services again and emit the remaining
//!   components once everything from early exists.
//!
//! Nothing is inferred: a required service without a registered provider
//! aborts elaboration, and a detached plugin leaves no component or
//! service behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchParams, Coord, PeType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServiceKind {
    SignalBundle,
    ParameterSet,
    Callback,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceKey {
    pub name: String,
    pub kind: ServiceKind,
}

impl ServiceKey {
    pub fn new(name: &str, kind: ServiceKind) -> Self {
        ServiceKey { name: name.to_string(), kind }
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Params(BTreeMap<String, i64>),
    Signals(Vec<String>),
    Callback(String),
}

impl Payload {
    pub fn param(&self, name: &str) -> Option<i64> {
        match self {
            Payload::Params(m) => m.get(name).copied(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Pe { coord: Coord, pe_type: PeType, context_words: usize, links: usize },
    SharedMemory { banks: usize, depth: usize, width: u32, requesters: usize },
    HostBridge { rpu_count: usize, rtt_entries: usize },
}

/// A built component tagged with the plugin that emitted it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub component: Component,
    pub origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Config,
    Early,
    Late,
    Sealed,
}

/// Ordered record of a callback starting or finishing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub seq: u64,
    pub phase: Phase,
    pub plugin: String,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub caller: String,
    pub service: String,
    pub provider: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub key: ServiceKey,
    pub provider: String,
    pub payload: Option<Payload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElabError {
    #[error("plugin `{0}` is already registered")]
    DuplicatePlugin(String),
    #[error("plugins can only be registered before elaboration starts")]
    RegistrationClosed,
    #[error("service `{service}` is provided by both `{first}` and `{second}`")]
    DuplicateProvider { service: String, first: String, second: String },
    #[error("plugin `{plugin}` both provides and requires `{service}`")]
    SelfDependency { plugin: String, service: String },
    #[error("missing services: {}", .unmet.iter().map(|(p, k)| format!("{p} requires {k}")).collect::<Vec<_>>().join(", "))]
    MissingService { unmet: Vec<(String, String)> },
    #[error("`{plugin}` attempted `{action}` during phase {phase:?}")]
    PhaseViolation { plugin: String, action: &'static str, phase: Phase },
    #[error("`{plugin}` used `{service}` without declaring it")]
    UndeclaredService { plugin: String, service: String },
    #[error("`{plugin}` declared `{service}` but never published a payload")]
    UnpublishedService { plugin: String, service: String },
    #[error("{0}")]
    Plugin(String),
}

/// A unit of pluggable elaboration. Callbacks must be deterministic
/// functions of the context they are handed.
pub trait Plugin {
    fn name(&self) -> &str;
    fn provides(&self) -> Vec<ServiceKey> {
        Vec::new()
    }
    fn requires(&self) -> Vec<ServiceKey> {
        Vec::new()
    }
    fn on_config(&self, _ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        Ok(())
    }
    fn on_early(&self, _ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        Ok(())
    }
    fn on_late(&self, _ctx: &mut PhaseCtx<'_>) -> Result<(), ElabError> {
        Ok(())
    }
}

pub struct BuildContext {
    params: ArchParams,
    plugins: Vec<Box<dyn Plugin>>,
    phase: Phase,
    services: BTreeMap<String, ServiceEntry>,
    artifacts: Vec<Artifact>,
    edges: BTreeSet<DependencyEdge>,
    log: Vec<PhaseEvent>,
}

impl BuildContext {
    pub fn new(params: ArchParams) -> Self {
        BuildContext {
            params,
            plugins: Vec::new(),
            phase: Phase::Config,
            services: BTreeMap::new(),
            artifacts: Vec::new(),
            edges: BTreeSet::new(),
            log: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn plugin_names(&self) -> Vec<String> {
        self.plugins.iter().map(|p| p.name().to_string()).collect()
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    /// Appends a plugin. No callback runs until [`BuildContext::seal`].
    pub fn register_plugin(&mut self, plugin: Box<dyn Plugin>) -> Result<(), ElabError> {
        if self.phase != Phase::Config || !self.log.is_empty() {
            return Err(ElabError::RegistrationClosed);
        }
        if self.plugins.iter().any(|p| p.name() == plugin.name()) {
            return Err(ElabError::DuplicatePlugin(plugin.name().to_string()));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    fn check_declarations(&mut self) -> Result<(), ElabError> {
        for p in &self.plugins {
            let requires = p.requires();
            for key in p.provides() {
                if requires.contains(&key) {
                    return Err(ElabError::SelfDependency { plugin: p.name().to_string(), service: key.name });
                }
                if let Some(prev) = self.services.get(&key.name) {
                    return Err(ElabError::DuplicateProvider {
                        service: key.name,
                        first: prev.provider.clone(),
                        second: p.name().to_string(),
                    });
                }
                self.services
                    .insert(key.name.clone(), ServiceEntry { key, provider: p.name().to_string(), payload: None });
            }
        }
        let mut unmet = Vec::new();
        for p in &self.plugins {
            for key in p.requires() {
                if !self.services.contains_key(&key.name) {
                    unmet.push((p.name().to_string(), key.name));
                }
            }
        }
        if unmet.is_empty() {
            Ok(())
        } else {
            Err(ElabError::MissingService { unmet })
        }
    }

    fn run_phase(&mut self, phase: Phase) -> Result<(), ElabError> {
        self.phase = phase;
        let plugins = std::mem::take(&mut self.plugins);
        let mut result = Ok(());
        for p in &plugins {
            let seq = self.log.len() as u64;
            self.log.push(PhaseEvent { seq, phase, plugin: p.name().to_string(), finished: false });
            let mut ctx = PhaseCtx { build: self, plugin: p.as_ref() };
            result = match phase {
                Phase::Config => p.on_config(&mut ctx),
                Phase::Early => p.on_early(&mut ctx),
                Phase::Late => p.on_late(&mut ctx),
                Phase::Sealed => Ok(()),
            };
            if result.is_err() {
                break;
            }
            let seq = self.log.len() as u64;
            self.log.push(PhaseEvent { seq, phase, plugin: p.name().to_string(), finished: true });
        }
        self.plugins = plugins;
        result
    }

    /// Runs config, early and late for every plugin and freezes the result.
    pub fn seal(mut self) -> Result<SealedBuild, ElabError> {
        self.check_declarations()?;
        self.run_phase(Phase::Config)?;
        if let Some(e) = self.services.values().find(|e| e.payload.is_none()) {
            return Err(ElabError::UnpublishedService { plugin: e.provider.clone(), service: e.key.name.clone() });
        }
        self.run_phase(Phase::Early)?;
        self.run_phase(Phase::Late)?;
        self.phase = Phase::Sealed;
        Ok(SealedBuild {
            params: self.params,
            plugins: self.plugins.iter().map(|p| p.name().to_string()).collect(),
            services: self
                .services
                .into_values()
                .map(|e| SealedService { key: e.key, provider: e.provider, payload: e.payload.unwrap() })
                .collect(),
            artifacts: self.artifacts,
            edges: self.edges.into_iter().collect(),
            log: self.log,
        })
    }
}

/// What a plugin callback sees of the build.
pub struct PhaseCtx<'a> {
    build: &'a mut BuildContext,
    plugin: &'a dyn Plugin,
}

impl PhaseCtx<'_> {
    pub fn params(&self) -> &ArchParams {
        &self.build.params
    }

    pub fn phase(&self) -> Phase {
        self.build.phase
    }

    fn violation(&self, action: &'static str) -> ElabError {
        ElabError::PhaseViolation { plugin: self.plugin.name().to_string(), action, phase: self.build.phase }
    }

    /// Publishes the payload of a declared service. Config phase only.
    pub fn provide(&mut self, key: &ServiceKey, payload: Payload) -> Result<(), ElabError> {
        if self.build.phase != Phase::Config {
            return Err(self.violation("provide"));
        }
        let me = self.plugin.name();
        match self.build.services.get_mut(&key.name) {
            Some(e) if e.provider == me => {
                e.payload = Some(payload);
                Ok(())
            }
            _ => Err(ElabError::UndeclaredService { plugin: me.to_string(), service: key.name.clone() }),
        }
    }

    /// Looks up a required service and records the caller → provider edge.
    pub fn get_service(&mut self, key: &ServiceKey) -> Result<Payload, ElabError> {
        if !matches!(self.build.phase, Phase::Early | Phase::Late) {
            return Err(self.violation("get_service"));
        }
        let me = self.plugin.name().to_string();
        let Some(entry) = self.build.services.get(&key.name) else {
            return Err(ElabError::MissingService { unmet: vec![(me, key.name.clone())] });
        };
        if !self.plugin.requires().contains(key) {
            return Err(ElabError::UndeclaredService { plugin: me, service: key.name.clone() });
        }
        let payload = entry.payload.clone().expect("payloads are checked after config");
        self.build.edges.insert(DependencyEdge {
            caller: me,
            service: key.name.clone(),
            provider: entry.provider.clone(),
        });
        Ok(payload)
    }

    /// Adds a component tagged with the calling plugin. Early/late only.
    pub fn emit(&mut self, component: Component) -> Result<(), ElabError> {
        if !matches!(self.build.phase, Phase::Early | Phase::Late) {
            return Err(self.violation("emit"));
        }
        self.build.artifacts.push(Artifact { component, origin: self.plugin.name().to_string() });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedService {
    pub key: ServiceKey,
    pub provider: String,
    pub payload: Payload,
}

/// Immutable result of elaboration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBuild {
    pub params: ArchParams,
    pub plugins: Vec<String>,
    pub services: Vec<SealedService>,
    pub artifacts: Vec<Artifact>,
    pub edges: Vec<DependencyEdge>,
    pub log: Vec<PhaseEvent>,
}

impl SealedBuild {
    pub fn phase(&self) -> Phase {
        Phase::Sealed
    }

    pub fn service(&self, name: &str) -> Option<&SealedService> {
        self.services.iter().find(|s| s.key.name == name)
    }

    pub fn artifacts_from(&self, plugin: &str) -> impl Iterator<Item = &Artifact> {
        let plugin = plugin.to_string();
        self.artifacts.iter().filter(move |a| a.origin == plugin)
    }

    pub fn has_edge(&self, caller: &str, service: &str) -> bool {
        self.edges.iter().any(|e| e.caller == caller && e.service == service)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("build serializes")
    }
}

/// Registers `plugins` in order and elaborates them.
pub fn elaborate(plugins: Vec<Box<dyn Plugin>>, params: ArchParams) -> Result<SealedBuild, ElabError> {
    let mut ctx = BuildContext::new(params);
    for p in plugins {
        ctx.register_plugin(p)?;
    }
    ctx.seal()
}
