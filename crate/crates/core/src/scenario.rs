//! Scenario files: the cloud, the catalog, scripted events and run settings,
//! plus the runs built on them.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{run_rolling_baseline, RollingBaselineConfig, RollingBaselineResult};
use crate::catalog::{ComponentDescription, ResourceUpgradeCatalog};
use crate::cluster::{ClusterState, ConfigDependency, Host, InfraResource, TenantSla, Vm};
use crate::coordinator::{Coordinator, CoordinatorConfig, Phase, UpgradeIterationReport};
use crate::engine::{EventKind, FailureModel, LogRecord, ScenarioEvent, Simulation, Timing};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::planner::Policies;
use crate::types::{Millis, SetId, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub hosts: Vec<Host>,
    #[serde(default)]
    pub resources: Vec<InfraResource>,
    #[serde(default)]
    pub dependencies: Vec<ConfigDependency>,
    pub tenants: Vec<TenantSla>,
    #[serde(default)]
    pub vms: Vec<Vm>,
    #[serde(default)]
    pub catalog: Vec<ComponentDescription>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub failure: FailureModel,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default)]
    pub timing: Timing,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                Error::Parse(inner.to_string())
            } else {
                schema(path, inner.to_string())
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Referential checks over every id the scenario mentions.
    pub fn validate(&self) -> Result<()> {
        let hosts: BTreeSet<&str> = self.hosts.iter().map(|h| h.id.as_str()).collect();
        let mut resources: BTreeSet<&str> = self.resources.iter().map(|r| r.id.as_str()).collect();
        resources.extend(hosts.iter().copied());
        let tenants: BTreeSet<&str> = self.tenants.iter().map(|t| t.id.as_str()).collect();
        for (i, t) in self.tenants.iter().enumerate() {
            if t.min > t.max {
                return Err(schema(format!("tenants[{i}].min"), "exceeds max"));
            }
            if t.scaling_step == 0 {
                return Err(schema(format!("tenants[{i}].scaling_step"), "must be at least 1"));
            }
        }
        for (i, r) in self.resources.iter().enumerate() {
            if let Some(h) = &r.host {
                if !hosts.contains(h.as_str()) {
                    return Err(schema(format!("resources[{i}].host"), format!("unknown host `{h}`")));
                }
            }
        }
        for (i, d) in self.dependencies.iter().enumerate() {
            for (field, id) in [("from", &d.from), ("to", &d.to)] {
                if !resources.contains(id.as_str()) {
                    return Err(schema(format!("dependencies[{i}].{field}"), format!("unknown resource `{id}`")));
                }
            }
        }
        for (i, v) in self.vms.iter().enumerate() {
            let Some(t) = self.tenants.iter().find(|t| t.id == v.tenant) else {
                return Err(schema(format!("vms[{i}].tenant"), format!("unknown tenant `{}`", v.tenant)));
            };
            if !t.groups.contains(&v.group) {
                return Err(schema(format!("vms[{i}].group"), format!("`{}` is not a group of `{}`", v.group, t.id)));
            }
            if let Some(h) = &v.host {
                if !hosts.contains(h.as_str()) {
                    return Err(schema(format!("vms[{i}].host"), format!("unknown host `{h}`")));
                }
            }
        }
        let mut sets: BTreeSet<SetId> = BTreeSet::new();
        let mut added: BTreeSet<&str> = BTreeSet::new();
        for e in &self.events {
            match &e.kind {
                EventKind::UpgradeRequest { request } => sets.extend(request.change_sets.iter().map(|s| s.id.clone())),
                EventKind::HostAddition { host, .. } => {
                    added.insert(host.id.as_str());
                }
                _ => {}
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let bad = |field: &str, msg: String| Err(schema(format!("events[{i}].{field}"), msg));
            match &e.kind {
                EventKind::ScaleOut { tenant } | EventKind::ScaleIn { tenant } if !tenants.contains(tenant.as_str()) => {
                    return bad("tenant", format!("unknown tenant `{tenant}`"));
                }
                EventKind::HostFailure { host } | EventKind::HostRepair { host }
                    if !hosts.contains(host.as_str()) && !added.contains(host.as_str()) =>
                {
                    return bad("host", format!("unknown host `{host}`"));
                }
                EventKind::AdminUndo { set } if !sets.contains(set) => {
                    return bad("set", format!("unknown change set `{set}`"));
                }
                EventKind::HostAddition { host, .. } if hosts.contains(host.id.as_str()) => {
                    return bad("host.id", format!("host `{}` already exists", host.id));
                }
                _ => {}
            }
        }
        self.to_state().placement_violation().map_or(Ok(()), |m| Err(schema("vms", m)))
    }

    pub fn to_state(&self) -> ClusterState {
        ClusterState {
            hosts: self.hosts.iter().map(|h| (h.id.clone(), h.clone())).collect(),
            resources: self.resources.iter().map(|r| (r.id.clone(), r.clone())).collect(),
            dependencies: self.dependencies.clone(),
            vms: self.vms.iter().map(|v| (v.id.clone(), v.clone())).collect(),
            tenants: self.tenants.iter().map(|t| (t.id.clone(), t.clone())).collect(),
            ..Default::default()
        }
    }

    pub fn catalog(&self) -> Result<ResourceUpgradeCatalog> {
        ResourceUpgradeCatalog::from_descriptions(self.catalog.iter().cloned())
    }

    pub fn simulation(&self, seed: Option<u64>) -> Simulation {
        let mut failure = self.failure.clone();
        if let Some(s) = seed {
            failure.seed = s;
        }
        Simulation::new(self.to_state(), self.timing.clone(), failure, self.events.clone())
    }

    pub fn coordinator(&self, seed: Option<u64>, max_sim_time: Option<SimTime>) -> Result<Coordinator> {
        let config = CoordinatorConfig {
            policies: self.policies.clone(),
            max_sim_time,
            ..Default::default()
        };
        Coordinator::new(self.simulation(seed), self.catalog()?, config)
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ScenarioFile::from_json(&text)
}

/// Outcome of a coordinator run over a scenario.
#[derive(Clone, Debug)]
pub struct CoordinatorRun {
    pub reports: Vec<UpgradeIterationReport>,
    pub log: Vec<LogRecord>,
    pub metrics: RunMetrics,
    pub unsuccessful_sets: Vec<SetId>,
    pub final_phase: Phase,
    pub final_state: ClusterState,
    pub reports_jsonl: String,
}

/// Time from the start until the last iteration that changed anything.
fn upgrade_duration(reports: &[UpgradeIterationReport], start: SimTime) -> Millis {
    reports
        .iter()
        .filter(|r| !r.schedules.is_empty() || !r.completed_sets.is_empty())
        .map(|r| r.finished_ms)
        .max()
        .unwrap_or(start)
        - start
}

pub fn run_coordinator(scenario: &ScenarioFile, seed: Option<u64>, max_sim_time: Option<SimTime>) -> Result<CoordinatorRun> {
    let initial = scenario.to_state();
    let mut c = scenario.coordinator(seed, max_sim_time)?;
    c.run()?;
    let duration = upgrade_duration(&c.reports, initial.clock);
    Ok(CoordinatorRun {
        metrics: RunMetrics::collect(&c.sim.log, &initial, duration),
        reports_jsonl: c.reports_jsonl(),
        unsuccessful_sets: c.unsuccessful_sets(),
        final_phase: c.phase,
        final_state: c.sim.state.clone(),
        log: c.sim.log.clone(),
        reports: c.reports,
    })
}

pub fn run_rolling(scenario: &ScenarioFile, cfg: &RollingBaselineConfig) -> Result<RollingBaselineResult> {
    run_rolling_baseline(&scenario.to_state(), &scenario.timing, cfg)
}
