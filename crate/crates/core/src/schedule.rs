//! Runtime upgrade schedules exchanged between the coordinator and the engine.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::ResolvedAction;
use crate::types::{HostId, ResourceId, ResourceKind, SimTime, VmId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum LaneAction {
    Resource(ResolvedAction),
    /// Live migration; the VM is down for the final outage window.
    Migrate { vm: VmId, to: HostId },
    /// Converts a VM to the new configuration after it crossed partitions.
    ConvertVm { vm: VmId },
    /// Brings up a fresh new-version VM in its initial state in place of `vm`.
    RecreateVm { vm: VmId, to: HostId },
}

impl LaneAction {
    pub fn label(&self) -> String {
        match self {
            Self::Resource(a) => format!("{}:{}@{}", a.action_id, a.product, a.version),
            Self::Migrate { to, .. } => format!("migrate->{to}"),
            Self::ConvertVm { .. } => "convert-vm".into(),
            Self::RecreateVm { to, .. } => format!("recreate->{to}"),
        }
    }

    pub fn vm(&self) -> Option<&VmId> {
        match self {
            Self::Migrate { vm, .. } | Self::ConvertVm { vm } | Self::RecreateVm { vm, .. } => Some(vm),
            Self::Resource(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanePurpose {
    Upgrade,
    Recovery,
    Switchover,
    Consolidation,
    VmMigration,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    /// Resource whose actions this lane runs; `None` for pure VM lanes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    /// Kind used when the lane creates its resource.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ResourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<HostId>,
    pub purpose: LanePurpose,
    pub actions: Vec<LaneAction>,
}

impl Lane {
    pub fn vm_lane(purpose: LanePurpose, actions: Vec<LaneAction>) -> Self {
        Self {
            resource: None,
            kind: None,
            host: None,
            purpose,
            actions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeUpgradeSchedule {
    pub id: String,
    pub issued_at: SimTime,
    pub lanes: Vec<Lane>,
}

impl RuntimeUpgradeSchedule {
    pub fn new(id: impl Into<String>, issued_at: SimTime) -> Self {
        Self {
            id: id.into(),
            issued_at,
            lanes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.iter().all(|l| l.actions.is_empty())
    }

    /// A resource appears in at most one lane.
    pub fn lanes_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.lanes
            .iter()
            .filter_map(|l| l.resource.as_ref())
            .all(|r| seen.insert(r.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub schedule: String,
    pub lane: usize,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm: Option<VmId>,
    pub action: String,
    pub success: bool,
    pub start: SimTime,
    pub end: SimTime,
}
