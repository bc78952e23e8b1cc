//! Ready-made scenarios: compute clusters under a hypervisor upgrade with the
//! four-tenant elasticity mix, a storage software replacement, and variants for
//! failures and dynamicity.

use std::collections::BTreeMap;

use crate::catalog::{
    ActionKind, ActionTemplate, Capability, CapabilityRange, ComponentDescription, Placement, PrerequisiteTag,
    StorageRequirement, SubComponent,
};
use crate::cluster::{ConfigDependency, Host, InfraResource, TenantSla, Vm, VmGeneration};
use crate::engine::{EventKind, ScenarioEvent, ScriptedFailure};
use crate::request::{Change, ChangeSet, Selector, UpgradeRequest};
use crate::scenario::ScenarioFile;
use crate::types::{DependencyKind, HostId, HostRole, Millis, ResourceKind, SimTime, Status};

pub const HYPERVISOR: &str = "hypervisor";
pub const STORAGE_PRODUCT: &str = "sds";
pub const OSD: &str = "osd";

fn action(id: &str, kind: ActionKind, on: ResourceKind, ms: Millis, undo: &str) -> ActionTemplate {
    ActionTemplate {
        action_id: id.into(),
        kind,
        target_kind: on,
        duration: ms,
        undo_templates: vec![undo.into()],
        prerequisite: None,
        wrapup: None,
    }
}

/// Deactivate, install and activate scripts plus a remove script.
pub fn component(product: &str, version: &str, kind: ResourceKind, install: Millis) -> ComponentDescription {
    let mut deactivate = action("deactivate", ActionKind::Deactivate, kind, 0, "activate");
    if kind == ResourceKind::Hypervisor {
        deactivate.prerequisite = Some(PrerequisiteTag::EvacuateVms);
    }
    ComponentDescription {
        component_id: format!("{product}-{version}").into(),
        product_id: product.into(),
        version: version.into(),
        kind,
        provided_capabilities: vec![],
        required_capabilities: vec![],
        install_actions: vec![action("install", ActionKind::Install, kind, install, "install")],
        remove_actions: vec![action("remove", ActionKind::Remove, kind, 5_000, "install")],
        activate_actions: vec![action("activate", ActionKind::Activate, kind, 0, "deactivate")],
        deactivate_actions: vec![deactivate],
        install_time_estimate: install,
        remove_time_estimate: 5_000,
        hardware: false,
        storage_requirements: None,
        sub_components: vec![],
    }
}

/// Hypervisor versions 1 and 2; upgrading takes 41 s and needs an empty host.
pub fn hypervisor_catalog() -> Vec<ComponentDescription> {
    vec![
        component(HYPERVISOR, "1", ResourceKind::Hypervisor, 41_000),
        component(HYPERVISOR, "2", ResourceKind::Hypervisor, 41_000),
    ]
}

/// Old storage `vsan` and its replacement `ceph` with incompatible client APIs.
pub fn storage_catalog() -> Vec<ComponentDescription> {
    let api = |v: u32| Capability {
        name: "storage-api".into(),
        version: v,
    };
    let needs = |v: u32| CapabilityRange {
        name: "storage-api".into(),
        min: v,
        max: v,
    };
    let bounds = StorageRequirement {
        min_hosts_for_configuration: 3,
        min_hosts_for_capacity: 3,
    };
    let mut hv1 = component(HYPERVISOR, "1", ResourceKind::Hypervisor, 41_000);
    hv1.required_capabilities = vec![needs(1)];
    let mut hv2 = component(HYPERVISOR, "2", ResourceKind::Hypervisor, 41_000);
    hv2.required_capabilities = vec![needs(2)];
    let mut vsan = component(STORAGE_PRODUCT, "vsan", ResourceKind::VirtualStorage, 30_000);
    vsan.provided_capabilities = vec![api(1)];
    vsan.storage_requirements = Some(bounds);
    let mut ceph = component(STORAGE_PRODUCT, "ceph", ResourceKind::VirtualStorage, 30_000);
    ceph.provided_capabilities = vec![api(2)];
    ceph.storage_requirements = Some(bounds);
    ceph.sub_components = vec![SubComponent {
        product: OSD.into(),
        version: "1".into(),
        placement: Placement::Sponsors(DependencyKind::Aggregation),
    }];
    let osd = component(OSD, "1", ResourceKind::StorageHost, 20_000);
    vec![hv1, hv2, vsan, ceph, osd]
}

/// reference tenants: (id, VMs in scenario a, min, max); s_n = 1, c_n = 120 s,
/// one anti-affinity group each.
pub const REFERENCE_TENANTS: [(&str, u32, u32, u32); 4] = [("T1", 2, 2, 6), ("T2", 3, 3, 7), ("T3", 3, 2, 5), ("T4", 1, 1, 4)];

pub fn reference_tenants() -> Vec<TenantSla> {
    REFERENCE_TENANTS
        .iter()
        .map(|(id, _, min, max)| TenantSla {
            id: (*id).into(),
            min: *min,
            max: *max,
            scaling_step: 1,
            cooldown: 120_000,
            groups: vec![format!("{id}-g").into()],
            last_scaling_at: None,
        })
        .collect()
}

pub fn host_id(i: usize) -> HostId {
    format!("h{i:02}").into()
}

/// Incrementally assembled scenario.
#[derive(Clone, Debug)]
pub struct Builder {
    pub scenario: ScenarioFile,
    seq: BTreeMap<String, u32>,
}

impl Builder {
    pub fn new(name: &str) -> Self {
        Self {
            scenario: ScenarioFile {
                name: name.into(),
                hosts: vec![],
                resources: vec![],
                dependencies: vec![],
                tenants: vec![],
                vms: vec![],
                catalog: vec![],
                events: vec![],
                failure: Default::default(),
                policies: Default::default(),
                timing: Default::default(),
            },
            seq: BTreeMap::new(),
        }
    }

    /// Adds a host; compute hosts get a `hypervisor` resource `hv-<host>`.
    pub fn host(&mut self, id: HostId, roles: &[HostRole], k: u32, k_new: u32) -> &mut Self {
        let host = Host {
            id: id.clone(),
            roles: roles.iter().copied().collect(),
            capacity: k,
            upgraded_capacity: k_new,
            up: true,
            dedicated: false,
        };
        self.scenario.resources.push(InfraResource {
            id: id.clone(),
            kind: host.kind(),
            host: None,
            components: BTreeMap::new(),
            active: true,
        });
        if host.is_compute() {
            let hv = format!("hv-{id}");
            self.scenario.resources.push(InfraResource {
                id: hv.as_str().into(),
                kind: ResourceKind::Hypervisor,
                host: Some(id.clone()),
                components: [(HYPERVISOR.into(), "1".to_string())].into(),
                active: true,
            });
            self.scenario.dependencies.push(ConfigDependency {
                from: hv.as_str().into(),
                to: id.clone(),
                kind: DependencyKind::ContainerContained,
                min_sponsors: None,
            });
        }
        self.scenario.hosts.push(host);
        self
    }

    pub fn compute_hosts(&mut self, from: usize, to: usize, k: u32) -> &mut Self {
        for i in from..=to {
            self.host(host_id(i), &[HostRole::Compute], k, k);
        }
        self
    }

    pub fn tenants(&mut self, tenants: Vec<TenantSla>) -> &mut Self {
        self.scenario.tenants.extend(tenants);
        self
    }

    /// Places one VM of `tenant` on every listed host.
    pub fn vms(&mut self, tenant: &str, hosts: &[usize]) -> &mut Self {
        let group = format!("{tenant}-g");
        for &h in hosts {
            let n = self.seq.entry(tenant.into()).or_default();
            *n += 1;
            self.scenario.vms.push(Vm {
                id: format!("{tenant}-v{n}").into(),
                tenant: tenant.into(),
                group: group.as_str().into(),
                host: Some(host_id(h)),
                generation: VmGeneration::Old,
            });
        }
        self
    }

    pub fn event(&mut self, at: SimTime, kind: EventKind) -> &mut Self {
        self.scenario.events.push(ScenarioEvent { at, kind });
        self
    }

    pub fn build(&self) -> ScenarioFile {
        let mut s = self.scenario.clone();
        s.events.sort_by_key(|e| e.at);
        s
    }
}

pub fn change_set(id: &str, changes: Vec<Change>, max_retry: u32) -> ChangeSet {
    ChangeSet {
        id: id.into(),
        changes,
        max_completion_period: 86_400_000,
        max_retry,
        submitted_at: 0,
        status: Status::New,
        undo_requested: false,
    }
}

/// Every hypervisor currently at version 1 goes to version 2.
pub fn hypervisor_change(id: &str) -> Change {
    Change {
        id: id.into(),
        product: HYPERVISOR.into(),
        targets: Default::default(),
        selector: Some(Selector {
            kind: ResourceKind::Hypervisor,
            product: Some(HYPERVISOR.into()),
            version: Some("1".into()),
        }),
        source_version: Some("1".into()),
        target_version: Some("2".into()),
        undo_version: None,
        undo_threshold: 0,
        status: Status::New,
        complementary: false,
        new_resource: None,
    }
}

pub fn request(id: &str, sets: Vec<ChangeSet>) -> EventKind {
    EventKind::UpgradeRequest {
        request: UpgradeRequest {
            id: id.into(),
            change_sets: sets,
        },
    }
}

fn hypervisor_upgrade(b: &mut Builder) {
    b.event(0, request("r1", vec![change_set("hv-upgrade", vec![hypervisor_change("hv")], 2)]));
    b.scenario.catalog = hypervisor_catalog();
}

/// 10 hosts with K = 4 and the reference tenants (9 VMs on 5 hosts).
pub fn scenario_a() -> ScenarioFile {
    let mut b = Builder::new("scenario-a");
    b.compute_hosts(1, 10, 4).tenants(reference_tenants());
    b.vms("T1", &[1, 2]).vms("T2", &[1, 3, 4]).vms("T3", &[2, 3, 5]).vms("T4", &[4]);
    hypervisor_upgrade(&mut b);
    b.build()
}

/// 10 hosts with K = 4 and the reference tenants grown to 15 VMs on 6 hosts.
pub fn scenario_b() -> ScenarioFile {
    let mut b = Builder::new("scenario-b");
    b.compute_hosts(1, 10, 4).tenants(reference_tenants());
    b.vms("T1", &[1, 2, 3, 4, 6])
        .vms("T2", &[1, 2, 3, 4, 5])
        .vms("T3", &[1, 2, 3, 4])
        .vms("T4", &[5]);
    hypervisor_upgrade(&mut b);
    b.build()
}

/// 10 hosts with K = 6, six of them holding one VM of a distinct tenant.
pub fn sparse_cluster() -> ScenarioFile {
    let mut b = Builder::new("sparse-cluster");
    b.compute_hosts(1, 10, 6);
    let tenants = (1..=6)
        .map(|i| TenantSla {
            id: format!("S{i}").into(),
            min: 1,
            max: 2,
            scaling_step: 1,
            cooldown: 120_000,
            groups: vec![format!("S{i}-g").into()],
            last_scaling_at: None,
        })
        .collect();
    b.tenants(tenants);
    for (i, h) in [1, 3, 4, 6, 8, 9].into_iter().enumerate() {
        b.vms(&format!("S{}", i + 1), &[h]);
    }
    hypervisor_upgrade(&mut b);
    b.build()
}

/// Replacement of the VM-supporting storage: 4 storage-only hosts, 3 hosts
/// with both roles and 8 compute-only hosts; the reference tenants run on the
/// compute hosts, including the shared ones.
pub fn ppu_scenario() -> ScenarioFile {
    let mut b = Builder::new("storage-replacement");
    for i in 1..=4 {
        b.host(host_id(i), &[HostRole::Storage], 0, 0);
    }
    for i in 5..=7 {
        b.host(host_id(i), &[HostRole::Compute, HostRole::Storage], 4, 4);
    }
    b.compute_hosts(8, 15, 4);
    b.scenario.resources.push(InfraResource {
        id: "vstore".into(),
        kind: ResourceKind::VirtualStorage,
        host: None,
        components: [(STORAGE_PRODUCT.into(), "vsan".to_string())].into(),
        active: true,
    });
    for i in 1..=7 {
        b.scenario.dependencies.push(ConfigDependency {
            from: "vstore".into(),
            to: host_id(i),
            kind: DependencyKind::Aggregation,
            min_sponsors: Some(3),
        });
    }
    for i in 5..=15 {
        b.scenario.dependencies.push(ConfigDependency {
            from: format!("hv-{}", host_id(i)).into(),
            to: "vstore".into(),
            kind: DependencyKind::VmSupportingStorageController,
            min_sponsors: None,
        });
    }
    b.tenants(reference_tenants());
    b.vms("T1", &[5, 8]).vms("T2", &[5, 6, 9]).vms("T3", &[6, 7, 8]).vms("T4", &[7]);
    let change = Change {
        id: "storage".into(),
        product: STORAGE_PRODUCT.into(),
        targets: ["vstore".into()].into(),
        selector: None,
        source_version: Some("vsan".into()),
        target_version: Some("ceph".into()),
        undo_version: None,
        undo_threshold: 0,
        status: Status::New,
        complementary: false,
        new_resource: None,
    };
    b.event(0, request("r1", vec![change_set("storage-replacement", vec![change], 2)]));
    b.scenario.catalog = storage_catalog();
    b.build()
}

/// Scenario a with scripted failures of hypervisor installs.
pub fn failure_scenario(failures: Vec<ScriptedFailure>, max_retry: u32) -> ScenarioFile {
    let mut s = scenario_a();
    s.name = "hypervisor-failures".into();
    if let EventKind::UpgradeRequest { request } = &mut s.events[0].kind {
        request.change_sets[0].max_retry = max_retry;
    }
    s.failure.scripted = failures;
    s
}

/// Scenario a with two independent hypervisor change sets: `A` on hosts 1-5
/// with the given undo threshold, `B` on hosts 6-10.
pub fn two_set_scenario(threshold_a: u32, max_retry: u32) -> ScenarioFile {
    let mut s = scenario_a();
    s.name = "two-change-sets".into();
    let set = |id: &str, hosts: std::ops::RangeInclusive<usize>, threshold: u32| {
        let mut c = hypervisor_change(id);
        c.selector = None;
        c.targets = hosts.map(|i| format!("hv-{}", host_id(i)).into()).collect();
        c.undo_threshold = threshold;
        change_set(id, vec![c], max_retry)
    };
    s.events[0].kind = request("r1", vec![set("A", 1..=5, threshold_a), set("B", 6..=10, 0)]);
    s
}

/// Scenario a with scale-out bursts at every tenant's s_n / c_n limit while
/// the upgrade runs.
pub fn dynamicity_scenario() -> ScenarioFile {
    let mut s = scenario_a();
    s.name = "scaling-bursts".into();
    for (tenant, _, _, _) in REFERENCE_TENANTS {
        for k in 0..3u64 {
            s.events.push(ScenarioEvent {
                at: 1_000 + k * 120_000,
                kind: EventKind::ScaleOut { tenant: tenant.into() },
            });
        }
    }
    s.events.sort_by_key(|e| e.at);
    s
}

/// Every tenant at its maximum on hosts without free capacity; scale-ins from
/// `release_at` on, one cooldown apart, free room for the upgrade to proceed.
pub fn suspension_scenario(release_at: SimTime) -> ScenarioFile {
    let mut b = Builder::new("full-cluster");
    b.compute_hosts(1, 6, 4);
    let tenants = (1..=4)
        .map(|i| TenantSla {
            id: format!("F{i}").into(),
            min: 2,
            max: 6,
            scaling_step: 1,
            cooldown: 120_000,
            groups: vec![format!("F{i}-g").into()],
            last_scaling_at: None,
        })
        .collect();
    b.tenants(tenants);
    for i in 1..=4 {
        b.vms(&format!("F{i}"), &[1, 2, 3, 4, 5, 6]);
    }
    hypervisor_upgrade(&mut b);
    for k in 0..3 {
        for i in 1..=4 {
            b.event(release_at + k * 120_000, EventKind::ScaleIn { tenant: format!("F{i}").into() });
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [scenario_a(), scenario_b(), sparse_cluster(), ppu_scenario(), dynamicity_scenario(), suspension_scenario(600_000)] {
            s.validate().unwrap_or_else(|e| panic!("{}: {e}", s.name));
            s.catalog().unwrap();
        }
    }

    #[test]
    fn reference_tenant_counts() {
        let a = scenario_a();
        let counts: Vec<usize> = REFERENCE_TENANTS
            .iter()
            .map(|(t, ..)| a.vms.iter().filter(|v| v.tenant.as_str() == *t).count())
            .collect();
        assert_eq!(counts, vec![2, 3, 3, 1]);
        assert_eq!(scenario_b().vms.len(), 15);
    }
}
