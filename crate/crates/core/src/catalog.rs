//! Resource upgrade catalog: vendor component descriptions and the queries built on them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::error::{Error, Result};
use crate::request::{Change, ChangeSet};
use crate::types::{
    ChangeId, ComponentId, DependencyKind, HostRole, Millis, ProductId, ResourceId, ResourceKind,
    Status, Version,
};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Capability {
    pub name: String,
    pub version: u32,
}

/// Inclusive range of accepted capability versions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CapabilityRange {
    pub name: String,
    pub min: u32,
    pub max: u32,
}

impl CapabilityRange {
    pub fn accepts(&self, version: u32) -> bool {
        (self.min..=self.max).contains(&version)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    Deactivate,
    Activate,
    Install,
    Remove,
    Configure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrerequisiteTag {
    EvacuateVms,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrapupTag {
    ReturnVms,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub action_id: String,
    pub kind: ActionKind,
    pub target_kind: ResourceKind,
    #[serde(with = "crate::types::serde_secs")]
    pub duration: Millis,
    pub undo_templates: Vec<String>,
    #[serde(default)]
    pub prerequisite: Option<PrerequisiteTag>,
    #[serde(default)]
    pub wrapup: Option<WrapupTag>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageRequirement {
    pub min_hosts_for_configuration: u32,
    pub min_hosts_for_capacity: u32,
}

impl StorageRequirement {
    /// Host count needed to satisfy both the configuration and the data of one storage.
    pub fn bound(&self) -> u32 {
        self.min_hosts_for_configuration
            .max(self.min_hosts_for_capacity)
    }
}

/// Where a part of a compound product has to be deployed, relative to the resource
/// the product itself is installed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "on", content = "via")]
pub enum Placement {
    Sponsors(DependencyKind),
    Dependents(DependencyKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubComponent {
    pub product: ProductId,
    pub version: Version,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDescription {
    pub component_id: ComponentId,
    pub product_id: ProductId,
    pub version: Version,
    pub kind: ResourceKind,
    #[serde(default)]
    pub provided_capabilities: Vec<Capability>,
    #[serde(default)]
    pub required_capabilities: Vec<CapabilityRange>,
    #[serde(default)]
    pub install_actions: Vec<ActionTemplate>,
    #[serde(default)]
    pub remove_actions: Vec<ActionTemplate>,
    #[serde(default)]
    pub activate_actions: Vec<ActionTemplate>,
    #[serde(default)]
    pub deactivate_actions: Vec<ActionTemplate>,
    #[serde(with = "crate::types::serde_secs")]
    pub install_time_estimate: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub remove_time_estimate: Millis,
    #[serde(default)]
    pub hardware: bool,
    #[serde(default)]
    pub storage_requirements: Option<StorageRequirement>,
    #[serde(default)]
    pub sub_components: Vec<SubComponent>,
}

impl ComponentDescription {
    fn all_actions(&self) -> impl Iterator<Item = &ActionTemplate> {
        self.install_actions
            .iter()
            .chain(&self.remove_actions)
            .chain(&self.activate_actions)
            .chain(&self.deactivate_actions)
    }

    fn find_action(&self, id: &str) -> Option<&ActionTemplate> {
        self.all_actions().find(|a| a.action_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidDescription {
            id: self.component_id.to_string(),
            reason: reason.to_owned(),
        };
        if self.install_time_estimate == 0 {
            return Err(invalid("install-time-estimate must be > 0"));
        }
        if self.install_actions.is_empty() {
            return Err(invalid("install-actions must not be empty"));
        }
        if let Some(a) = self.all_actions().find(|a| a.undo_templates.is_empty()) {
            return Err(invalid(&format!(
                "action `{}` has an empty undo-template list",
                a.action_id
            )));
        }
        if self.provided_capabilities.iter().any(|c| c.name.is_empty())
            || self.required_capabilities.iter().any(|c| c.name.is_empty())
        {
            return Err(invalid("capability names must be nonempty"));
        }
        if let Some(c) = self.required_capabilities.iter().find(|c| c.min > c.max) {
            return Err(invalid(&format!("capability range `{}` is empty", c.name)));
        }
        Ok(())
    }
}

/// A resolved, symbolic upgrade action bound to one product version.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedAction {
    pub action_id: String,
    pub kind: ActionKind,
    pub product: ProductId,
    pub version: Version,
    #[serde(with = "crate::types::serde_secs")]
    pub duration: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prerequisite: Option<PrerequisiteTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrapup: Option<WrapupTag>,
    /// Undo actions of this action, in execution order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undo: Vec<ResolvedAction>,
}

impl ResolvedAction {
    fn from_template(t: &ActionTemplate, d: &ComponentDescription) -> Self {
        Self {
            action_id: t.action_id.clone(),
            kind: t.kind,
            product: d.product_id.clone(),
            version: d.version.clone(),
            duration: t.duration,
            prerequisite: t.prerequisite.filter(|p| *p != PrerequisiteTag::None),
            wrapup: t.wrapup.filter(|w| *w != WrapupTag::None),
            undo: Vec::new(),
        }
    }

    /// Applies the action to a symbolic (components, active) state.
    pub fn apply(&self, components: &mut BTreeMap<ProductId, Version>, active: &mut bool) {
        match self.kind {
            ActionKind::Deactivate => *active = false,
            ActionKind::Activate => *active = true,
            ActionKind::Install => {
                components.insert(self.product.clone(), self.version.clone());
            }
            ActionKind::Remove => {
                components.remove(&self.product);
            }
            ActionKind::Configure => {}
        }
    }

    pub fn undo_duration(&self) -> Millis {
        self.undo.iter().map(|a| a.duration).sum()
    }
}

/// One product transition on one resource.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentChange {
    pub product: ProductId,
    pub from: Option<Version>,
    pub to: Option<Version>,
    /// Version the undo operation returns to; `None` means the component is absent.
    pub undo_to: Option<Version>,
}

/// Ordered upgrade actions of one change plus its matching undo operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpgradeOperation {
    pub actions: Vec<ResolvedAction>,
    pub undo: Vec<ResolvedAction>,
}

impl UpgradeOperation {
    pub fn total_duration(&self) -> Millis {
        self.actions.iter().map(|a| a.duration).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceUpgradeCatalog {
    descriptions: BTreeMap<ComponentId, ComponentDescription>,
    #[serde(skip)]
    by_version: BTreeMap<(ProductId, Version), ComponentId>,
}

impl ResourceUpgradeCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_descriptions(
        descs: impl IntoIterator<Item = ComponentDescription>,
    ) -> Result<Self> {
        let mut c = Self::new();
        for d in descs {
            c.register_description(d)?;
        }
        Ok(c)
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &ComponentDescription> {
        self.descriptions.values()
    }

    pub fn register_description(&mut self, desc: ComponentDescription) -> Result<()> {
        desc.validate()?;
        if let Some(existing) = self.descriptions.get(&desc.component_id) {
            return if *existing == desc {
                Ok(())
            } else {
                Err(Error::DuplicateIdConflict(desc.component_id.to_string()))
            };
        }
        let key = (desc.product_id.clone(), desc.version.clone());
        if self.by_version.contains_key(&key) {
            return Err(Error::DuplicateIdConflict(desc.component_id.to_string()));
        }
        self.by_version.insert(key, desc.component_id.clone());
        self.descriptions.insert(desc.component_id.clone(), desc);
        Ok(())
    }

    pub fn get(&self, id: &ComponentId) -> Option<&ComponentDescription> {
        self.descriptions.get(id)
    }

    pub fn lookup(&self, product: &ProductId, version: &str) -> Option<&ComponentDescription> {
        self.by_version
            .get(&(product.clone(), version.to_owned()))
            .and_then(|id| self.descriptions.get(id))
    }

    fn require(&self, product: &ProductId, version: &str) -> Result<&ComponentDescription> {
        self.lookup(product, version)
            .ok_or_else(|| Error::MissingCatalogEntry {
                product: product.clone(),
                version: version.to_owned(),
            })
    }

    fn versions_of<'a>(
        &'a self,
        product: &'a ProductId,
    ) -> impl Iterator<Item = &'a ComponentDescription> {
        self.by_version
            .range((product.clone(), String::new())..)
            .take_while(move |((p, _), _)| p == product)
            .filter_map(|(_, id)| self.descriptions.get(id))
    }

    fn capability_known(&self, name: &str) -> bool {
        self.descriptions.values().any(|d| {
            d.provided_capabilities.iter().any(|c| c.name == name)
                || d.required_capabilities.iter().any(|c| c.name == name)
        })
    }

    /// True iff the sponsor's capability version lies in the dependent's accepted range.
    pub fn check_compatibility(
        &self,
        sponsor: &Capability,
        dependent: &CapabilityRange,
    ) -> Result<bool> {
        for name in [&sponsor.name, &dependent.name] {
            if !self.capability_known(name) {
                return Err(Error::UnknownCapability(name.clone()));
            }
        }
        if sponsor.name != dependent.name {
            return Err(Error::UnknownCapability(format!(
                "{} does not match {}",
                sponsor.name, dependent.name
            )));
        }
        Ok(dependent.accepts(sponsor.version))
    }

    /// Capabilities provided by a set of installed components.
    pub fn provided_by(&self, components: &BTreeMap<ProductId, Version>) -> Vec<Capability> {
        let mut out: Vec<Capability> = components
            .iter()
            .filter_map(|(p, v)| self.lookup(p, v))
            .flat_map(|d| d.provided_capabilities.iter().cloned())
            .collect();
        out.sort();
        out
    }

    pub fn required_by(&self, components: &BTreeMap<ProductId, Version>) -> Vec<CapabilityRange> {
        let mut out: Vec<CapabilityRange> = components
            .iter()
            .filter_map(|(p, v)| self.lookup(p, v))
            .flat_map(|d| d.required_capabilities.iter().cloned())
            .collect();
        out.sort();
        out
    }

    /// Whether a dependent with `dependent` components can rely on a sponsor with
    /// `sponsor` components. Requirements on capabilities the sponsor does not
    /// provide at all are not this sponsor's concern.
    pub fn components_compatible(
        &self,
        dependent: &BTreeMap<ProductId, Version>,
        sponsor: &BTreeMap<ProductId, Version>,
    ) -> bool {
        let provided = self.provided_by(sponsor);
        self.required_by(dependent).iter().all(|req| {
            let offers: Vec<&Capability> = provided.iter().filter(|c| c.name == req.name).collect();
            offers.is_empty() || offers.iter().any(|c| req.accepts(c.version))
        })
    }

    /// Upgrade operation for one product transition on one resource, with the
    /// undo operation resolved against the undo-version's description.
    pub fn lookup_upgrade_operation(&self, change: &ComponentChange) -> Result<UpgradeOperation> {
        let from = change
            .from
            .as_deref()
            .map(|v| self.require(&change.product, v))
            .transpose()?;
        let to = change
            .to
            .as_deref()
            .map(|v| self.require(&change.product, v))
            .transpose()?;
        let undo_desc = change
            .undo_to
            .as_deref()
            .map(|v| self.require(&change.product, v))
            .transpose()?;

        let parts: Vec<(&[ActionTemplate], &ComponentDescription)> = match (from, to) {
            (Some(f), Some(t)) => vec![
                (&f.deactivate_actions, f),
                (&t.install_actions, t),
                (&t.activate_actions, t),
            ],
            (None, Some(t)) => vec![(&t.install_actions, t), (&t.activate_actions, t)],
            (Some(f), None) => vec![(&f.deactivate_actions, f), (&f.remove_actions, f)],
            (None, None) => {
                return Err(Error::InvalidRequest(format!(
                    "change of `{}` has neither source nor target version",
                    change.product
                )))
            }
        };
        let mut resolved = Vec::new();
        for (templates, own) in parts {
            for t in templates {
                let mut action = ResolvedAction::from_template(t, own);
                action.undo = self.resolve_undo(&action, own, undo_desc)?;
                resolved.push(action);
            }
        }
        let undo = resolved
            .iter()
            .rev()
            .flat_map(|a| a.undo.iter().cloned())
            .collect();
        Ok(UpgradeOperation {
            actions: resolved,
            undo,
        })
    }

    fn resolve_undo(
        &self,
        action: &ResolvedAction,
        own: &ComponentDescription,
        undo_desc: Option<&ComponentDescription>,
    ) -> Result<Vec<ResolvedAction>> {
        // An install whose undo target is "absent" is undone by removing it again.
        if action.kind == ActionKind::Install && undo_desc.is_none() {
            return Ok(own
                .remove_actions
                .iter()
                .map(|t| ResolvedAction::from_template(t, own))
                .collect());
        }
        let template = own
            .find_action(&action.action_id)
            .expect("resolved action comes from its own description");
        template
            .undo_templates
            .iter()
            .map(|id| {
                let (t, d) = undo_desc
                    .and_then(|u| u.find_action(id).map(|t| (t, u)))
                    .or_else(|| own.find_action(id).map(|t| (t, own)))
                    .ok_or_else(|| Error::InvalidDescription {
                        id: own.component_id.to_string(),
                        reason: format!("undo template `{id}` cannot be resolved"),
                    })?;
                Ok(ResolvedAction::from_template(t, d))
            })
            .collect()
    }

    /// Detailed and missing changes a change set needs to satisfy every vendor
    /// requirement against the current configuration.
    pub fn derive_complementary_changes(
        &self,
        change_set: &ChangeSet,
        config: &ClusterState,
    ) -> Result<Vec<Change>> {
        // Projected components per resource once the set is applied.
        let mut projected: BTreeMap<ResourceId, BTreeMap<ProductId, Version>> = BTreeMap::new();
        let mut touched: BTreeSet<(ResourceId, ProductId)> = BTreeSet::new();
        let current = |r: &ResourceId| {
            config
                .resources
                .get(r)
                .map(|x| x.components.clone())
                .unwrap_or_default()
        };
        for change in &change_set.changes {
            if let Some(v) = &change.target_version {
                self.require(&change.product, v)?;
            }
            for r in &change.targets {
                let comps = projected.entry(r.clone()).or_insert_with(|| current(r));
                match &change.target_version {
                    Some(v) => {
                        comps.insert(change.product.clone(), v.clone());
                    }
                    None => {
                        comps.remove(&change.product);
                    }
                }
                touched.insert((r.clone(), change.product.clone()));
            }
        }

        let mut added: BTreeMap<(ResourceId, ProductId), (Option<Version>, Version)> =
            BTreeMap::new();
        let view = |projected: &BTreeMap<ResourceId, BTreeMap<ProductId, Version>>,
                    r: &ResourceId| {
            projected.get(r).cloned().unwrap_or_else(|| current(r))
        };

        // Compound products: parts placed on sponsors / dependents.
        for change in &change_set.changes {
            let Some(v) = &change.target_version else {
                continue;
            };
            let desc = self.require(&change.product, v)?;
            for sub in &desc.sub_components {
                self.require(&sub.product, &sub.version)?;
                for r in &change.targets {
                    for host in self.sub_component_targets(sub, desc, r, config) {
                        let comps = view(&projected, &host);
                        if comps.get(&sub.product) == Some(&sub.version)
                            || touched.contains(&(host.clone(), sub.product.clone()))
                        {
                            continue;
                        }
                        let from = current(&host).get(&sub.product).cloned();
                        added.insert(
                            (host.clone(), sub.product.clone()),
                            (from, sub.version.clone()),
                        );
                        projected
                            .entry(host.clone())
                            .or_insert_with(|| current(&host))
                            .insert(sub.product.clone(), sub.version.clone());
                        touched.insert((host, sub.product.clone()));
                    }
                }
            }
        }

        // Version mismatches along dependencies; iterate to a fixed point.
        for _ in 0..16 {
            let mut changed = false;
            let changed_resources: Vec<ResourceId> = projected.keys().cloned().collect();
            for r in changed_resources {
                for dep in config
                    .dependencies
                    .iter()
                    .filter(|d| d.from == r || d.to == r)
                {
                    let dependent = view(&projected, &dep.from);
                    let sponsor = view(&projected, &dep.to);
                    if self.components_compatible(&dependent, &sponsor) {
                        continue;
                    }
                    // Fix the side that the set did not already change explicitly.
                    let fix_dependent = dep.to == r;
                    let (target, fixed_side, other) = if fix_dependent {
                        (dep.from.clone(), dependent, sponsor)
                    } else {
                        (dep.to.clone(), sponsor, dependent)
                    };
                    let (product, version) =
                        self.find_compatible_version(&fixed_side, &other, fix_dependent)?;
                    if touched.contains(&(target.clone(), product.clone())) {
                        continue;
                    }
                    let from = current(&target).get(&product).cloned();
                    added.insert((target.clone(), product.clone()), (from, version.clone()));
                    projected
                        .entry(target.clone())
                        .or_insert_with(|| current(&target))
                        .insert(product.clone(), version);
                    touched.insert((target, product));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let threshold_of = |r: &ResourceId| {
            // complementary changes inherit no threshold of their own
            let _ = r;
            0
        };
        Ok(added
            .into_iter()
            .enumerate()
            .map(|(i, ((resource, product), (from, to)))| Change {
                id: ChangeId::new(format!("{}-c{}", change_set.id, i + 1)),
                product,
                targets: [resource.clone()].into_iter().collect(),
                selector: None,
                source_version: from,
                target_version: Some(to),
                undo_version: None,
                undo_threshold: threshold_of(&resource),
                status: Status::New,
                complementary: true,
                new_resource: None,
            })
            .collect())
    }

    fn sub_component_targets(
        &self,
        sub: &SubComponent,
        desc: &ComponentDescription,
        resource: &ResourceId,
        config: &ClusterState,
    ) -> Vec<ResourceId> {
        match sub.placement {
            Placement::Dependents(kind) => {
                let mut v: Vec<ResourceId> =
                    config.dependents_of(resource, kind).cloned().collect();
                v.sort();
                v.dedup();
                v
            }
            Placement::Sponsors(kind) => {
                let mut v: Vec<ResourceId> = config.sponsors_of(resource, kind).cloned().collect();
                v.sort();
                v.dedup();
                // Storage parts go to the hosts least used for compute first.
                v.sort_by_key(|id| {
                    let compute = config
                        .hosts
                        .get(id)
                        .is_some_and(|h| h.roles.contains(&HostRole::Compute));
                    (compute, id.clone())
                });
                if let Some(req) = desc.storage_requirements {
                    v.truncate(req.bound() as usize);
                }
                v
            }
        }
    }

    /// Lowest version (by version string) of one of `side`'s products that makes it
    /// compatible with `other`.
    fn find_compatible_version(
        &self,
        side: &BTreeMap<ProductId, Version>,
        other: &BTreeMap<ProductId, Version>,
        side_is_dependent: bool,
    ) -> Result<(ProductId, Version)> {
        for (product, version) in side {
            for cand in self.versions_of(product) {
                if &cand.version == version {
                    continue;
                }
                let mut trial = side.clone();
                trial.insert(product.clone(), cand.version.clone());
                let ok = if side_is_dependent {
                    self.components_compatible(&trial, other)
                } else {
                    self.components_compatible(other, &trial)
                };
                if ok {
                    return Ok((product.clone(), cand.version.clone()));
                }
            }
        }
        let product = side
            .keys()
            .next()
            .cloned()
            .unwrap_or_else(|| ProductId::new("?"));
        Err(Error::MissingCatalogEntry {
            product,
            version: "*".into(),
        })
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn template(
        id: &str,
        kind: ActionKind,
        on: ResourceKind,
        secs: u64,
        undo: &[&str],
    ) -> ActionTemplate {
        ActionTemplate {
            action_id: id.into(),
            kind,
            target_kind: on,
            duration: secs * 1000,
            undo_templates: undo.iter().map(|s| s.to_string()).collect(),
            prerequisite: None,
            wrapup: None,
        }
    }

    /// A component with the standard deactivate / install / activate / remove scripts.
    pub fn component(
        product: &str,
        version: &str,
        kind: ResourceKind,
        install_secs: u64,
    ) -> ComponentDescription {
        ComponentDescription {
            component_id: format!("{product}-{version}").into(),
            product_id: product.into(),
            version: version.into(),
            kind,
            provided_capabilities: vec![],
            required_capabilities: vec![],
            install_actions: vec![template(
                "install",
                ActionKind::Install,
                kind,
                install_secs,
                &["install"],
            )],
            remove_actions: vec![template(
                "remove",
                ActionKind::Remove,
                kind,
                5,
                &["install"],
            )],
            activate_actions: vec![template(
                "activate",
                ActionKind::Activate,
                kind,
                0,
                &["deactivate"],
            )],
            deactivate_actions: vec![template(
                "deactivate",
                ActionKind::Deactivate,
                kind,
                0,
                &["activate"],
            )],
            install_time_estimate: install_secs * 1000,
            remove_time_estimate: 5000,
            hardware: false,
            storage_requirements: None,
            sub_components: vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn two_version_catalog() -> ResourceUpgradeCatalog {
        let mut v1 = component("hv", "1", ResourceKind::Hypervisor, 41);
        v1.install_actions[0].duration = 30_000;
        let v2 = component("hv", "2", ResourceKind::Hypervisor, 41);
        let v3 = component("hv", "3", ResourceKind::Hypervisor, 50);
        ResourceUpgradeCatalog::from_descriptions([v1, v2, v3]).unwrap()
    }

    #[test]
    fn register_then_fetch_by_product_and_version() {
        let mut c = ResourceUpgradeCatalog::new();
        c.register_description(component("ceph", "2", ResourceKind::VirtualStorage, 60))
            .unwrap();
        let d = c.lookup(&"ceph".into(), "2").unwrap();
        assert_eq!(d.component_id.as_str(), "ceph-2");
    }

    #[test]
    fn registering_identical_content_twice_is_idempotent() {
        let mut c = ResourceUpgradeCatalog::new();
        let d = component("ceph", "2", ResourceKind::VirtualStorage, 60);
        c.register_description(d.clone()).unwrap();
        c.register_description(d.clone()).unwrap();
        let mut other = d;
        other.install_time_estimate = 99_000;
        assert!(matches!(
            c.register_description(other),
            Err(Error::DuplicateIdConflict(_))
        ));
    }

    #[test]
    fn empty_undo_templates_are_rejected() {
        let mut d = component("ceph", "2", ResourceKind::VirtualStorage, 60);
        d.install_actions[0].undo_templates.clear();
        let err = ResourceUpgradeCatalog::new()
            .register_description(d)
            .unwrap_err();
        match err {
            Error::InvalidDescription { reason, .. } => assert!(reason.contains("undo-template")),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn compatibility_ranges() {
        let mut d = component("ceph-client", "2", ResourceKind::Hypervisor, 10);
        d.required_capabilities.push(CapabilityRange {
            name: "storage-api".into(),
            min: 2,
            max: 3,
        });
        let mut s = component("vsan", "1", ResourceKind::VirtualStorage, 10);
        s.provided_capabilities.push(Capability {
            name: "storage-api".into(),
            version: 1,
        });
        let c = ResourceUpgradeCatalog::from_descriptions([d, s]).unwrap();
        let cap = |v| Capability {
            name: "storage-api".into(),
            version: v,
        };
        let range = |lo, hi| CapabilityRange {
            name: "storage-api".into(),
            min: lo,
            max: hi,
        };
        assert!(c.check_compatibility(&cap(2), &range(2, 2)).unwrap());
        assert!(!c.check_compatibility(&cap(1), &range(2, 3)).unwrap());
        // pure function
        assert_eq!(
            c.check_compatibility(&cap(3), &range(2, 3)),
            c.check_compatibility(&cap(3), &range(2, 3))
        );
        assert!(matches!(
            c.check_compatibility(
                &Capability {
                    name: "nope".into(),
                    version: 1
                },
                &range(1, 1)
            ),
            Err(Error::UnknownCapability(_))
        ));
    }

    #[test]
    fn upgrade_operation_is_deactivate_install_activate() {
        let c = two_version_catalog();
        let op = c
            .lookup_upgrade_operation(&ComponentChange {
                product: "hv".into(),
                from: Some("1".into()),
                to: Some("2".into()),
                undo_to: Some("1".into()),
            })
            .unwrap();
        let ids: Vec<_> = op.actions.iter().map(|a| a.action_id.as_str()).collect();
        assert_eq!(ids, ["deactivate", "install", "activate"]);
        assert_eq!(op.total_duration(), 41_000);
        // undo reinstalls the source version
        let undo_install = op
            .undo
            .iter()
            .find(|a| a.kind == ActionKind::Install)
            .unwrap();
        assert_eq!(undo_install.version, "1");
        assert_eq!(undo_install.duration, 30_000);
    }

    #[test]
    fn remove_only_change_has_symmetric_undo() {
        let c = two_version_catalog();
        let op = c
            .lookup_upgrade_operation(&ComponentChange {
                product: "hv".into(),
                from: Some("2".into()),
                to: None,
                undo_to: Some("2".into()),
            })
            .unwrap();
        let ids: Vec<_> = op.actions.iter().map(|a| a.action_id.as_str()).collect();
        assert_eq!(ids, ["deactivate", "remove"]);
        let undo: Vec<_> = op.undo.iter().map(|a| a.action_id.as_str()).collect();
        assert_eq!(undo, ["install", "activate"]);
    }

    #[test]
    fn undo_targets_the_undo_version() {
        // Hand-checked: 2 -> 3 with undo-version 1 reinstalls version 1 (30 s), not 2.
        let c = two_version_catalog();
        let op = c
            .lookup_upgrade_operation(&ComponentChange {
                product: "hv".into(),
                from: Some("2".into()),
                to: Some("3".into()),
                undo_to: Some("1".into()),
            })
            .unwrap();
        let install_undo = op
            .undo
            .iter()
            .find(|a| a.kind == ActionKind::Install)
            .unwrap();
        assert_eq!(install_undo.version, "1");
        assert_eq!(install_undo.duration, 30_000);
    }

    #[test]
    fn add_is_undone_by_removal() {
        let c = two_version_catalog();
        let op = c
            .lookup_upgrade_operation(&ComponentChange {
                product: "hv".into(),
                from: None,
                to: Some("2".into()),
                undo_to: None,
            })
            .unwrap();
        let mut comps = BTreeMap::new();
        let mut active = false;
        for a in op.actions.iter().chain(&op.undo) {
            a.apply(&mut comps, &mut active);
        }
        assert!(comps.is_empty());
        assert!(!active);
    }

    #[test]
    fn missing_entry_is_reported() {
        let c = two_version_catalog();
        let err = c
            .lookup_upgrade_operation(&ComponentChange {
                product: "hv".into(),
                from: Some("1".into()),
                to: Some("9".into()),
                undo_to: None,
            })
            .unwrap_err();
        assert!(matches!(err, Error::MissingCatalogEntry { .. }));
    }
}
