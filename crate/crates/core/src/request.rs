//! Administrator upgrade requests, change sets and the upgrade request model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ResourceUpgradeCatalog;
use crate::cluster::ClusterState;
use crate::error::{Error, Result};
use crate::types::{
    ChangeId, HostId, Millis, ProductId, RequestId, ResourceId, ResourceKind, SetId, SimTime,
    Status, Version,
};

/// Resolves to every resource of `kind`, optionally only those running `product`
/// (at `version` when given).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub kind: ResourceKind,
    #[serde(default)]
    pub product: Option<ProductId>,
    #[serde(default)]
    pub version: Option<Version>,
}

impl Selector {
    pub fn resolve(&self, config: &ClusterState) -> BTreeSet<ResourceId> {
        config
            .resources
            .values()
            .filter(|r| r.kind == self.kind)
            .filter(|r| match &self.product {
                None => true,
                Some(p) => match (&self.version, r.components.get(p)) {
                    (_, None) => false,
                    (None, Some(_)) => true,
                    (Some(want), Some(have)) => want == have,
                },
            })
            .map(|r| r.id.clone())
            .collect()
    }
}

/// A resource the change brings into the configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewResource {
    pub kind: ResourceKind,
    #[serde(default)]
    pub host: Option<HostId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub id: ChangeId,
    pub product: ProductId,
    #[serde(default)]
    pub targets: BTreeSet<ResourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<Selector>,
    /// Informative; each target's actual installed version is used as the source.
    #[serde(default)]
    pub source_version: Option<Version>,
    /// `None` removes the component.
    #[serde(default)]
    pub target_version: Option<Version>,
    /// `None` means each target's current version.
    #[serde(default)]
    pub undo_version: Option<Version>,
    #[serde(default)]
    pub undo_threshold: u32,
    #[serde(default = "new_status")]
    pub status: Status,
    #[serde(default)]
    pub complementary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_resource: Option<NewResource>,
}

fn new_status() -> Status {
    Status::New
}

impl Change {
    /// Undo version of one target given its version before the change.
    pub fn undo_version_for(&self, current: Option<&Version>) -> Option<Version> {
        self.undo_version.clone().or_else(|| current.cloned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub id: SetId,
    pub changes: Vec<Change>,
    #[serde(with = "crate::types::serde_secs")]
    pub max_completion_period: Millis,
    pub max_retry: u32,
    #[serde(default)]
    pub submitted_at: SimTime,
    #[serde(default = "new_status")]
    pub status: Status,
    #[serde(default)]
    pub undo_requested: bool,
}

impl ChangeSet {
    pub fn targets(&self) -> BTreeSet<ResourceId> {
        self.changes
            .iter()
            .flat_map(|c| c.targets.iter().cloned())
            .collect()
    }

    /// Members that must survive for the set to stay applicable.
    pub fn undo_threshold(&self) -> u32 {
        self.changes
            .iter()
            .map(|c| c.undo_threshold)
            .max()
            .unwrap_or(0)
    }

    pub fn deadline(&self) -> SimTime {
        self.submitted_at.saturating_add(self.max_completion_period)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpgradeRequest {
    pub id: RequestId,
    pub change_sets: Vec<ChangeSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeadlineStatus {
    WithinDeadline,
    DeadlineExceeded,
}

/// Every change set ever submitted, with its status.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpgradeRequestModel {
    pub sets: BTreeMap<SetId, ChangeSet>,
    pub requests: BTreeMap<RequestId, Vec<SetId>>,
    /// Sets submitted since the resource graph last absorbed new requests.
    #[serde(default)]
    pub unmerged: Vec<SetId>,
}

impl UpgradeRequestModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, id: &SetId) -> Result<&ChangeSet> {
        self.sets
            .get(id)
            .ok_or_else(|| Error::UnknownChangeSet(id.clone()))
    }

    /// Validates a request, resolves selectors, appends complementary changes and
    /// stores its change sets with status new.
    pub fn submit_request(
        &mut self,
        mut request: UpgradeRequest,
        config: &ClusterState,
        catalog: &ResourceUpgradeCatalog,
        now: SimTime,
    ) -> Result<RequestId> {
        if request.change_sets.is_empty() {
            return Err(Error::InvalidRequest(format!(
                "request `{}` has no change sets",
                request.id
            )));
        }
        if self.requests.contains_key(&request.id) {
            return Err(Error::InvalidRequest(format!(
                "request id `{}` reused",
                request.id
            )));
        }
        let mut seen_ids = BTreeSet::new();
        for set in &mut request.change_sets {
            if set.changes.is_empty() {
                return Err(Error::InvalidRequest(format!(
                    "change set `{}` is empty",
                    set.id
                )));
            }
            if set.max_retry < 1 {
                return Err(Error::InvalidRequest(format!(
                    "change set `{}`: max-retry must be >= 1",
                    set.id
                )));
            }
            if set.max_completion_period == 0 {
                return Err(Error::InvalidRequest(format!(
                    "change set `{}`: max-completion-period must be > 0",
                    set.id
                )));
            }
            if self.sets.contains_key(&set.id) || !seen_ids.insert(set.id.clone()) {
                return Err(Error::InvalidRequest(format!(
                    "change set id `{}` reused",
                    set.id
                )));
            }
            for change in &mut set.changes {
                if let Some(sel) = &change.selector {
                    change.targets.extend(sel.resolve(config));
                }
                if change.targets.is_empty() {
                    return Err(Error::InvalidRequest(format!(
                        "change `{}` has no targets",
                        change.id
                    )));
                }
                for t in &change.targets {
                    if change.new_resource.is_none() && !config.resources.contains_key(t) {
                        return Err(Error::UnknownResource(t.to_string()));
                    }
                }
                for v in [&change.target_version, &change.undo_version]
                    .into_iter()
                    .flatten()
                {
                    if catalog.lookup(&change.product, v).is_none() {
                        return Err(Error::MissingCatalogEntry {
                            product: change.product.clone(),
                            version: v.clone(),
                        });
                    }
                }
                if change.undo_threshold as usize > change.targets.len() {
                    return Err(Error::InvalidRequest(format!(
                        "change `{}`: undo-threshold exceeds its target count",
                        change.id
                    )));
                }
                if change.source_version.is_none() {
                    change.source_version = change.targets.iter().find_map(|t| {
                        config
                            .resources
                            .get(t)?
                            .components
                            .get(&change.product)
                            .cloned()
                    });
                }
                change.status = Status::New;
            }
        }
        for (i, a) in request.change_sets.iter().enumerate() {
            let ta = a.targets();
            for b in &request.change_sets[i + 1..] {
                if let Some(shared) = ta.intersection(&b.targets()).next() {
                    return Err(Error::OverlappingChangeSets(
                        a.id.clone(),
                        b.id.clone(),
                        shared.to_string(),
                    ));
                }
            }
        }
        for set in &mut request.change_sets {
            let extra = catalog.derive_complementary_changes(set, config)?;
            set.changes.extend(extra);
            set.submitted_at = now;
            set.status = Status::New;
            set.undo_requested = false;
        }
        let ids: Vec<SetId> = request.change_sets.iter().map(|s| s.id.clone()).collect();
        for set in request.change_sets {
            self.sets.insert(set.id.clone(), set);
        }
        self.unmerged.extend(ids.iter().cloned());
        self.requests.insert(request.id.clone(), ids);
        Ok(request.id)
    }

    /// Flags a set for system-level undo in the next iteration.
    pub fn record_admin_undo(&mut self, set_id: &SetId) -> Result<()> {
        let set = self
            .sets
            .get_mut(set_id)
            .ok_or_else(|| Error::UnknownChangeSet(set_id.clone()))?;
        match set.status {
            Status::Completed => Err(Error::AlreadyCompleted(set_id.clone())),
            Status::Failed => Ok(()),
            Status::New | Status::Scheduled => {
                set.undo_requested = true;
                Ok(())
            }
        }
    }

    /// Advances a set's status; never moves backwards or out of a final status.
    pub fn advance(&mut self, set_id: &SetId, to: Status) -> Result<()> {
        let set = self
            .sets
            .get_mut(set_id)
            .ok_or_else(|| Error::UnknownChangeSet(set_id.clone()))?;
        if set.status.is_final() || to.rank() < set.status.rank() {
            return Ok(());
        }
        set.status = to;
        for c in &mut set.changes {
            if !c.status.is_final() && to.rank() >= c.status.rank() {
                c.status = to;
            }
        }
        Ok(())
    }

    pub fn open_sets(&self) -> impl Iterator<Item = &ChangeSet> {
        self.sets.values().filter(|s| !s.status.is_final())
    }

    pub fn all_final(&self) -> bool {
        self.sets.values().all(|s| s.status.is_final())
    }
}

/// Inclusive: a set is within its deadline while `now <= submitted-at + period`.
pub fn check_completion_deadline(set: &ChangeSet, now: SimTime) -> DeadlineStatus {
    if now <= set.deadline() {
        DeadlineStatus::WithinDeadline
    } else {
        DeadlineStatus::DeadlineExceeded
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixtures::component;
    use crate::cluster::InfraResource;

    fn config() -> ClusterState {
        let mut s = ClusterState::default();
        for id in ["hv1", "hv2", "sw1"] {
            let kind = if id.starts_with("hv") {
                ResourceKind::Hypervisor
            } else {
                ResourceKind::Switch
            };
            let product = if id.starts_with("hv") { "hv" } else { "fw" };
            s.resources.insert(
                id.into(),
                InfraResource {
                    id: id.into(),
                    kind,
                    host: None,
                    components: [(product.into(), "1".to_string())].into_iter().collect(),
                    active: true,
                },
            );
        }
        s
    }

    fn catalog() -> ResourceUpgradeCatalog {
        ResourceUpgradeCatalog::from_descriptions([
            component("hv", "1", ResourceKind::Hypervisor, 41),
            component("hv", "2", ResourceKind::Hypervisor, 41),
            component("fw", "1", ResourceKind::Switch, 20),
            component("fw", "2", ResourceKind::Switch, 20),
        ])
        .unwrap()
    }

    pub(crate) fn change(id: &str, product: &str, targets: &[&str], to: &str) -> Change {
        Change {
            id: id.into(),
            product: product.into(),
            targets: targets.iter().map(|t| ResourceId::from(*t)).collect(),
            selector: None,
            source_version: None,
            target_version: Some(to.into()),
            undo_version: None,
            undo_threshold: 0,
            status: Status::New,
            complementary: false,
            new_resource: None,
        }
    }

    fn set(id: &str, changes: Vec<Change>) -> ChangeSet {
        ChangeSet {
            id: id.into(),
            changes,
            max_completion_period: 600_000,
            max_retry: 2,
            submitted_at: 0,
            status: Status::New,
            undo_requested: false,
        }
    }

    #[test]
    fn two_change_sets_give_two_undo_units() {
        let mut m = UpgradeRequestModel::new();
        let req = UpgradeRequest {
            id: "r1".into(),
            change_sets: vec![
                set("s1", vec![change("c1", "hv", &["hv1", "hv2"], "2")]),
                set("s2", vec![change("c2", "fw", &["sw1"], "2")]),
            ],
        };
        m.submit_request(req, &config(), &catalog(), 5).unwrap();
        assert_eq!(m.sets.len(), 2);
        assert!(m
            .sets
            .values()
            .all(|s| s.status == Status::New && s.submitted_at == 5));
        assert_eq!(
            m.sets[&SetId::from("s1")].changes[0]
                .source_version
                .as_deref(),
            Some("1")
        );
    }

    #[test]
    fn empty_and_overlapping_requests_are_rejected() {
        let mut m = UpgradeRequestModel::new();
        let empty = UpgradeRequest {
            id: "r0".into(),
            change_sets: vec![],
        };
        assert!(matches!(
            m.submit_request(empty, &config(), &catalog(), 0),
            Err(Error::InvalidRequest(_))
        ));
        let overlap = UpgradeRequest {
            id: "r1".into(),
            change_sets: vec![
                set("s1", vec![change("c1", "hv", &["hv1"], "2")]),
                set("s2", vec![change("c2", "hv", &["hv1"], "2")]),
            ],
        };
        assert!(matches!(
            m.submit_request(overlap, &config(), &catalog(), 0),
            Err(Error::OverlappingChangeSets(..))
        ));
        let missing = UpgradeRequest {
            id: "r2".into(),
            change_sets: vec![set("s3", vec![change("c3", "hv", &["hv1"], "7")])],
        };
        assert!(matches!(
            m.submit_request(missing, &config(), &catalog(), 0),
            Err(Error::MissingCatalogEntry { .. })
        ));
    }

    #[test]
    fn selector_resolves_at_submission() {
        let mut m = UpgradeRequestModel::new();
        let mut c = change("c1", "hv", &[], "2");
        c.selector = Some(Selector {
            kind: ResourceKind::Hypervisor,
            product: None,
            version: None,
        });
        m.submit_request(
            UpgradeRequest {
                id: "r".into(),
                change_sets: vec![set("s", vec![c])],
            },
            &config(),
            &catalog(),
            0,
        )
        .unwrap();
        let targets = &m.sets[&SetId::from("s")].changes[0].targets;
        assert_eq!(targets.len(), 2);
    }

    #[test]
    fn admin_undo_rules() {
        let mut m = UpgradeRequestModel::new();
        m.submit_request(
            UpgradeRequest {
                id: "r".into(),
                change_sets: vec![
                    set("s1", vec![change("c1", "hv", &["hv1"], "2")]),
                    set("s2", vec![change("c2", "fw", &["sw1"], "2")]),
                ],
            },
            &config(),
            &catalog(),
            0,
        )
        .unwrap();
        m.advance(&"s1".into(), Status::Scheduled).unwrap();
        m.record_admin_undo(&"s1".into()).unwrap();
        m.record_admin_undo(&"s1".into()).unwrap();
        assert!(m.sets[&SetId::from("s1")].undo_requested);
        m.advance(&"s2".into(), Status::Completed).unwrap();
        assert!(matches!(
            m.record_admin_undo(&"s2".into()),
            Err(Error::AlreadyCompleted(_))
        ));
        // completed never regresses
        m.advance(&"s2".into(), Status::Scheduled).unwrap();
        assert_eq!(m.sets[&SetId::from("s2")].status, Status::Completed);
    }

    #[test]
    fn deadline_is_inclusive() {
        let s = set("s", vec![change("c", "hv", &["hv1"], "2")]);
        assert_eq!(
            check_completion_deadline(&s, 599_000),
            DeadlineStatus::WithinDeadline
        );
        assert_eq!(
            check_completion_deadline(&s, 600_000),
            DeadlineStatus::WithinDeadline
        );
        assert_eq!(
            check_completion_deadline(&s, 601_000),
            DeadlineStatus::DeadlineExceeded
        );
    }
}
