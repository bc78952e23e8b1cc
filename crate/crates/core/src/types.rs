//! Identifiers, simulated time, and the small enums shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Any infrastructure resource: host, hypervisor, virtual storage, switch...
    ResourceId
);
string_id!(VmId);
string_id!(TenantId);
string_id!(
    /// Anti-affinity placement group.
    GroupId
);
string_id!(
    /// Change set id; doubles as the id of the undo unit it defines.
    SetId
);
string_id!(ChangeId);
string_id!(RequestId);
string_id!(UnitId);
string_id!(ProductId);
string_id!(ComponentId);

/// Hosts are resources too; the alias only documents intent.
pub type HostId = ResourceId;

/// Version string of an installed infrastructure component.
pub type Version = String;

/// Simulated time in milliseconds.
pub type SimTime = u64;

/// Simulated duration in milliseconds.
pub type Millis = u64;

/// Converts scenario seconds to simulated milliseconds, rounding to the nearest millisecond.
pub fn secs_to_ms(secs: f64) -> Millis {
    (secs * 1000.0).round().max(0.0) as Millis
}

pub fn ms_to_secs(ms: Millis) -> f64 {
    ms as f64 / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceKind {
    ComputeHost,
    StorageHost,
    ControllerHost,
    NetworkHost,
    Hypervisor,
    Vm,
    VirtualStorage,
    Switch,
    Router,
    PhysicalDisk,
    Other,
}

impl ResourceKind {
    pub fn is_host(self) -> bool {
        matches!(
            self,
            Self::ComputeHost | Self::StorageHost | Self::ControllerHost | Self::NetworkHost
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostRole {
    Compute,
    Storage,
    Network,
    Controller,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DependencyKind {
    ContainerContained,
    Migration,
    Composition,
    Aggregation,
    Communication,
    Storage,
    Controller,
    VmSupportingStorageController,
    Peer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Presence {
    Current,
    Future,
    CurrentFuture,
}

impl Presence {
    pub fn in_current(self) -> bool {
        matches!(self, Self::Current | Self::CurrentFuture)
    }

    pub fn in_future(self) -> bool {
        matches!(self, Self::Future | Self::CurrentFuture)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModificationType {
    Upgrade,
    Add,
    Remove,
    NoChange,
}

/// Lifecycle status shared by change sets and individual changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    New,
    Scheduled,
    Completed,
    Failed,
}

impl Status {
    /// Monotonic ordering: new < scheduled < {completed, failed}.
    pub fn rank(self) -> u8 {
        match self {
            Self::New => 0,
            Self::Scheduled => 1,
            Self::Completed | Self::Failed => 2,
        }
    }

    pub fn is_final(self) -> bool {
        self.rank() == 2
    }
}

/// Serializes a millisecond duration as fractional seconds, the unit used in scenario files.
pub mod serde_secs {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Millis;

    pub fn serialize<S: Serializer>(ms: &Millis, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(super::ms_to_secs(*ms))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Millis, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom(
                "duration must be a non-negative number of seconds",
            ));
        }
        Ok(super::secs_to_ms(secs))
    }
}

/// Same as [`serde_secs`] for optional durations.
pub mod serde_secs_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Millis;

    pub fn serialize<S: Serializer>(ms: &Option<Millis>, s: S) -> Result<S::Ok, S::Error> {
        match ms {
            Some(ms) => s.serialize_some(&super::ms_to_secs(*ms)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Millis>, D::Error> {
        let secs = Option::<f64>::deserialize(d)?;
        match secs {
            Some(s) if !s.is_finite() || s < 0.0 => Err(serde::de::Error::custom(
                "duration must be a non-negative number of seconds",
            )),
            Some(s) => Ok(Some(super::secs_to_ms(s))),
            None => Ok(None),
        }
    }
}
