use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{InstanceId, KeyGroupId, SubscaleId};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscalePhase {
    Pending,
    Triggered,
    Migrating,
    Completed,
}

/// An independently migrating set of key-groups with one source and one
/// target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscale {
    pub id: SubscaleId,
    pub keygroups: BTreeSet<KeyGroupId>,
    pub source: InstanceId,
    pub target: InstanceId,
    pub phase: SubscalePhase,
}

impl Subscale {
    pub fn new(
        id: SubscaleId,
        keygroups: BTreeSet<KeyGroupId>,
        source: InstanceId,
        target: InstanceId,
    ) -> Self {
        Subscale {
            id,
            keygroups,
            source,
            target,
            phase: SubscalePhase::Pending,
        }
    }

    pub fn overlaps(&self, other: &Subscale) -> bool {
        !self.keygroups.is_disjoint(&other.keygroups)
    }

    pub fn involves(&self, inst: InstanceId) -> bool {
        self.source == inst || self.target == inst
    }
}
