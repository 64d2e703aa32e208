use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ids::{InstanceId, SubscaleId};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Epoch {
    /// Records sent before the channel's confirm barrier.
    Preceding,
    /// Records sent after it.
    Following,
}

/// Target-side epoch per predecessor channel for one subscale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochTable {
    pub subscale: SubscaleId,
    epochs: BTreeMap<InstanceId, Epoch>,
}

impl EpochTable {
    pub fn new(subscale: SubscaleId, channels: impl IntoIterator<Item = InstanceId>) -> Self {
        EpochTable {
            subscale,
            epochs: channels
                .into_iter()
                .map(|c| (c, Epoch::Preceding))
                .collect(),
        }
    }

    /// `None` for channels the table does not track (created after injection).
    pub fn epoch(&self, channel: InstanceId) -> Option<Epoch> {
        self.epochs.get(&channel).copied()
    }

    /// Whether records from `channel` may be served under fluid confirmation.
    pub fn serves(&self, channel: InstanceId) -> bool {
        self.epoch(channel) != Some(Epoch::Preceding)
    }

    /// Flips `channel` to the following epoch. Returns whether the subscale
    /// became aligned.
    pub fn confirm(&mut self, channel: InstanceId) -> Result<bool> {
        match self.epochs.get_mut(&channel) {
            Some(e @ Epoch::Preceding) => *e = Epoch::Following,
            Some(Epoch::Following) => {
                return Err(Error::DuplicateConfirm {
                    channel,
                    subscale: self.subscale,
                })
            }
            None => {
                return Err(Error::ProtocolError(format!(
                    "channel {channel} is not tracked by subscale {}",
                    self.subscale
                )))
            }
        }
        Ok(self.is_aligned())
    }

    pub fn is_aligned(&self) -> bool {
        self.epochs.values().all(|e| *e == Epoch::Following)
    }

    pub fn pending_channels(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.epochs
            .iter()
            .filter(|(_, e)| **e == Epoch::Preceding)
            .map(|(c, _)| *c)
    }
}
