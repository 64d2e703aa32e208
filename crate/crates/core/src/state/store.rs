use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::key_to_keygroup;
use crate::error::{Error, Result};
use crate::ids::{InstanceId, Key, KeyGroupId, SubscaleId};

/// Per-key-group lifecycle.
///
/// Source side: `Local → MigratingOut → MigratedOut`.
/// Target side: `Incoming → InactiveArrived → Active`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyGroupStatus {
    Local,
    MigratingOut,
    MigratedOut,
    Incoming,
    InactiveArrived,
    Active,
}

impl KeyGroupStatus {
    pub fn is_readable(self) -> bool {
        matches!(
            self,
            KeyGroupStatus::Local | KeyGroupStatus::MigratingOut | KeyGroupStatus::Active
        )
    }
}

/// Value held for one key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateValue {
    /// Running sum and count (keyed aggregation fast path).
    Sum {
        sum: i64,
        count: u64,
    },
    /// Per-pane event counts for sliding windows plus the end of the last
    /// fired window.
    Panes {
        panes: BTreeMap<u64, u64>,
        fired_until: u64,
    },
    Bytes(Vec<u8>),
}

impl StateValue {
    pub fn entry_count_hint(&self) -> usize {
        match self {
            StateValue::Panes { panes, .. } => panes.len().max(1),
            _ => 1,
        }
    }
}

/// State of one key-group shipped from source to target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateChunk {
    pub subscale_id: SubscaleId,
    pub keygroup: KeyGroupId,
    pub entries: BTreeMap<Key, StateValue>,
    pub source: InstanceId,
    pub target: InstanceId,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Slot {
    status: Option<KeyGroupStatus>,
    entries: BTreeMap<Key, StateValue>,
}

/// Keyed state of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyedStateStore {
    num_keygroups: u32,
    slots: Vec<Slot>,
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    kg: u32,
    key: String,
    value: String,
}

impl KeyedStateStore {
    pub fn new(num_keygroups: u32) -> Self {
        KeyedStateStore {
            num_keygroups,
            slots: vec![Slot::default(); num_keygroups as usize],
        }
    }

    /// A store that owns `kgs` in status `Local`.
    pub fn with_owned(num_keygroups: u32, kgs: impl IntoIterator<Item = KeyGroupId>) -> Self {
        let mut s = Self::new(num_keygroups);
        for kg in kgs {
            s.slots[kg.index()].status = Some(KeyGroupStatus::Local);
        }
        s
    }

    pub fn num_keygroups(&self) -> u32 {
        self.num_keygroups
    }

    pub fn keygroup_of(&self, key: &[u8]) -> KeyGroupId {
        key_to_keygroup(key, self.num_keygroups)
    }

    pub fn keygroup_status(&self, kg: KeyGroupId) -> Option<KeyGroupStatus> {
        self.slots.get(kg.index()).and_then(|s| s.status)
    }

    fn transition(
        &mut self,
        kg: KeyGroupId,
        from: &[Option<KeyGroupStatus>],
        to: KeyGroupStatus,
    ) -> Result<()> {
        let slot = self
            .slots
            .get_mut(kg.index())
            .ok_or(Error::IncompleteTable(kg))?;
        if !from.contains(&slot.status) {
            return Err(Error::IllegalStateTransition {
                kg,
                from: slot.status,
                to,
            });
        }
        slot.status = Some(to);
        Ok(())
    }

    /// Readable state for `key`, or `None` if its key-group is not readable here.
    pub fn get(&self, key: &[u8]) -> Option<&StateValue> {
        let slot = &self.slots[self.keygroup_of(key).index()];
        if slot.status.is_some_and(KeyGroupStatus::is_readable) {
            slot.entries.get(key)
        } else {
            None
        }
    }

    /// Mutable access to a key-group's entries regardless of status. The
    /// protocol layer decides when this is legal (rerouted records, fluid
    /// confirmation, universal keys).
    pub fn entries_mut(&mut self, kg: KeyGroupId) -> &mut BTreeMap<Key, StateValue> {
        &mut self.slots[kg.index()].entries
    }

    pub fn entries(&self, kg: KeyGroupId) -> &BTreeMap<Key, StateValue> {
        &self.slots[kg.index()].entries
    }

    /// Marks `kgs` as leaving: `Local → MigratingOut`. Atomic: on error no
    /// key-group changes.
    pub fn begin_migration(&mut self, kgs: &BTreeSet<KeyGroupId>) -> Result<()> {
        if let Some(&kg) = kgs
            .iter()
            .find(|kg| self.keygroup_status(**kg) != Some(KeyGroupStatus::Local))
        {
            return Err(Error::IllegalStateTransition {
                kg,
                from: self.keygroup_status(kg),
                to: KeyGroupStatus::MigratingOut,
            });
        }
        for &kg in kgs {
            self.transition(
                kg,
                &[Some(KeyGroupStatus::Local)],
                KeyGroupStatus::MigratingOut,
            )?;
        }
        Ok(())
    }

    /// Emits the chunk for one migrating key-group: `MigratingOut → MigratedOut`.
    pub fn emit_chunk(
        &mut self,
        kg: KeyGroupId,
        subscale_id: SubscaleId,
        source: InstanceId,
        target: InstanceId,
    ) -> Result<StateChunk> {
        self.transition(
            kg,
            &[Some(KeyGroupStatus::MigratingOut)],
            KeyGroupStatus::MigratedOut,
        )?;
        let entries = std::mem::take(&mut self.slots[kg.index()].entries);
        Ok(StateChunk {
            subscale_id,
            keygroup: kg,
            entries,
            source,
            target,
        })
    }

    /// Extracts every key-group in `kgs`, one chunk per key-group in
    /// ascending order.
    pub fn extract_chunks(
        &mut self,
        kgs: &BTreeSet<KeyGroupId>,
        subscale_id: SubscaleId,
        source: InstanceId,
        target: InstanceId,
    ) -> Result<Vec<StateChunk>> {
        self.begin_migration(kgs)?;
        kgs.iter()
            .map(|&kg| self.emit_chunk(kg, subscale_id, source, target))
            .collect()
    }

    /// Declares a key-group as expected on this instance.
    pub fn expect_incoming(&mut self, kg: KeyGroupId) -> Result<()> {
        self.transition(kg, &[None], KeyGroupStatus::Incoming)
    }

    /// Installs a chunk: `Incoming → InactiveArrived`. Activation is a
    /// separate protocol decision.
    pub fn install_chunk(&mut self, chunk: &StateChunk) -> Result<KeyGroupStatus> {
        let kg = chunk.keygroup;
        match self.keygroup_status(kg) {
            Some(KeyGroupStatus::Incoming) => {}
            Some(KeyGroupStatus::InactiveArrived) | Some(KeyGroupStatus::Active) => {
                return Err(Error::DuplicateChunk(kg))
            }
            _ => return Err(Error::UnexpectedChunk(kg)),
        }
        let slot = &mut self.slots[kg.index()];
        // Entries written before arrival (universal keys) are merged, never dropped.
        for (k, v) in &chunk.entries {
            match slot.entries.get_mut(k) {
                Some(existing) => merge_values(existing, v),
                None => {
                    slot.entries.insert(k.clone(), v.clone());
                }
            }
        }
        slot.status = Some(KeyGroupStatus::InactiveArrived);
        Ok(KeyGroupStatus::InactiveArrived)
    }

    /// `InactiveArrived → Active`.
    pub fn activate(&mut self, kg: KeyGroupId) -> Result<()> {
        self.transition(
            kg,
            &[Some(KeyGroupStatus::InactiveArrived)],
            KeyGroupStatus::Active,
        )
    }

    /// Returns to non-scaling status: `Active → Local`, migrated-out slots dropped.
    pub fn finalize(&mut self) {
        for slot in &mut self.slots {
            match slot.status {
                Some(KeyGroupStatus::Active) => slot.status = Some(KeyGroupStatus::Local),
                Some(KeyGroupStatus::MigratedOut) => *slot = Slot::default(),
                _ => {}
            }
        }
    }

    /// Installs a key-group directly as `Local` (restore / restart paths).
    pub fn adopt(&mut self, kg: KeyGroupId, entries: BTreeMap<Key, StateValue>) {
        let slot = &mut self.slots[kg.index()];
        slot.status = Some(KeyGroupStatus::Local);
        for (k, v) in entries {
            match slot.entries.get_mut(&k) {
                Some(existing) => merge_values(existing, &v),
                None => {
                    slot.entries.insert(k, v);
                }
            }
        }
    }

    /// Removes a key-group entirely, returning its entries.
    pub fn release(&mut self, kg: KeyGroupId) -> BTreeMap<Key, StateValue> {
        std::mem::take(&mut self.slots[kg.index()]).entries
    }

    pub fn keygroups_with(&self, status: KeyGroupStatus) -> impl Iterator<Item = KeyGroupId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.status == Some(status))
            .map(|(i, _)| KeyGroupId(i as u32))
    }

    /// All readable entries.
    pub fn readable_entries(&self) -> impl Iterator<Item = (KeyGroupId, &Key, &StateValue)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.status.is_some_and(KeyGroupStatus::is_readable))
            .flat_map(|(i, s)| {
                s.entries
                    .iter()
                    .map(move |(k, v)| (KeyGroupId(i as u32), k, v))
            })
    }

    /// Number of keys in readable key-groups.
    pub fn readable_key_count(&self) -> usize {
        self.readable_entries().count()
    }

    /// Writes readable entries as JSON lines `{kg, key, value}` (base64).
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        for (kg, key, value) in self.readable_entries() {
            let line = DumpLine {
                kg: kg.0,
                key: B64.encode(key),
                value: B64.encode(serde_json::to_vec(value).expect("state value serializes")),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`KeyedStateStore::dump`] into `Local` key-groups.
    pub fn load<R: BufRead>(num_keygroups: u32, input: R) -> Result<Self> {
        let mut store = Self::new(num_keygroups);
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DumpLine = serde_json::from_str(&line).map_err(|e| Error::Io(e.to_string()))?;
            let key = B64.decode(d.key).map_err(|e| Error::Io(e.to_string()))?;
            let raw = B64.decode(d.value).map_err(|e| Error::Io(e.to_string()))?;
            let value: StateValue =
                serde_json::from_slice(&raw).map_err(|e| Error::Io(e.to_string()))?;
            let kg = KeyGroupId(d.kg);
            if kg.0 >= num_keygroups {
                return Err(Error::IncompleteTable(kg));
            }
            store.adopt(kg, BTreeMap::from([(key, value)]));
        }
        Ok(store)
    }
}

/// Combines two partial values for the same key.
pub(crate) fn merge_values(into: &mut StateValue, other: &StateValue) {
    match (into, other) {
        (StateValue::Sum { sum, count }, StateValue::Sum { sum: s2, count: c2 }) => {
            *sum += s2;
            *count += c2;
        }
        (
            StateValue::Panes { panes, fired_until },
            StateValue::Panes {
                panes: p2,
                fired_until: f2,
            },
        ) => {
            for (k, v) in p2 {
                *panes.entry(*k).or_default() += v;
            }
            *fired_until = (*fired_until).max(*f2);
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum(v: i64) -> StateValue {
        StateValue::Sum { sum: v, count: 1 }
    }

    fn set(kgs: &[u32]) -> BTreeSet<KeyGroupId> {
        kgs.iter().map(|&k| KeyGroupId(k)).collect()
    }

    #[test]
    fn extract_emits_one_chunk_per_kg_ascending() {
        let mut s = KeyedStateStore::with_owned(8, [KeyGroupId(3), KeyGroupId(4)]);
        s.entries_mut(KeyGroupId(4)).insert(b"k4".to_vec(), sum(9));
        s.entries_mut(KeyGroupId(3)).insert(b"k3".to_vec(), sum(7));
        let chunks = s
            .extract_chunks(&set(&[4, 3]), SubscaleId(1), InstanceId(1), InstanceId(2))
            .unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].keygroup, KeyGroupId(3));
        assert_eq!(chunks[0].entries[&b"k3".to_vec()], sum(7));
        assert_eq!(chunks[1].entries[&b"k4".to_vec()], sum(9));
        assert_eq!(
            s.keygroup_status(KeyGroupId(3)),
            Some(KeyGroupStatus::MigratedOut)
        );
        assert_eq!(
            s.keygroup_status(KeyGroupId(4)),
            Some(KeyGroupStatus::MigratedOut)
        );
    }

    #[test]
    fn empty_kg_still_emits_chunk() {
        let mut s = KeyedStateStore::with_owned(4, [KeyGroupId(0)]);
        let c = s
            .extract_chunks(&set(&[0]), SubscaleId(0), InstanceId(0), InstanceId(1))
            .unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].entries.is_empty());
    }

    #[test]
    fn extracting_twice_is_illegal() {
        let mut s = KeyedStateStore::with_owned(4, [KeyGroupId(1)]);
        s.extract_chunks(&set(&[1]), SubscaleId(0), InstanceId(0), InstanceId(1))
            .unwrap();
        let err = s
            .extract_chunks(&set(&[1]), SubscaleId(0), InstanceId(0), InstanceId(1))
            .unwrap_err();
        assert!(matches!(err, Error::IllegalStateTransition { .. }));
    }

    #[test]
    fn install_then_activate_controls_readability() {
        let mut src = KeyedStateStore::with_owned(8, [KeyGroupId(3)]);
        let key = (0..)
            .map(|i| format!("x{i}").into_bytes())
            .find(|k| key_to_keygroup(k, 8) == KeyGroupId(3))
            .unwrap();
        src.entries_mut(KeyGroupId(3)).insert(key.clone(), sum(5));
        let chunk = src
            .extract_chunks(&set(&[3]), SubscaleId(0), InstanceId(1), InstanceId(2))
            .unwrap()
            .remove(0);

        let mut dst = KeyedStateStore::new(8);
        dst.expect_incoming(KeyGroupId(3)).unwrap();
        assert_eq!(
            dst.install_chunk(&chunk).unwrap(),
            KeyGroupStatus::InactiveArrived
        );
        assert!(
            dst.get(&key).is_none(),
            "inactive state must not be readable"
        );
        dst.activate(KeyGroupId(3)).unwrap();
        assert_eq!(dst.get(&key), Some(&sum(5)));
        assert_eq!(
            dst.keygroup_status(KeyGroupId(3)),
            Some(KeyGroupStatus::Active)
        );

        assert_eq!(
            dst.install_chunk(&chunk),
            Err(Error::DuplicateChunk(KeyGroupId(3)))
        );
        let mut other = KeyedStateStore::new(8);
        assert_eq!(
            other.install_chunk(&chunk),
            Err(Error::UnexpectedChunk(KeyGroupId(3)))
        );
    }

    #[test]
    fn status_of_fresh_owned_kg_is_local() {
        let s = KeyedStateStore::with_owned(4, [KeyGroupId(2)]);
        assert_eq!(
            s.keygroup_status(KeyGroupId(2)),
            Some(KeyGroupStatus::Local)
        );
        assert_eq!(s.keygroup_status(KeyGroupId(1)), None);
    }

    #[test]
    fn finalize_normalizes_statuses() {
        let mut s = KeyedStateStore::with_owned(4, [KeyGroupId(0)]);
        s.extract_chunks(&set(&[0]), SubscaleId(0), InstanceId(0), InstanceId(1))
            .unwrap();
        s.expect_incoming(KeyGroupId(1)).unwrap();
        s.install_chunk(&StateChunk {
            subscale_id: SubscaleId(0),
            keygroup: KeyGroupId(1),
            entries: BTreeMap::new(),
            source: InstanceId(3),
            target: InstanceId(0),
        })
        .unwrap();
        s.activate(KeyGroupId(1)).unwrap();
        s.finalize();
        assert_eq!(s.keygroup_status(KeyGroupId(0)), None);
        assert_eq!(
            s.keygroup_status(KeyGroupId(1)),
            Some(KeyGroupStatus::Local)
        );
    }

    #[test]
    fn dump_and_load_round_trip() {
        let mut s = KeyedStateStore::new(16);
        for i in 0..20 {
            let key = format!("key{i}").into_bytes();
            let kg = key_to_keygroup(&key, 16);
            s.adopt(kg, BTreeMap::from([(key, sum(i))]));
        }
        let mut buf = Vec::new();
        s.dump(&mut buf).unwrap();
        let back = KeyedStateStore::load(16, buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    proptest::proptest! {
        /// Conservation: values at the target after activation equal values at
        /// the source before extraction.
        #[test]
        fn migration_conserves_entries(vals in proptest::collection::btree_map(0u32..200, -1000i64..1000, 0..60)) {
            let k = 8;
            let mut src = KeyedStateStore::with_owned(k, (0..k).map(KeyGroupId));
            for (i, v) in &vals {
                let key = format!("k{i}").into_bytes();
                let kg = src.keygroup_of(&key);
                src.entries_mut(kg).insert(key, sum(*v));
            }
            let before: BTreeMap<_, _> = src.readable_entries().map(|(_, k, v)| (k.clone(), v.clone())).collect();
            let all: BTreeSet<_> = (0..k).map(KeyGroupId).collect();
            let chunks = src.extract_chunks(&all, SubscaleId(0), InstanceId(0), InstanceId(1)).unwrap();
            let mut dst = KeyedStateStore::new(k);
            for c in &chunks {
                dst.expect_incoming(c.keygroup).unwrap();
                dst.install_chunk(c).unwrap();
                dst.activate(c.keygroup).unwrap();
            }
            let after: BTreeMap<_, _> = dst.readable_entries().map(|(_, k, v)| (k.clone(), v.clone())).collect();
            proptest::prop_assert_eq!(before, after);
            proptest::prop_assert_eq!(src.readable_key_count(), 0);
        }
    }
}
