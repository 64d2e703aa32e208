use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::key_to_keygroup;
use crate::error::{Error, Result};
use crate::ids::{InstanceId, KeyGroupId};

/// Key-group → owning downstream instance, as held by one predecessor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    version: u64,
    owner: Vec<Option<InstanceId>>,
}

impl RoutingTable {
    /// A total table from an explicit owner list indexed by key-group.
    pub fn from_owners(owners: Vec<InstanceId>) -> Self {
        RoutingTable {
            version: 0,
            owner: owners.into_iter().map(Some).collect(),
        }
    }

    /// Uniform contiguous assignment `owner(kg) = instances[⌊kg·n/K⌋]`.
    pub fn uniform(num_keygroups: u32, instances: &[InstanceId]) -> Self {
        let n = instances.len() as u64;
        let owners = (0..num_keygroups as u64)
            .map(|kg| instances[(kg * n / num_keygroups as u64) as usize])
            .collect();
        Self::from_owners(owners)
    }

    /// Table with holes; used to exercise `IncompleteTable`.
    pub fn partial(owner: Vec<Option<InstanceId>>) -> Self {
        RoutingTable { version: 0, owner }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_keygroups(&self) -> u32 {
        self.owner.len() as u32
    }

    pub fn owner_of(&self, kg: KeyGroupId) -> Result<InstanceId> {
        self.owner
            .get(kg.index())
            .copied()
            .flatten()
            .ok_or(Error::IncompleteTable(kg))
    }

    pub fn lookup_route(&self, key: &[u8]) -> Result<InstanceId> {
        self.owner_of(key_to_keygroup(key, self.num_keygroups()))
    }

    /// Applies reassignments atomically and bumps the version by one.
    pub fn apply_route_update(
        &mut self,
        reassignments: &BTreeMap<KeyGroupId, InstanceId>,
    ) -> Result<u64> {
        if let Some((&kg, _)) = reassignments
            .iter()
            .find(|(kg, _)| kg.index() >= self.owner.len())
        {
            return Err(Error::IncompleteTable(kg));
        }
        for (kg, inst) in reassignments {
            self.owner[kg.index()] = Some(*inst);
        }
        self.version += 1;
        Ok(self.version)
    }

    pub fn owners(&self) -> impl Iterator<Item = (KeyGroupId, Option<InstanceId>)> + '_ {
        self.owner
            .iter()
            .enumerate()
            .map(|(i, o)| (KeyGroupId(i as u32), *o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ids(n: u32) -> Vec<InstanceId> {
        (0..n).map(InstanceId).collect()
    }

    #[test]
    fn uniform_owner_formula_for_k4_two_instances() {
        let t = RoutingTable::uniform(4, &ids(2));
        let owners: Vec<_> = t.owners().map(|(_, o)| o.unwrap().0).collect();
        assert_eq!(owners, vec![0, 0, 1, 1]);
    }

    #[test]
    fn lookup_and_update() {
        let mut t = RoutingTable::from_owners(vec![InstanceId(0), InstanceId(1)]);
        let key_in_kg0 = (0u32..)
            .map(|i| format!("k{i}").into_bytes())
            .find(|k| key_to_keygroup(k, 2) == KeyGroupId(0))
            .unwrap();
        assert_eq!(t.lookup_route(&key_in_kg0).unwrap(), InstanceId(0));
        let v = t
            .apply_route_update(&BTreeMap::from([(KeyGroupId(0), InstanceId(2))]))
            .unwrap();
        assert_eq!(v, 1);
        assert_eq!(t.lookup_route(&key_in_kg0).unwrap(), InstanceId(2));
        assert_eq!(t.owner_of(KeyGroupId(1)).unwrap(), InstanceId(1));
    }

    #[test]
    fn fig4_style_update_moves_two_keygroups() {
        // Five key-groups all on C1; groups 3 and 4 move to C2.
        let c1 = InstanceId(1);
        let c2 = InstanceId(2);
        let mut t = RoutingTable::from_owners(vec![c1; 5]);
        t.apply_route_update(&BTreeMap::from([(KeyGroupId(3), c2), (KeyGroupId(4), c2)]))
            .unwrap();
        assert_eq!(t.owner_of(KeyGroupId(3)).unwrap(), c2);
        assert_eq!(t.owner_of(KeyGroupId(4)).unwrap(), c2);
        assert_eq!(t.owner_of(KeyGroupId(2)).unwrap(), c1);
    }

    #[test]
    fn empty_and_sequential_updates_bump_version() {
        let mut t = RoutingTable::uniform(8, &ids(2));
        let before = t.clone();
        assert_eq!(t.apply_route_update(&BTreeMap::new()).unwrap(), 1);
        assert!(t.owners().eq(before.owners()));
        t.apply_route_update(&BTreeMap::from([(KeyGroupId(0), InstanceId(1))]))
            .unwrap();
        assert_eq!(t.version(), 2);
    }

    #[test]
    fn missing_entry_is_incomplete_table() {
        let t = RoutingTable::partial(vec![Some(InstanceId(0)), None]);
        assert_eq!(
            t.owner_of(KeyGroupId(1)),
            Err(Error::IncompleteTable(KeyGroupId(1)))
        );
    }

    #[test]
    fn random_keys_route_to_unique_owner() {
        let k = 64;
        let t = RoutingTable::uniform(k, &ids(5));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let key: [u8; 8] = rng.random();
            let routed = t.lookup_route(&key).unwrap();
            // Brute force: scan every key-group for the one that holds the key.
            let holders: Vec<_> = (0..k)
                .filter(|&g| key_to_keygroup(&key, k).0 == g)
                .map(|g| t.owner_of(KeyGroupId(g)).unwrap())
                .collect();
            assert_eq!(holders, vec![routed]);
        }
    }
}
