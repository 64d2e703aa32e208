use crate::ids::KeyGroupId;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Maps a key to its key-group: `fnv1a64(key) mod K`.
pub fn key_to_keygroup(key: &[u8], num_keygroups: u32) -> KeyGroupId {
    assert!(num_keygroups >= 1, "num_keygroups must be positive");
    KeyGroupId((fnv1a64(key) % num_keygroups as u64) as u32)
}

/// Finer split of a key-group used by the fetch-on-demand baseline.
pub fn sub_keygroup(key: &[u8], num_keygroups: u32, fanout: u32) -> u32 {
    ((fnv1a64(key) / num_keygroups as u64) % fanout.max(1) as u64) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Byte-at-a-time reference written from the published FNV-1a definition,
    /// using u128 arithmetic truncated to 64 bits.
    fn reference_fnv(bytes: &[u8]) -> u64 {
        let mut h: u128 = 14695981039346656037;
        for &b in bytes {
            h ^= b as u128;
            h = (h * 1099511628211) & 0xffff_ffff_ffff_ffff;
        }
        h as u64
    }

    #[test]
    fn empty_key_maps_to_offset_basis() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(key_to_keygroup(b"", 128), KeyGroupId(37));
    }

    #[test]
    fn known_vectors() {
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn single_keygroup_is_always_zero() {
        for k in [&b""[..], b"a", b"hello", b"\xff\x00"] {
            assert_eq!(key_to_keygroup(k, 1), KeyGroupId(0));
        }
    }

    #[test]
    fn sub_keygroup_with_fanout_one_is_zero() {
        assert_eq!(sub_keygroup(b"abc", 16, 1), 0);
    }

    proptest::proptest! {
        #[test]
        fn matches_reference(key in proptest::collection::vec(proptest::num::u8::ANY, 0..40), k in 1u32..512) {
            proptest::prop_assert_eq!(fnv1a64(&key), reference_fnv(&key));
            let kg = key_to_keygroup(&key, k);
            proptest::prop_assert!(kg.0 < k);
            proptest::prop_assert_eq!(kg.0 as u64, reference_fnv(&key) % k as u64);
        }
    }
}
