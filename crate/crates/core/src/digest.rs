//! Content checksums and stable (platform-independent) hashing.

use sha2::{Digest, Sha256};

/// Name recorded in manifests for [`sha256_hex`].
pub const CHECKSUM_ALGO: &str = "sha256";

/// Lowercase hex SHA-256 of `data`.
pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, starting from `state`.
fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        state ^= u64::from(*b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// splitmix64 finalizer; spreads FNV output across all 64 bits.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit hash of a sequence of byte fields. Field boundaries are
/// length-delimited so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn stable_hash(seed: u64, fields: &[&[u8]]) -> u64 {
    let mut state = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for field in fields {
        state = fnv1a(state, &(field.len() as u64).to_le_bytes());
        state = fnv1a(state, field);
    }
    mix64(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stable_hash_is_field_delimited() {
        let a = stable_hash(7, &[b"ab", b"c"]);
        let b = stable_hash(7, &[b"a", b"bc"]);
        assert_ne!(a, b);
        assert_eq!(a, stable_hash(7, &[b"ab", b"c"]));
        assert_ne!(a, stable_hash(8, &[b"ab", b"c"]));
    }
}
