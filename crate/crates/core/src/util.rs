use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    // serde_json::Value keeps object keys sorted, which makes the encoding canonical.
    let canonical = serde_json::to_value(value).expect("serializable value");
    let bytes = serde_json::to_vec(&canonical).expect("json encoding");
    hex_string(&Sha256::digest(&bytes))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic per-item seed derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, item: u64) -> u64 {
    let mut z = base ^ item.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
