use sha2::{Digest, Sha256};

/// First eight bytes of the SHA-256 of the values' bit patterns.
pub(crate) fn fingerprint_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}
