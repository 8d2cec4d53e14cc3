//! 64-bit content digests (FNV-1a).
//!
//! Used for checkpoint integrity, config digests embedded in outputs, and
//! the frozen-teacher parameter fingerprints.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

#[derive(Clone, Debug)]
pub struct Digest64 {
    state: u64,
}

impl Digest64 {
    pub fn new() -> Self {
        Digest64 { state: FNV_OFFSET }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.state ^= u64::from(*b);
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn update_f32(&mut self, values: &[f32]) {
        for v in values {
            self.update(&v.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Digest64 {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot digest of a byte slice.
pub fn digest_bytes(bytes: &[u8]) -> u64 {
    let mut d = Digest64::new();
    d.update(bytes);
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_fnv_vectors() {
        // Reference FNV-1a 64 values.
        assert_eq!(digest_bytes(b""), 0xcbf29ce484222325);
        assert_eq!(digest_bytes(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(digest_bytes(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn f32_digest_is_order_sensitive() {
        let mut a = Digest64::new();
        a.update_f32(&[1.0, 2.0]);
        let mut b = Digest64::new();
        b.update_f32(&[2.0, 1.0]);
        assert_ne!(a.finish(), b.finish());
    }
}
