//! Stable 64-bit FNV-1a hashing.
//!
//! Used wherever hashes must be reproducible across runs and builds (feature
//! hashing, artifact cache keys); the std hasher makes no such guarantee.

const OFFSET: u64 = 0xcbf29ce484222325;
const PRIME: u64 = 0x100000001b3;

#[derive(Debug, Clone)]
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Hex digest of a byte string, for content-addressed artifact names.
pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    // Two passes with different suffixes widen the key to 128 bits.
    let lo = fnv1a(bytes);
    let hi = {
        let mut h = Fnv1a::new();
        h.write(bytes).write(b"#hi");
        h.finish()
    };
    format!("{hi:016x}{lo:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn incremental_matches_oneshot() {
        let mut h = Fnv1a::new();
        h.write(b"foo").write(b"bar");
        assert_eq!(h.finish(), fnv1a(b"foobar"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(hex_digest(b"x"), hex_digest(b"x"));
        assert_ne!(hex_digest(b"x"), hex_digest(b"y"));
        assert_eq!(hex_digest(b"x").len(), 32);
    }
}
