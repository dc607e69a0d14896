//! 64-bit FNV-1a hashing for seed derivation and config fingerprints.
//!
//! Artifact metadata embeds these values, so they must be stable across runs,
//! builds and platforms. `std::hash::DefaultHasher` is documented as unstable
//! across releases, hence the hand-rolled constant implementation.

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(OFFSET_BASIS)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
    }

    /// Field separator. 0xFF never occurs in UTF-8 text, so hashed fields
    /// cannot collide by shifting bytes across a boundary.
    pub fn sep(&mut self) {
        self.write(&[0xFF]);
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}
