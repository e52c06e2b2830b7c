//! Fast autoencoder-based approximate projections onto nonconvex feasible
//! sets, solver networks that use them, and a benchmark harness comparing
//! both against classical feasibility-restoration solvers.

pub mod adam;
pub mod amortized;
pub mod bench;
pub mod classic;
pub mod fab;
pub mod findiff;
pub mod geometry;
pub mod kvconfig;
pub mod mapping;
pub mod nn;
pub mod persist;
pub mod problems;
pub mod spatial;
pub mod tape;
pub mod tensor;

pub use tensor::{Matrix, TensorError};

/// Stable sub-seed derivation so independent RNG streams never collide.
/// FNV-1a over the tag, mixed into the base seed.
pub fn subseed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h
}

#[cfg(test)]
mod tests {
    use super::subseed;

    #[test]
    fn subseeds_differ_by_tag_and_base() {
        assert_ne!(subseed(0, "a"), subseed(0, "b"));
        assert_ne!(subseed(0, "a"), subseed(1, "a"));
        assert_eq!(subseed(3, "x"), subseed(3, "x"));
    }
}
