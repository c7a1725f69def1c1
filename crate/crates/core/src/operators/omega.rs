//! Counter-based keep/drop draws for DARE.
//!
//! Each draw is a pure function of `(seed, expert, tensor, block, coordinate)`,
//! so an expert's drop pattern never depends on which other experts are
//! selected or on the order blocks are processed in.

use crate::container::BlockKey;
use crate::costmodel::ExpertId;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draw stream for one `(seed, expert, block)`; `uniform(j)` is the draw of
/// coordinate `j`.
#[derive(Debug, Clone, Copy)]
pub struct OmegaStream {
    prefix: u64,
}

impl OmegaStream {
    pub fn new(seed: u64, expert: ExpertId, key: &BlockKey) -> Self {
        let mut h = mix64(seed.wrapping_add(GOLDEN));
        h = mix64(h ^ (expert.0 as u64).wrapping_mul(GOLDEN));
        h = mix64(h ^ fnv1a(key.tensor.as_bytes()));
        h = mix64(h ^ (key.block_index as u64).wrapping_add(GOLDEN));
        OmegaStream { prefix: h }
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&self, coordinate: u64) -> f64 {
        let z = mix64(self.prefix ^ mix64(coordinate.wrapping_add(GOLDEN)));
        (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// True when coordinate `j` survives a drop with probability `p`.
    #[inline]
    pub fn keep(&self, coordinate: u64, p: f64) -> bool {
        self.uniform(coordinate) >= p
    }
}

/// Keep (`true`) or drop decision for one coordinate.
pub fn derive_omega(seed: u64, expert: ExpertId, key: &BlockKey, coordinate: u64, drop_p: f64) -> bool {
    OmegaStream::new(seed, expert, key).keep(coordinate, drop_p)
}
