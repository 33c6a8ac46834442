//! Counter-based keyed uniform stream for DARE.
//!
//! `u(seed, stream, name, index)`:
//!
//! ```text
//! h = FNV-1a-64(name bytes)
//! z = mix(seed ^ mix(stream ^ mix(h)))
//! z = mix(z ^ index)
//! u = (z >> 11) · 2^-53                       in [0, 1)
//! ```
//!
//! where `mix` is the SplitMix64 step (add 0x9E3779B97F4A7C15, then the
//! 30/27/31 xor-shift-multiply finalizer). An element is dropped when
//! `u < drop_rate`. `stream` is the task vector's position in the merge, so
//! each fine-tuned model gets an independent drop pattern. Changing any of
//! this changes merge outputs; bump [`DARE_STREAM_VERSION`] if you do.

pub const DARE_STREAM_VERSION: &str = "fnv1a-splitmix64-v1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Per-tensor key; combine with element indices through [`KeyedStream::uniform`].
#[derive(Debug, Clone, Copy)]
pub struct KeyedStream {
    key: u64,
}

impl KeyedStream {
    pub fn new(seed: u64, stream: u64, name: &str) -> Self {
        Self {
            key: mix(seed ^ mix(stream ^ mix(fnv1a(name.as_bytes())))),
        }
    }

    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        let z = mix(self.key ^ index);
        (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
