//! Seed derivation. Every random stream in the crate comes from one root
//! seed mixed with a component name and a tuple of indices (epoch, video,
//! frame, view, ...), so any slice of a run can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, continuing from `state`.
pub fn fnv1a64_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `seed = splitmix(fnv1a(root_le || component || 0xff || idx_0_le || ...))`
pub fn derive_seed(root: u64, component: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a64_extend(FNV_OFFSET, &root.to_le_bytes());
    h = fnv1a64_extend(h, component.as_bytes());
    h = fnv1a64_extend(h, &[0xff]);
    for i in indices {
        h = fnv1a64_extend(h, &i.to_le_bytes());
    }
    splitmix64(h)
}

pub fn derive_rng(root: u64, component: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, component, indices))
}
