//! Seed derivation. Every stochastic draw in the crate flows from one
//! explicit u64 seed through stateless stream derivation, so any component
//! can be regenerated in isolation and results are platform-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 — used only to whiten (seed, stream-label) pairs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a seed with a structured label (component, index) into a child seed.
pub fn derive(seed: u64, component: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ component.wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}

/// Counter-based stream for a (seed, component, index) label.
pub fn stream(seed: u64, component: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, component, index))
}

/// Stream labels for the crate's stochastic components.
pub mod labels {
    pub const PARAM_INIT: u64 = 1;
    pub const GUMBEL: u64 = 2;
    pub const SYNTH_KINEMATICS: u64 = 3;
    pub const SYNTH_VISUAL: u64 = 4;
    pub const SYNTH_OCCLUSION: u64 = 5;
    pub const SYNTH_PROJECTION: u64 = 6;
    pub const BATCH_ORDER: u64 = 7;
    pub const SYNTH_SCRIPT: u64 = 8;
}
