//! Deterministic, schedule-independent random streams.
//!
//! Every random field in the engine is drawn from a stream addressed by a
//! `(master_seed, purpose, member, slot)` key. The key is expanded into a
//! ChaCha12 cipher seed, so a stream's content depends only on its key and
//! never on which worker drew it first or in what order. Generating members
//! in any order, or in parallel, therefore yields bit-identical values.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer; the mixing primitive for key expansion and content
/// hashes.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Namespaces keeping unrelated consumers of the same master seed disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    /// Initial latent noise `z` for an ensemble member (per rollout slot).
    InitialNoise,
    /// Fresh OU/GP innovations along the lead-time grid.
    Innovation,
    /// Training-time draws: sigma, lead time, epsilon, example selection.
    Training,
    /// Dropout masks.
    Dropout,
    /// Parameter initialization.
    ParamInit,
    /// Synthetic-data forcing.
    ToyForcing,
    /// Anything test-local.
    Test,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::InitialNoise => 1,
            StreamPurpose::Innovation => 2,
            StreamPurpose::Training => 3,
            StreamPurpose::Dropout => 4,
            StreamPurpose::ParamInit => 5,
            StreamPurpose::ToyForcing => 6,
            StreamPurpose::Test => 7,
        }
    }
}

/// Address of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub purpose: StreamPurpose,
    pub member: u64,
    pub slot: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, purpose: StreamPurpose, member: u64, slot: u64) -> Self {
        StreamKey {
            master_seed,
            purpose,
            member,
            slot,
        }
    }

    /// Expand the key into a 32-byte cipher seed by chaining the mixer over
    /// the key fields.
    fn seed_bytes(&self) -> [u8; 32] {
        let mut state = mix64(self.master_seed ^ 0x6366_6566_3164_7276); // domain constant
        for field in [self.purpose.tag(), self.member, self.slot] {
            state = mix64(state ^ field);
        }
        let mut out = [0u8; 32];
        for chunk in 0..4 {
            state = mix64(state);
            out[chunk * 8..(chunk + 1) * 8].copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    /// The stream itself.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.seed_bytes())
    }
}

/// Slot encoding for rollout noise: autoregressive block `j`, time index `i`
/// within the block. Index 0 is the block's initial draw; indices `>= 1` are
/// per-time innovations. Keeping the stride wide means a block-`j` initial
/// draw has the same slot whether it came from an ARCI rollout or the plain
/// AR baseline, which is what makes their outputs bit-comparable.
pub const BLOCK_SLOT_STRIDE: u64 = 1 << 20;

pub fn rollout_slot(block: usize, time_index: usize) -> u64 {
    debug_assert!((time_index as u64) < BLOCK_SLOT_STRIDE);
    block as u64 * BLOCK_SLOT_STRIDE + time_index as u64
}

/// A `V x H x W` field of standard-normal draws from the given stream,
/// filled in row-major order.
pub fn normal_field(key: StreamKey, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = key.rng();
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec(shape, data).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_field() {
        let key = StreamKey::new(42, StreamPurpose::InitialNoise, 3, 0);
        let a = normal_field(key, (2, 4, 8));
        let b = normal_field(key, (2, 4, 8));
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn members_are_uncorrelated() {
        // Empirical correlation between member streams stays below 0.01
        // over 1e5 paired entries.
        let n = 100_000usize;
        let shape = (1, 1, n);
        let a = normal_field(StreamKey::new(7, StreamPurpose::InitialNoise, 1, 0), shape);
        let b = normal_field(StreamKey::new(7, StreamPurpose::InitialNoise, 2, 0), shape);
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let corr = dot / (na * nb);
        assert!(corr.abs() < 0.01, "cross-member correlation {corr}");
    }

    #[test]
    fn marginal_moments_within_clt_bounds() {
        // 1e6 entries: |mean| < 0.004, |var - 1| < 0.005 (3-sigma CLT bounds).
        let n = 1_000_000usize;
        let field = normal_field(StreamKey::new(11, StreamPurpose::Test, 0, 0), (1, 1, n));
        let mean = field.iter().sum::<f64>() / n as f64;
        let var = field.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn purpose_and_slot_separate_streams() {
        let base = StreamKey::new(5, StreamPurpose::InitialNoise, 0, 0);
        let other_purpose = StreamKey::new(5, StreamPurpose::Innovation, 0, 0);
        let other_slot = StreamKey::new(5, StreamPurpose::InitialNoise, 0, 1);
        let f0 = normal_field(base, (1, 2, 2));
        assert_ne!(f0, normal_field(other_purpose, (1, 2, 2)));
        assert_ne!(f0, normal_field(other_slot, (1, 2, 2)));
    }

    #[test]
    fn rollout_slots_disjoint_across_blocks() {
        assert_eq!(rollout_slot(0, 0), 0);
        assert_eq!(rollout_slot(1, 0), BLOCK_SLOT_STRIDE);
        assert!(rollout_slot(0, 40) < rollout_slot(1, 0));
    }
}
