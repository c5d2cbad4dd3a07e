//! Ramp-feature in-context Lasso and its transformer emulation.
//!
//! The pipeline: sample a universal feature bank from a spectral measure
//! ([`features`]), pose the in-context Lasso over those features and solve it
//! with proximal gradient ([`lasso`]), build a transformer whose forward pass
//! reproduces those iterations with certified per-block residuals
//! ([`transformer`]), and drive end-to-end episodes and risk sweeps
//! ([`harness`]).

pub mod features;
pub mod harness;
pub mod lasso;
pub mod transformer;

pub const SCHEMA_VERSION: u32 = 1;

/// Deterministic RNG streams: one root seed fans out into independent
/// substreams keyed by a tag path, so parallel tasks never share state.
pub mod seeding {
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// An RNG for the substream addressed by `tags` under `root`.
    pub fn stream_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
        let mut state = splitmix64(root ^ 0x6a09_e667_f3bc_c908);
        for &t in tags {
            state = splitmix64(state ^ splitmix64(t.wrapping_add(0x510e_527f_ade6_82d1)));
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}
