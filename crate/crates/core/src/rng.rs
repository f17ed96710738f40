//! Reproducible random streams.
//!
//! Every trial gets a ChaCha8 stream keyed by `(experiment, seed)`: the seed
//! selects the key and a hash of the experiment name selects the stream, so
//! draws are reproducible and independent across experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type TrialRng = ChaCha8Rng;

/// Stream for one trial of a named experiment.
pub fn trial_rng(experiment: &str, seed: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(experiment.as_bytes()));
    rng
}

/// Sub-stream derived from a trial stream's key, e.g. for data generation
/// that must not shift the algorithm's draws.
pub fn substream(experiment: &str, seed: u64, purpose: &str) -> TrialRng {
    trial_rng(&format!("{experiment}/{purpose}"), seed)
}

/// First eight bytes of SHA-256, stable across platforms and toolchains.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}
