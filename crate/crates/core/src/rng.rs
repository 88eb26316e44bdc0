//! Seeding rule shared by every stochastic routine.
//!
//! All randomness derives from one `u64` root seed. A component that needs
//! an independent generator gets `ChaCha8Rng::seed_from_u64(root)` switched
//! to a dedicated stream with [`stream`]. Stream ids are fixed per purpose
//! (see the constants below, combined with a simulation or draw index), so
//! results do not depend on scheduling or worker count.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_OBSERVATIONS: u64 = 1;
pub const STREAM_SIMULATIONS: u64 = 2;
pub const STREAM_CLUSTERING: u64 = 3;
pub const STREAM_SUBSAMPLE: u64 = 4;
pub const STREAM_EXTRAPOLATION: u64 = 5;
pub const STREAM_DAY_SUBSAMPLE: u64 = 6;

/// Generator for `(purpose, index)` under `root`.
///
/// The ChaCha stream id is `purpose << 40 | index`.
pub fn stream(root: u64, purpose: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream((purpose << 40) | (index & ((1 << 40) - 1)));
    rng
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
