//! Seed-derived RNG streams. Every concurrent task draws from its own
//! ChaCha stream keyed by (master seed, task tag), so results do not depend
//! on scheduling and reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TaskRng = ChaCha8Rng;

pub fn task_rng(seed: u64, tag: u64) -> TaskRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.into());
    rng
}
