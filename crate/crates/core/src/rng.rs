//! Seeded randomness.
//!
//! Every random draw in the toolkit goes through [`keyed`] and
//! [`sample_without_replacement`], so a (seed, key) pair pins down the exact
//! sequence. The generator is ChaCha8 with the key mapped to the ChaCha
//! stream id; [`ALGORITHM`] is echoed in emitted experiment manifests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Identifier of the sampling algorithm, written into experiment outputs.
pub const ALGORITHM: &str = "chacha8-stream/fisher-yates-prefix/rand-0.9";

/// Generator for `seed`, on the independent stream `key`.
pub fn keyed(seed: u64, key: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Generator for `seed` on stream 0.
pub fn seeded(seed: u64) -> SeededRng {
    keyed(seed, 0)
}

/// Uniformly samples `k` distinct indices from `0..n`, in draw order.
///
/// Runs the first `k` steps of a Fisher-Yates shuffle.
pub fn sample_without_replacement<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n} without replacement");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Shuffles `items` in place with the same Fisher-Yates prefix walk.
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    let n = items.len();
    for i in 0..n.saturating_sub(1) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}
