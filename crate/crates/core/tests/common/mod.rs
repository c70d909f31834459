#![allow(dead_code)]

use std::path::Path;

use hybrid_synapse::trainer::mnist::write_idx;
use hybrid_synapse::trainer::Split;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a small, learnable 28x28 IDX dataset: class `c` lights up a
/// horizontal bar at row `2 + 2c` and a vertical bar at column `25 - 2c`.
pub fn write_fixture(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        let mut images = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i * 7 + i / 10) % 10;
            for y in 0..28 {
                for x in 0..28 {
                    let on = y == 2 + 2 * c || y == 3 + 2 * c || x == 25 - 2 * c;
                    let base: u8 = if on { 200 } else { 10 };
                    images.push(base.saturating_add(rng.gen_range(0..40)));
                }
            }
            labels.push(c as u8);
        }
        write_idx(dir, split, 28, 28, &images, &labels).unwrap();
    }
}
