//! Seeded random streams. Every consumer derives its own ChaCha stream from a
//! root seed and a purpose tag, so adding draws in one place never shifts the
//! numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

pub type Rng = ChaCha8Rng;

/// Purpose tags for [`stream`].
pub mod tag {
    pub const ENCODER: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const LEARNER_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const TRAIN_NOISE: u64 = 6;
    pub const PREDICT: u64 = 7;
    pub const SHIFT: u64 = 8;
}

/// Independent stream `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(tag)));
    rng.set_stream(index);
    rng
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `rows × cols` tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        normal_vec(rng, rows * cols).into_iter().map(|v| v * std).collect(),
    )
}
