//! Deterministic seed derivation and Gaussian draws.

use omninft_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Generator used for every seeded draw in the crate.
pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of identifiers into one seed. Order-sensitive and stable
/// across platforms and releases.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal tensor of the given shape.
pub fn gaussian(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Domain tags mixed into derived seeds so different consumers never share a stream.
pub mod tag {
    pub const PRIOR: u64 = 0x5052_494F;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const CONFLICT: u64 = 0x434F_4E46;
    pub const SAMPLE: u64 = 0x5341_4D50;
    pub const INIT: u64 = 0x494E_4954;
    pub const PROBE: u64 = 0x5052_4F42;
}
