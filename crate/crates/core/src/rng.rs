//! Seeded randomness. All streams are ChaCha8 so results do not depend on
//! the platform's default generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the master seed.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn normal<S: Real, R: Rng + ?Sized>(rng: &mut R) -> S {
    S::of(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_tensor<S: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
