//! Synthetic 2-D datasets.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// Isotropic Gaussians with centers evenly spaced on a circle.
    GaussianMixture { components: usize, radius: f64, std: f64 },
    TwoMoons { noise: f64 },
    SwissRoll2d { noise: f64 },
}

impl DatasetKind {
    /// The eight-Gaussian ring used as the default experiment.
    pub fn eight_gaussians() -> Self {
        DatasetKind::GaussianMixture { components: 8, radius: 2.0, std: 0.1 }
    }

    pub fn two_gaussians() -> Self {
        DatasetKind::GaussianMixture { components: 2, radius: 1.5, std: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { kind: DatasetKind::eight_gaussians(), size: 20_000, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn generate<S: Real>(&self) -> Result<Tensor<S>> {
        generate(self.kind, self.size, self.seed)
    }
}

pub fn generate<S: Real>(kind: DatasetKind, n: usize, seed: u64) -> Result<Tensor<S>> {
    sample(kind, n, seed, false)
}

/// Like [`generate`] but with every mixture component (or moon) drawn equally
/// often, which removes count noise from evaluation references.
pub fn generate_balanced<S: Real>(kind: DatasetKind, n: usize, seed: u64) -> Result<Tensor<S>> {
    sample(kind, n, seed, true)
}

fn sample<S: Real>(kind: DatasetKind, n: usize, seed: u64, balanced: bool) -> Result<Tensor<S>> {
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(2 * n);
    match kind {
        DatasetKind::GaussianMixture { components, radius, std } => {
            if components == 0 || std < 0.0 {
                return Err(Error::Config("gaussian mixture needs >= 1 component and std >= 0".into()));
            }
            for k in 0..n {
                let c = if balanced { k % components } else { rng.random_range(0..components) };
                let angle = 2.0 * PI * c as f64 / components as f64;
                let nx: f64 = normal(&mut rng);
                let ny: f64 = normal(&mut rng);
                data.push(radius * angle.cos() + std * nx);
                data.push(radius * angle.sin() + std * ny);
            }
        }
        DatasetKind::TwoMoons { noise } => {
            for k in 0..n {
                let upper = if balanced { k % 2 == 0 } else { rng.random_bool(0.5) };
                let s: f64 = rng.random_range(0.0..PI);
                let (x, y) = if upper { (s.cos(), s.sin()) } else { (1.0 - s.cos(), 0.5 - s.sin()) };
                let nx: f64 = normal(&mut rng);
                let ny: f64 = normal(&mut rng);
                // Centre and scale to roughly unit variance.
                data.push((x - 0.5) * 1.5 + noise * nx);
                data.push((y - 0.25) * 1.5 + noise * ny);
            }
        }
        DatasetKind::SwissRoll2d { noise } => {
            for _ in 0..n {
                let s: f64 = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let nx: f64 = normal(&mut rng);
                let ny: f64 = normal(&mut rng);
                data.push(s * s.cos() / 5.0 + noise * nx);
                data.push(s * s.sin() / 5.0 + noise * ny);
            }
        }
    }
    Tensor::new(vec![n, 2], data.into_iter().map(S::of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        for kind in [DatasetKind::eight_gaussians(), DatasetKind::TwoMoons { noise: 0.05 }, DatasetKind::SwissRoll2d { noise: 0.05 }] {
            let a = generate::<f64>(kind, 100, 3).unwrap();
            assert_eq!(a, generate::<f64>(kind, 100, 3).unwrap());
            assert_ne!(a, generate::<f64>(kind, 100, 4).unwrap());
            assert_eq!(a.shape(), &[100, 2]);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn balanced_mixture_has_equal_counts() {
        let d = generate_balanced::<f64>(DatasetKind::eight_gaussians(), 800, 2).unwrap();
        let mut counts = [0usize; 8];
        for i in 0..800 {
            let angle = d.row(i)[1].atan2(d.row(i)[0]).rem_euclid(2.0 * PI);
            counts[((angle / (2.0 * PI / 8.0)).round() as usize) % 8] += 1;
        }
        assert_eq!(counts, [100; 8]);
    }

    #[test]
    fn ring_points_sit_near_radius() {
        let d = generate::<f64>(DatasetKind::eight_gaussians(), 2000, 1).unwrap();
        let mean_r = (0..2000).map(|i| d.row(i)[0].hypot(d.row(i)[1])).sum::<f64>() / 2000.0;
        assert!((mean_r - 2.0).abs() < 0.05);
    }
}
