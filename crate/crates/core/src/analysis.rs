//! Loss-landscape slices, task-vector statistics and a sample-quality metric.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::deme::range_eval_batch;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::merging::TaskVector;
use crate::params::ParamSet;
use crate::rng::{normal, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::training::{cosine_similarity, evaluate_loss, sample_rows, DiffusionBatch, LossTarget, ReweightStrategy};

/// A 2-D affine slice `origin + a u1 + b u2` of parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneBasis<S> {
    pub origin: ParamSet<S>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_schmidt(v1: &[f64], v2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n1 = dot(v1, v1).sqrt();
    let n2 = dot(v2, v2).sqrt();
    if n1 == 0.0 || n2 == 0.0 || !n1.is_finite() || !n2.is_finite() {
        return Err(Error::Degenerate("plane direction has zero or non-finite norm".into()));
    }
    let u1: Vec<f64> = v1.iter().map(|x| x / n1).collect();
    let proj = dot(v2, &u1);
    let mut r: Vec<f64> = v2.iter().zip(&u1).map(|(x, u)| x - proj * u).collect();
    let rn = dot(&r, &r).sqrt();
    // rn / n2 is the sine of the angle between the inputs.
    if rn / n2 < 1e-6 {
        return Err(Error::Degenerate("plane directions are parallel".into()));
    }
    r.iter_mut().for_each(|x| *x /= rn);
    // A second pass removes the residual overlap left by rounding.
    let again = dot(&r, &u1);
    r.iter_mut().zip(&u1).for_each(|(x, u)| *x -= again * u);
    let rn = dot(&r, &r).sqrt();
    r.iter_mut().for_each(|x| *x /= rn);
    Ok((u1, r))
}

fn to_f64<S: Real>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Orthonormal basis of the plane through `origin` spanned by two task vectors.
pub fn orthonormal_plane_basis<S: Real>(origin: &ParamSet<S>, tau1: &TaskVector<S>, tau2: &TaskVector<S>) -> Result<PlaneBasis<S>> {
    origin.check_aligned(tau1.entries())?;
    origin.check_aligned(tau2.entries())?;
    let (u1, u2) = gram_schmidt(&to_f64(&tau1.flatten()), &to_f64(&tau2.flatten()))?;
    Ok(PlaneBasis { origin: origin.clone(), u1, u2 })
}

/// Two random orthonormal directions through `origin`.
pub fn random_plane_basis<S: Real>(origin: &ParamSet<S>, seed: u64) -> Result<PlaneBasis<S>> {
    let mut rng = rng_from_seed(seed);
    let d = origin.total_dim();
    let v1: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let v2: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let (u1, u2) = gram_schmidt(&v1, &v2)?;
    Ok(PlaneBasis { origin: origin.clone(), u1, u2 })
}

impl<S: Real> PlaneBasis<S> {
    /// Parameters at plane coordinates `(a, b)`; `(0, 0)` is the origin exactly.
    pub fn point(&self, a: f64, b: f64) -> Result<ParamSet<S>> {
        if a == 0.0 && b == 0.0 {
            return Ok(self.origin.clone());
        }
        let flat: Vec<S> = self
            .origin
            .flatten()
            .iter()
            .zip(self.u1.iter().zip(&self.u2))
            .map(|(&o, (&x, &y))| S::of(o.to_f64_lossy() + a * x + b * y))
            .collect();
        self.origin.unflatten(&flat)
    }

    /// Coordinates of `params` projected onto the plane.
    pub fn coordinates(&self, params: &ParamSet<S>) -> Result<(f64, f64)> {
        self.origin.check_aligned(params)?;
        let d: Vec<f64> =
            params.flatten().iter().zip(self.origin.flatten()).map(|(p, o)| p.to_f64_lossy() - o.to_f64_lossy()).collect();
        Ok((dot(&d, &self.u1), dot(&d, &self.u2)))
    }

    pub fn gram(&self) -> [[f64; 2]; 2] {
        let c = dot(&self.u1, &self.u2);
        [[dot(&self.u1, &self.u1), c], [c, dot(&self.u2, &self.u2)]]
    }
}

/// Evaluates the epsilon loss on one fixed batch, so every parameter point
/// sees the same data, timesteps and noise.
#[derive(Clone, Debug)]
pub struct LossProbe<'a, S> {
    pub config: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule<S>,
    pub batch: DiffusionBatch<S>,
}

impl<'a, S: Real> LossProbe<'a, S> {
    /// `t` is drawn uniformly from `t_range`, or from `[0, T)` if absent.
    pub fn new(
        config: &'a DenoiserConfig,
        dataset: &Tensor<S>,
        sched: &'a NoiseSchedule<S>,
        t_range: Option<(usize, usize)>,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if eval_samples == 0 || dataset.rows() == 0 {
            return Err(Error::Contract("loss probe needs evaluation samples".into()));
        }
        let mut rng = rng_from_seed(seed);
        let x0 = sample_rows(dataset, eval_samples, &mut rng)?;
        let range = t_range.unwrap_or((0, sched.num_timesteps()));
        let batch = range_eval_batch(&x0, range, sched, rng.random())?;
        Ok(Self { config, sched, batch })
    }

    pub fn loss(&self, params: &ParamSet<S>) -> Result<f64> {
        let v = evaluate_loss(params, self.config, &self.batch, ReweightStrategy::Standard, LossTarget::EpsPrediction, self.sched)?;
        Ok(v.to_f64_lossy())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeGrid {
    /// Shared coordinate values for both axes.
    pub coords: Vec<f64>,
    /// `values[i][j]` is the loss at `(coords[i], coords[j])`; non-finite losses are `+inf`.
    pub values: Vec<Vec<f64>>,
    pub t_range: Option<(usize, usize)>,
    pub extent: f64,
}

/// Default half-width framing two task vectors with some margin.
pub fn default_extent<S: Real>(tau1: &TaskVector<S>, tau2: &TaskVector<S>) -> f64 {
    1.5 * tau1.norm().max(tau2.norm())
}

/// Loss over a `resolution x resolution` grid covering `[-extent, extent]^2`.
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid<S: Real>(
    basis: &PlaneBasis<S>,
    config: &DenoiserConfig,
    dataset: &Tensor<S>,
    sched: &NoiseSchedule<S>,
    t_range: Option<(usize, usize)>,
    resolution: usize,
    extent: f64,
    eval_samples: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if resolution < 2 {
        return Err(Error::Config(format!("resolution must be >= 2, got {resolution}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::Config(format!("extent must be positive, got {extent}")));
    }
    let probe = LossProbe::new(config, dataset, sched, t_range, eval_samples, seed)?;
    let r = resolution;
    let coords: Vec<f64> = (0..r)
        .map(|i| {
            let c = extent * ((2 * i) as f64 / (r - 1) as f64 - 1.0);
            if 2 * i + 1 == r {
                0.0
            } else {
                c
            }
        })
        .collect();
    let cells: Vec<f64> = (0..r * r)
        .into_par_iter()
        .map(|k| {
            let params = basis.point(coords[k / r], coords[k % r])?;
            let v = probe.loss(&params)?;
            Ok(if v.is_finite() { v } else { f64::INFINITY })
        })
        .collect::<Result<_>>()?;
    let values = cells.chunks(r).map(<[f64]>::to_vec).collect();
    Ok(LandscapeGrid { coords, values, t_range, extent })
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.coords.len()
    }

    /// Mean finite-difference gradient norm over the grid (central differences
    /// inside, one-sided at the border).
    pub fn gradient_proxy(&self) -> f64 {
        let r = self.resolution();
        let h = self.coords[1] - self.coords[0];
        let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / (span as f64 * h);
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..r {
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(r - 1));
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(r - 1));
                let ga = diff(self.values[i0][j], self.values[i1][j], i1 - i0);
                let gb = diff(self.values[i][j0], self.values[i][j1], j1 - j0);
                total += ga.hypot(gb);
            }
        }
        total / (r * r) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub vector: usize,
    pub source_range: usize,
    pub name: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TvStatistics {
    pub layers: Vec<LayerStats>,
    pub cosine: Vec<Vec<f64>>,
}

/// Per-parameter summaries of `|tau|` and the pairwise cosine matrix.
pub fn tv_statistics<S: Real>(task_vectors: &[TaskVector<S>]) -> Result<TvStatistics> {
    if task_vectors.is_empty() {
        return Err(Error::Contract("need at least one task vector".into()));
    }
    let mut layers = Vec::new();
    for (v, tv) in task_vectors.iter().enumerate() {
        for (name, t) in tv.entries().iter() {
            let mut mags: Vec<f64> = t.data().iter().map(|x| x.to_f64_lossy().abs()).collect();
            if mags.is_empty() {
                continue;
            }
            mags.sort_by(f64::total_cmp);
            let n = mags.len();
            let median = if n % 2 == 1 { mags[n / 2] } else { 0.5 * (mags[n / 2 - 1] + mags[n / 2]) };
            layers.push(LayerStats {
                vector: v,
                source_range: tv.source_range(),
                name: name.clone(),
                min: mags[0],
                median,
                max: mags[n - 1],
                mean: mags.iter().sum::<f64>() / n as f64,
                norm: mags.iter().map(|x| x * x).sum::<f64>().sqrt(),
            });
        }
    }
    let flat: Vec<Vec<S>> = task_vectors.iter().map(TaskVector::flatten).collect();
    let k = flat.len();
    let cosine = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { cosine_similarity(&flat[i], &flat[j]) }).collect())
        .collect();
    Ok(TvStatistics { layers, cosine })
}

/// Wasserstein-1 distance between two 1-D empirical distributions, computed
/// as the integral of `|F_a - F_b|`.
fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    total
}

/// Mean 1-D Wasserstein-1 distance over `num_projections` random unit directions.
pub fn sliced_wasserstein<S: Real>(a: &Tensor<S>, b: &Tensor<S>, num_projections: usize, seed: u64) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Dimension(format!("sample sets {:?} and {:?} differ in width", a.shape(), b.shape())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Contract("each sample set needs at least 2 rows".into()));
    }
    if num_projections == 0 {
        return Err(Error::Config("num_projections must be positive".into()));
    }
    let d = a.cols();
    let mut rng = rng_from_seed(seed);
    let dirs: Vec<Vec<f64>> = (0..num_projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let n = dot(&v, &v).sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let project = |x: &Tensor<S>, u: &[f64]| -> Vec<f64> {
        (0..x.rows()).map(|r| x.row(r).iter().zip(u).map(|(v, w)| v.to_f64_lossy() * w).sum()).collect()
    };
    let dists: Vec<f64> = dirs.par_iter().map(|u| wasserstein_1d(&mut project(a, u), &mut project(b, u))).collect();
    Ok(dists.iter().sum::<f64>() / num_projections as f64)
}
