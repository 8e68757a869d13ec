//! Noise schedules, the closed-form forward process, and reverse samplers.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::{normal_tensor, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Parameters of a linear beta schedule. This is what checkpoints record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// DDPM's `1e-4..0.02` over 1000 steps, rescaled by `1000 / T`.
    pub fn rescaled(num_timesteps: usize) -> Self {
        let k = 1000.0 / num_timesteps as f64;
        Self { num_timesteps, beta_start: 1e-4 * k, beta_end: 0.02 * k }
    }

    pub fn build<S: Real>(&self) -> Result<NoiseSchedule<S>> {
        make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::rescaled(100)
    }
}

/// Precomputed per-timestep tables. Index `t` runs over `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    config: ScheduleConfig,
    pub beta: Vec<S>,
    pub alpha: Vec<S>,
    pub alpha_bar: Vec<S>,
    pub snr: Vec<S>,
}

pub fn make_linear_schedule<S: Real>(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<S>> {
    if num_timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = if num_timesteps == 1 {
        vec![beta_start]
    } else {
        let span = (num_timesteps - 1) as f64;
        (0..num_timesteps).map(|t| beta_start + (beta_end - beta_start) * t as f64 / span).collect()
    };
    let beta: Vec<S> = betas.iter().map(|&b| S::of(b)).collect();
    let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
    let mut alpha_bar = Vec::with_capacity(num_timesteps);
    let mut acc = S::one();
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let snr = alpha_bar.iter().map(|&ab| ab / (S::one() - ab)).collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig { num_timesteps, beta_start, beta_end },
        beta,
        alpha,
        alpha_bar,
        snr,
    })
}

impl<S: Real> NoiseSchedule<S> {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn num_timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps() {
            return Err(Error::Index { index: t as i64, bound: self.num_timesteps() });
        }
        Ok(())
    }

    /// `alpha_bar[t]`, with the convention `alpha_bar[-1] = 1`.
    pub fn alpha_bar_at(&self, t: i64) -> Result<S> {
        if t == -1 {
            return Ok(S::one());
        }
        if t < -1 || t as usize >= self.num_timesteps() {
            return Err(Error::Index { index: t, bound: self.num_timesteps() });
        }
        Ok(self.alpha_bar[t as usize])
    }
}

fn same_shape<S: Real>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<S: Real>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule<S>) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = sched.alpha_bar[t];
    x0.scale(ab.sqrt()).axpy((S::one() - ab).sqrt(), eps)
}

/// Row-wise forward process with one timestep per row.
pub fn q_sample_rows<S: Real>(x0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, sched: &NoiseSchedule<S>) -> Result<Tensor<S>> {
    same_shape(x0, eps, "q_sample_rows")?;
    if ts.len() != x0.rows() {
        return dim_err(format!("{} timesteps for {} rows", ts.len(), x0.rows()));
    }
    let c = x0.cols();
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar[t];
        let (sa, sn) = (ab.sqrt(), (S::one() - ab).sqrt());
        for j in 0..c {
            data.push(sa * x0.data()[i * c + j] + sn * eps.data()[i * c + j]);
        }
    }
    Tensor::new(x0.shape().to_vec(), data)
}

/// One ancestral DDPM reverse step. At `t = 0` the noise argument is ignored.
pub fn ddpm_step<S: Real>(
    x_t: &Tensor<S>,
    t: usize,
    eps_pred: &Tensor<S>,
    noise: &Tensor<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    same_shape(x_t, eps_pred, "ddpm_step")?;
    same_shape(x_t, noise, "ddpm_step")?;
    let a = sched.alpha[t];
    let coef = (S::one() - a) / (S::one() - sched.alpha_bar[t]).sqrt();
    let mean = x_t.axpy(-coef, eps_pred)?.scale(S::one() / a.sqrt());
    if t == 0 {
        Ok(mean)
    } else {
        mean.axpy(sched.beta[t].sqrt(), noise)
    }
}

/// Deterministic DDIM step from `t` to `t_prev` (`-1` means the clean sample).
pub fn ddim_step<S: Real>(
    x_t: &Tensor<S>,
    t: usize,
    t_prev: i64,
    eps_pred: &Tensor<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    if t_prev >= t as i64 {
        return Err(Error::Ordering { t, t_prev });
    }
    same_shape(x_t, eps_pred, "ddim_step")?;
    let ab = sched.alpha_bar_at(t as i64)?;
    let ab_prev = sched.alpha_bar_at(t_prev)?;
    let x0_hat = x_t.axpy(-(S::one() - ab).sqrt(), eps_pred)?.scale(S::one() / ab.sqrt());
    x0_hat.scale(ab_prev.sqrt()).axpy((S::one() - ab_prev).sqrt(), eps_pred)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DdpmAncestral,
    DdimDeterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub kind: SamplerKind,
    pub num_inference_steps: usize,
}

impl Sampler {
    pub fn ddpm(num_timesteps: usize) -> Self {
        Self { kind: SamplerKind::DdpmAncestral, num_inference_steps: num_timesteps }
    }

    pub fn ddim(steps: usize) -> Self {
        Self { kind: SamplerKind::DdimDeterministic, num_inference_steps: steps }
    }

    /// Strictly decreasing timesteps visited by the sampler, ending at 0.
    pub fn timesteps(&self, num_timesteps: usize) -> Result<Vec<usize>> {
        let s = self.num_inference_steps;
        if s == 0 || s > num_timesteps {
            return Err(Error::Config(format!("num_inference_steps={s} must be in 1..={num_timesteps}")));
        }
        match self.kind {
            SamplerKind::DdpmAncestral => {
                if s != num_timesteps {
                    return Err(Error::Config(format!(
                        "ancestral sampling visits every timestep; got {s} steps for T={num_timesteps}"
                    )));
                }
                Ok((0..num_timesteps).rev().collect())
            }
            SamplerKind::DdimDeterministic => {
                if s == 1 {
                    return Ok(vec![num_timesteps - 1]);
                }
                // Evenly spaced from T-1 down to 0. Spacing >= 1 because s <= T.
                let span = (num_timesteps - 1) as f64 / (s - 1) as f64;
                Ok((0..s).rev().map(|k| (k as f64 * span).round() as usize).collect())
            }
        }
    }
}

/// Runs the reverse chain and returns every intermediate state, starting with `x_T`.
///
/// `model(x, t)` must return an epsilon prediction with the shape of `x`.
pub fn sample_trajectory<S, F>(
    mut model: F,
    sched: &NoiseSchedule<S>,
    sampler: &Sampler,
    n: usize,
    data_dim: usize,
    seed: u64,
) -> Result<Vec<Tensor<S>>>
where
    S: Real,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    let steps = sampler.timesteps(sched.num_timesteps())?;
    let mut rng = rng_from_seed(seed);
    let mut x = normal_tensor::<S, _>(&[n, data_dim], &mut rng);
    let mut trajectory = vec![x.clone()];
    if n == 0 {
        return Ok(trajectory);
    }
    for (k, &t) in steps.iter().enumerate() {
        let eps = model(&x, t)?;
        if eps.shape() != x.shape() {
            return dim_err(format!("denoiser returned {:?} for input {:?}", eps.shape(), x.shape()));
        }
        x = match sampler.kind {
            SamplerKind::DdpmAncestral => {
                let noise = if t > 0 { normal_tensor(&[n, data_dim], &mut rng) } else { Tensor::zeros(&[n, data_dim]) };
                ddpm_step(&x, t, &eps, &noise, sched)?
            }
            SamplerKind::DdimDeterministic => {
                let t_prev = steps.get(k + 1).map_or(-1, |&p| p as i64);
                ddim_step(&x, t, t_prev, &eps, sched)?
            }
        };
        trajectory.push(x.clone());
    }
    Ok(trajectory)
}

/// Draws `n` samples of width `data_dim` from `x_T ~ N(0, I)`.
pub fn sample_loop<S, F>(
    model: F,
    sched: &NoiseSchedule<S>,
    sampler: &Sampler,
    n: usize,
    data_dim: usize,
    seed: u64,
) -> Result<Tensor<S>>
where
    S: Real,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    let mut traj = sample_trajectory(model, sched, sampler, n, data_dim, seed)?;
    Ok(traj.pop().expect("trajectory holds at least x_T"))
}
