//! Diffusion training objective, the SNR reweighting family, the training
//! loop, and the gradient-conflict probe.
//!
//! Every reweighting strategy is expressed as a weight on the x0-prediction
//! error `||x0 - x0_hat||^2`. Because `||eps - eps_hat||^2 = SNR ||x0 - x0_hat||^2`
//! and `||v - v_hat||^2 = (SNR + 1) ||x0 - x0_hat||^2`, the weight applied in
//! the model's own parameterization is that x0 weight divided by the
//! corresponding factor (see [`target_weight`]).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deme::partition_ranges;
use crate::denoiser::{forward_graph, DenoiserConfig};
use crate::diffusion::{q_sample_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamSet;
use crate::rng::{normal_tensor, rng_from_seed, SeededRng};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReweightStrategy {
    Standard,
    SnrPlusOne,
    TruncatedSnr,
    MinSnrGamma { gamma: f64 },
    P2 { k: f64, gamma: f64 },
}

impl ReweightStrategy {
    pub fn min_snr() -> Self {
        ReweightStrategy::MinSnrGamma { gamma: 5.0 }
    }

    pub fn p2() -> Self {
        ReweightStrategy::P2 { k: 1.0, gamma: 1.0 }
    }

    pub fn all_defaults() -> [Self; 5] {
        [Self::Standard, Self::SnrPlusOne, Self::TruncatedSnr, Self::min_snr(), Self::p2()]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ReweightStrategy::MinSnrGamma { gamma } if gamma <= 0.0 => {
                Err(Error::Config(format!("min-snr gamma must be > 0, got {gamma}")))
            }
            ReweightStrategy::P2 { k, gamma } if gamma <= 0.0 || k < 0.0 => {
                Err(Error::Config(format!("p2 needs gamma > 0 and k >= 0, got k={k} gamma={gamma}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    EpsPrediction,
    X0Prediction,
    VPrediction,
}

/// Weight on `||x0 - x0_hat||^2` at timestep `t`.
pub fn loss_weight<S: Real>(strategy: ReweightStrategy, t: usize, sched: &NoiseSchedule<S>) -> S {
    let snr = sched.snr[t];
    match strategy {
        ReweightStrategy::Standard => snr,
        ReweightStrategy::SnrPlusOne => snr + S::one(),
        ReweightStrategy::TruncatedSnr => snr.max(S::one()),
        ReweightStrategy::MinSnrGamma { gamma } => snr.min(S::of(gamma)),
        ReweightStrategy::P2 { k, gamma } => snr / (S::of(k) + snr).powf(S::of(gamma)),
    }
}

/// Weight on the squared error in the model's own output parameterization.
pub fn target_weight<S: Real>(strategy: ReweightStrategy, target: LossTarget, t: usize, sched: &NoiseSchedule<S>) -> S {
    let w = loss_weight(strategy, t, sched);
    let snr = sched.snr[t];
    match target {
        LossTarget::X0Prediction => w,
        LossTarget::EpsPrediction => match strategy {
            // Exact forms avoid a needless w / SNR round trip.
            ReweightStrategy::Standard => S::one(),
            ReweightStrategy::P2 { k, gamma } => S::one() / (S::of(k) + snr).powf(S::of(gamma)),
            _ => w / snr,
        },
        LossTarget::VPrediction => match strategy {
            ReweightStrategy::SnrPlusOne => S::one(),
            _ => w / (snr + S::one()),
        },
    }
}

/// One minibatch of the forward process with everything needed to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch<S> {
    pub x0: Tensor<S>,
    pub ts: Vec<usize>,
    pub eps: Tensor<S>,
    pub x_t: Tensor<S>,
}

impl<S: Real> DiffusionBatch<S> {
    pub fn new(x0: Tensor<S>, ts: Vec<usize>, eps: Tensor<S>, sched: &NoiseSchedule<S>) -> Result<Self> {
        let x_t = q_sample_rows(&x0, &ts, &eps, sched)?;
        Ok(Self { x0, ts, eps, x_t })
    }

    /// Draws `eps` and one timestep per row with `draw_t`.
    pub fn draw<R: Rng>(
        x0: Tensor<S>,
        rng: &mut R,
        sched: &NoiseSchedule<S>,
        mut draw_t: impl FnMut(&mut R) -> usize,
    ) -> Result<Self> {
        let ts: Vec<usize> = (0..x0.rows()).map(|_| draw_t(rng)).collect();
        let eps = normal_tensor(x0.shape(), rng);
        Self::new(x0, ts, eps, sched)
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// What the network should output under `target`.
    pub fn regression_target(&self, target: LossTarget, sched: &NoiseSchedule<S>) -> Result<Tensor<S>> {
        match target {
            LossTarget::EpsPrediction => Ok(self.eps.clone()),
            LossTarget::X0Prediction => Ok(self.x0.clone()),
            LossTarget::VPrediction => {
                // v = sqrt(ab) eps - sqrt(1 - ab) x0, row by row.
                let c = self.x0.cols();
                let mut data = Vec::with_capacity(self.x0.len());
                for (i, &t) in self.ts.iter().enumerate() {
                    let ab = sched.alpha_bar[t];
                    let (se, sx) = (ab.sqrt(), (S::one() - ab).sqrt());
                    for j in 0..c {
                        data.push(se * self.eps.data()[i * c + j] - sx * self.x0.data()[i * c + j]);
                    }
                }
                Tensor::new(self.x0.shape().to_vec(), data)
            }
        }
    }
}

/// The scalar training loss and the per-sample weighted squared errors.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// Mean over all elements of the weighted squared error.
    pub loss: NodeId,
    /// `w_i * ||target_i - pred_i||^2`, shape `n x 1`.
    pub per_sample: NodeId,
}

pub fn weighted_loss<S: Real>(
    graph: &mut Graph<S>,
    pred: NodeId,
    batch: &DiffusionBatch<S>,
    strategy: ReweightStrategy,
    target: LossTarget,
    sched: &NoiseSchedule<S>,
) -> Result<LossNodes> {
    let goal = graph.constant(batch.regression_target(target, sched)?);
    let weights: Vec<S> = batch.ts.iter().map(|&t| target_weight(strategy, target, t, sched)).collect();
    let d = batch.x0.cols();
    let wmat = Tensor::new(vec![batch.len(), 1], weights)?.broadcast_cols(d)?;
    let wmat = graph.constant(wmat);
    let diff = graph.sub(pred, goal)?;
    let sq = graph.mul(diff, diff)?;
    let weighted = graph.mul(sq, wmat)?;
    let per_sample = graph.row_sums(weighted)?;
    let loss = graph.mean(weighted);
    Ok(LossNodes { loss, per_sample })
}

/// Builds the loss of one batch on an existing graph.
pub fn batch_loss<S: Real>(
    graph: &mut Graph<S>,
    params: &Bindings,
    config: &DenoiserConfig,
    batch: &DiffusionBatch<S>,
    strategy: ReweightStrategy,
    target: LossTarget,
    sched: &NoiseSchedule<S>,
) -> Result<LossNodes> {
    if batch.is_empty() {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    let x = graph.constant(batch.x_t.clone());
    let pred = forward_graph(graph, params, config, x, &batch.ts)?;
    weighted_loss(graph, pred, batch, strategy, target, sched)
}

/// Draws `t ~ U[0, T)` and `eps` per row of `x0` and builds the training loss.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<S: Real, R: Rng>(
    graph: &mut Graph<S>,
    params: &Bindings,
    config: &DenoiserConfig,
    x0: Tensor<S>,
    rng: &mut R,
    sched: &NoiseSchedule<S>,
    strategy: ReweightStrategy,
    target: LossTarget,
) -> Result<(LossNodes, DiffusionBatch<S>)> {
    if x0.rows() == 0 {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    let t_max = sched.num_timesteps();
    let batch = DiffusionBatch::draw(x0, rng, sched, |r| r.random_range(0..t_max))?;
    let nodes = batch_loss(graph, params, config, &batch, strategy, target, sched)?;
    Ok((nodes, batch))
}

/// Loss of a fixed batch without recording gradients.
pub fn evaluate_loss<S: Real>(
    params: &ParamSet<S>,
    config: &DenoiserConfig,
    batch: &DiffusionBatch<S>,
    strategy: ReweightStrategy,
    target: LossTarget,
    sched: &NoiseSchedule<S>,
) -> Result<S> {
    config.check_params(params)?;
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let nodes = batch_loss(&mut g, &bound, config, batch, strategy, target, sched)?;
    g.value(nodes.loss).item()
}

/// Standard epsilon loss of a fixed batch and its parameter gradient.
pub fn loss_and_gradient<S: Real>(
    params: &ParamSet<S>,
    config: &DenoiserConfig,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<(S, ParamSet<S>)> {
    config.check_params(params)?;
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let nodes = batch_loss(&mut g, &bound, config, batch, ReweightStrategy::Standard, LossTarget::EpsPrediction, sched)?;
    g.backward(nodes.loss)?;
    Ok((g.value(nodes.loss).item()?, g.grads_for(&bound)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 128, num_iterations: 5_000, optimizer: OptimizerConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub params: ParamSet<S>,
    pub losses: Vec<f64>,
}

/// Uniformly resamples `batch_size` rows (with replacement).
pub fn sample_rows<S: Real, R: Rng>(dataset: &Tensor<S>, batch_size: usize, rng: &mut R) -> Result<Tensor<S>> {
    let n = dataset.rows();
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    dataset.select_rows(&idx)
}

/// Generic first-order loop: builds a fresh graph per iteration with
/// `loss_fn`, backpropagates, and steps the optimizer.
pub fn optimize<S, F>(
    params: &ParamSet<S>,
    optimizer: OptimizerConfig,
    iterations: usize,
    seed: u64,
    mut loss_fn: F,
) -> Result<TrainOutcome<S>>
where
    S: Real,
    F: FnMut(&mut Graph<S>, &Bindings, &mut SeededRng) -> Result<NodeId>,
{
    let mut opt = Optimizer::new(optimizer, params)?;
    let mut rng = rng_from_seed(seed);
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        opt.set_lr_scale(optimizer.schedule.factor(iteration, iterations));
        let mut g = Graph::new();
        let bound = g.bind(&current, true);
        let loss_node = loss_fn(&mut g, &bound, &mut rng)?;
        let loss = g.value(loss_node).item()?.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { iteration, loss });
        }
        g.backward(loss_node)?;
        let grads = g.grads_for(&bound)?;
        current = opt.step(&current, &grads)?;
        if !current.is_finite() {
            return Err(Error::TrainingFailure { iteration, loss: f64::NAN });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { params: current, losses })
}

/// Trains on the full timestep range with `t ~ U[0, T)` drawn per sample.
pub fn train<S: Real>(
    params: &ParamSet<S>,
    dataset: &Tensor<S>,
    config: &TrainConfig,
    denoiser: &DenoiserConfig,
    sched: &NoiseSchedule<S>,
    strategy: ReweightStrategy,
    target: LossTarget,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    strategy.validate()?;
    denoiser.check_params(params)?;
    if dataset.rows() == 0 {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    optimize(params, config.optimizer, config.num_iterations, config.seed, |g, bound, rng| {
        let x0 = sample_rows(dataset, config.batch_size, rng)?;
        let (nodes, _) = diffusion_loss(g, bound, denoiser, x0, rng, sched, strategy, target)?;
        Ok(nodes.loss)
    })
}

pub fn cosine_similarity<S: Real>(a: &[S], b: &[S]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Pairwise cosine similarity of epsilon-loss gradients restricted to `num_buckets`
/// contiguous timestep intervals.
///
/// One evaluation set (`samples_per_bucket` rows of `dataset`), one noise draw
/// and one uniform offset per row are shared by all buckets, so bucket
/// gradients differ only through their timesteps.
pub fn gradient_similarity_matrix<S: Real>(
    params: &ParamSet<S>,
    config: &DenoiserConfig,
    dataset: &Tensor<S>,
    sched: &NoiseSchedule<S>,
    num_buckets: usize,
    samples_per_bucket: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if num_buckets < 2 {
        return Err(Error::Contract(format!("need at least 2 buckets, got {num_buckets}")));
    }
    if num_buckets > sched.num_timesteps() {
        return Err(Error::Contract(format!(
            "{num_buckets} buckets over {} timesteps leaves a bucket empty",
            sched.num_timesteps()
        )));
    }
    if samples_per_bucket == 0 || dataset.rows() == 0 {
        return Err(Error::Contract("gradient probe needs samples".into()));
    }
    let partition = partition_ranges(sched.num_timesteps(), num_buckets)?;
    let mut rng = rng_from_seed(seed);
    let x0 = sample_rows(dataset, samples_per_bucket, &mut rng)?;
    let eps: Tensor<S> = normal_tensor(x0.shape(), &mut rng);
    let offsets: Vec<f64> = (0..samples_per_bucket).map(|_| rng.random::<f64>()).collect();

    let grads: Vec<Vec<S>> = (0..num_buckets)
        .into_par_iter()
        .map(|b| {
            let (lo, hi) = partition.range(b);
            let ts = offsets.iter().map(|&u| (lo + (u * (hi - lo) as f64) as usize).min(hi - 1)).collect();
            let batch = DiffusionBatch::new(x0.clone(), ts, eps.clone(), sched)?;
            let (_, g) = loss_and_gradient(params, config, &batch, sched)?;
            Ok(g.flatten())
        })
        .collect::<Result<_>>()?;

    Ok((0..num_buckets)
        .map(|i| (0..num_buckets).map(|j| cosine_similarity(&grads[i], &grads[j])).collect())
        .collect())
}

/// Mean similarity of adjacent buckets and of buckets at least `B/2` apart.
pub fn adjacent_vs_distant(matrix: &[Vec<f64>]) -> (f64, f64) {
    let b = matrix.len();
    let min_gap = b.div_ceil(2);
    let (mut adj, mut n_adj, mut far, mut n_far) = (0.0, 0, 0.0, 0);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            if j - i == 1 {
                adj += v;
                n_adj += 1;
            }
            if j - i >= min_gap {
                far += v;
                n_far += 1;
            }
        }
    }
    (adj / n_adj.max(1) as f64, far / n_far.max(1) as f64)
}
