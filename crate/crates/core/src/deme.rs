//! Decoupled finetuning on timestep ranges.
//!
//! `[0, T)` is split into `N` contiguous ranges. Model `i` is finetuned from
//! the pretrained weights on
//!
//! ```text
//! ||eps - eps_i(x_t, t)||^2 + lambda * ||eps_teacher(x_t, t) - eps_i(x_t, t)||^2
//! ```
//!
//! with `t` drawn from range `i` with probability `1 - p` and from all of
//! `[0, T)` with probability `p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{forward_graph, predict, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::optim::OptimizerConfig;
use crate::params::ParamSet;
use crate::rng::{normal_tensor, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::training::{evaluate_loss, optimize, sample_rows, DiffusionBatch, LossTarget, ReweightStrategy, TrainOutcome};

/// `N` half-open integer ranges covering `[0, T)`.
///
/// Boundary `i` is `ceil(i * T / N)`, so `t` lies in range `floor(t * N / T)`
/// for every `t`. When `N` divides `T` this is `[(i-1)T/N, iT/N)` exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangePartition {
    num_timesteps: usize,
    boundaries: Vec<usize>,
}

pub fn partition_ranges(num_timesteps: usize, num_ranges: usize) -> Result<RangePartition> {
    if num_ranges == 0 || num_ranges > num_timesteps {
        return Err(Error::Config(format!(
            "need 1 <= N <= T, got N={num_ranges} T={num_timesteps}"
        )));
    }
    let boundaries = (0..=num_ranges).map(|i| (i * num_timesteps).div_ceil(num_ranges)).collect();
    Ok(RangePartition { num_timesteps, boundaries })
}

impl RangePartition {
    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn num_ranges(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// `(start, end)` of range `i`, end exclusive.
    pub fn range(&self, i: usize) -> (usize, usize) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.boundaries.windows(2).map(|w| (w[0], w[1]))
    }

    /// Index of the range containing `t`, by boundary search.
    pub fn containing(&self, t: usize) -> Result<usize> {
        if t >= self.num_timesteps {
            return Err(Error::Index { index: t as i64, bound: self.num_timesteps });
        }
        Ok(self.boundaries.partition_point(|&b| b <= t) - 1)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.num_ranges() {
            return Err(Error::Index { index: i as i64, bound: self.num_ranges() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemeConfig {
    pub num_ranges: usize,
    /// Probability of drawing `t` from the whole chain instead of the range.
    pub p: f64,
    pub consistency_weight: f64,
    pub num_iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for DemeConfig {
    fn default() -> Self {
        Self {
            num_ranges: 4,
            p: 0.4,
            consistency_weight: 1.0,
            num_iterations: 1_500,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl DemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.num_ranges == 0 || self.batch_size == 0 {
            return Err(Error::Config("num_ranges and batch_size must be positive".into()));
        }
        if self.consistency_weight.is_nan() || self.consistency_weight < 0.0 {
            return Err(Error::Config("consistency_weight must be >= 0".into()));
        }
        self.optimizer.validate()
    }

    pub fn partition(&self, num_timesteps: usize) -> Result<RangePartition> {
        partition_ranges(num_timesteps, self.num_ranges)
    }
}

/// Draws a timestep for finetuning range `i`.
pub fn sample_timestep<R: Rng + ?Sized>(i: usize, partition: &RangePartition, p: f64, rng: &mut R) -> Result<usize> {
    partition.check_index(i)?;
    if rng.random::<f64>() < p {
        Ok(rng.random_range(0..partition.num_timesteps()))
    } else {
        let (lo, hi) = partition.range(i);
        Ok(rng.random_range(lo..hi))
    }
}

/// The frozen pretrained model used as consistency target.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a, S> {
    pub params: &'a ParamSet<S>,
    pub config: &'a DenoiserConfig,
}

impl<S: Real> Teacher<'_, S> {
    pub fn predict(&self, x_t: &Tensor<S>, ts: &[usize]) -> Result<Tensor<S>> {
        predict(self.params, self.config, x_t, ts)
    }

    fn check_compatible(&self, student: &DenoiserConfig) -> Result<()> {
        if !self.config.same_backbone(student) {
            return Err(Error::Alignment("teacher and student architectures differ".into()));
        }
        Ok(())
    }
}

/// `mean ||teacher_eps - student(x_t, t)||^2`; the teacher output is a constant.
pub fn consistency_loss<S: Real>(
    graph: &mut Graph<S>,
    student: &Bindings,
    student_config: &DenoiserConfig,
    teacher_eps: &Tensor<S>,
    x_t: &Tensor<S>,
    ts: &[usize],
) -> Result<NodeId> {
    let x = graph.constant(x_t.clone());
    let pred = forward_graph(graph, student, student_config, x, ts)?;
    let goal = graph.constant(teacher_eps.clone());
    graph.mse(pred, goal)
}

/// Consistency loss evaluated directly from two parameter sets.
pub fn consistency_value<S: Real>(
    teacher: Teacher<'_, S>,
    student: &ParamSet<S>,
    student_config: &DenoiserConfig,
    x_t: &Tensor<S>,
    ts: &[usize],
) -> Result<S> {
    teacher.check_compatible(student_config)?;
    student_config.check_params(student)?;
    let target = teacher.predict(x_t, ts)?;
    let mut g = Graph::new();
    let bound = g.bind(student, false);
    let node = consistency_loss(&mut g, &bound, student_config, &target, x_t, ts)?;
    g.value(node).item()
}

#[derive(Clone, Copy, Debug)]
pub struct DemeLossNodes {
    pub total: NodeId,
    pub denoising: NodeId,
    pub consistency: NodeId,
}

/// Overall finetuning loss on a prepared batch.
pub fn deme_batch_loss<S: Real>(
    graph: &mut Graph<S>,
    student: &Bindings,
    student_config: &DenoiserConfig,
    teacher: Teacher<'_, S>,
    batch: &DiffusionBatch<S>,
    consistency_weight: f64,
) -> Result<DemeLossNodes> {
    if batch.is_empty() {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    teacher.check_compatible(student_config)?;
    // One teacher pass per batch, shared by every use below.
    let teacher_eps = teacher.predict(&batch.x_t, &batch.ts)?;
    let x = graph.constant(batch.x_t.clone());
    let pred = forward_graph(graph, student, student_config, x, &batch.ts)?;
    let eps = graph.constant(batch.eps.clone());
    let denoising = graph.mse(pred, eps)?;
    let goal = graph.constant(teacher_eps);
    let consistency = graph.mse(pred, goal)?;
    let weighted = graph.scale(consistency, S::of(consistency_weight));
    let total = graph.add(denoising, weighted)?;
    Ok(DemeLossNodes { total, denoising, consistency })
}

/// Draws `t` by the range-mixture law and `eps`, then builds the loss.
#[allow(clippy::too_many_arguments)]
pub fn deme_loss<S: Real, R: Rng>(
    graph: &mut Graph<S>,
    student: &Bindings,
    student_config: &DenoiserConfig,
    teacher: Teacher<'_, S>,
    x0: Tensor<S>,
    range_index: usize,
    config: &DemeConfig,
    partition: &RangePartition,
    sched: &NoiseSchedule<S>,
    rng: &mut R,
) -> Result<(DemeLossNodes, DiffusionBatch<S>)> {
    if x0.rows() == 0 {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    partition.check_index(range_index)?;
    let batch = DiffusionBatch::draw(x0, rng, sched, |r| {
        sample_timestep(range_index, partition, config.p, r).expect("range index checked above")
    })?;
    let nodes = deme_batch_loss(graph, student, student_config, teacher, &batch, config.consistency_weight)?;
    Ok((nodes, batch))
}

/// Finetunes a copy of `init` (the projection-augmented pretrained weights) on range `i`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_range<S: Real>(
    teacher: Teacher<'_, S>,
    init: &ParamSet<S>,
    student_config: &DenoiserConfig,
    range_index: usize,
    dataset: &Tensor<S>,
    config: &DemeConfig,
    sched: &NoiseSchedule<S>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    teacher.check_compatible(student_config)?;
    student_config.check_params(init)?;
    if dataset.rows() == 0 {
        return Err(Error::Contract("finetuning on an empty dataset".into()));
    }
    let partition = config.partition(sched.num_timesteps())?;
    partition.check_index(range_index)?;
    optimize(init, config.optimizer, config.num_iterations, config.seed, |g, bound, rng| {
        let x0 = sample_rows(dataset, config.batch_size, rng)?;
        let (nodes, _) = deme_loss(g, bound, student_config, teacher, x0, range_index, config, &partition, sched, rng)?;
        Ok(nodes.total)
    })
}

/// A fixed held-out batch with `t` uniform on `[lo, hi)`.
pub fn range_eval_batch<S: Real>(
    eval_x0: &Tensor<S>,
    range: (usize, usize),
    sched: &NoiseSchedule<S>,
    seed: u64,
) -> Result<DiffusionBatch<S>> {
    let (lo, hi) = range;
    if lo >= hi || hi > sched.num_timesteps() {
        return Err(Error::Config(format!("invalid timestep range [{lo}, {hi})")));
    }
    let mut rng = rng_from_seed(seed);
    let ts = (0..eval_x0.rows()).map(|_| rng.random_range(lo..hi)).collect();
    let eps = normal_tensor(eval_x0.shape(), &mut rng);
    DiffusionBatch::new(eval_x0.clone(), ts, eps, sched)
}

/// Plain epsilon loss on a fixed held-out batch restricted to one range.
pub fn heldout_range_loss<S: Real>(
    params: &ParamSet<S>,
    config: &DenoiserConfig,
    batch: &DiffusionBatch<S>,
    sched: &NoiseSchedule<S>,
) -> Result<S> {
    evaluate_loss(params, config, batch, ReweightStrategy::Standard, LossTarget::EpsPrediction, sched)
}
