//! One function per CLI verb. Each reads its inputs, writes its artifacts into
//! the configured output directory and returns a report.

use std::path::{Path, PathBuf};

use deme_core::analysis::{
    default_extent, landscape_grid, orthonormal_plane_basis, random_plane_basis, sliced_wasserstein, tv_statistics,
    LandscapeGrid, LossProbe, TvStatistics,
};
use deme_core::data::{generate, generate_balanced};
use deme_core::deme::{finetune_range, heldout_range_loss, partition_ranges, range_eval_batch, RangePartition, Teacher};
use deme_core::denoiser::{augment_with_projections, init_params, predict, DenoiserConfig};
use deme_core::diffusion::{sample_loop, Sampler};
use deme_core::merging::{ensemble_sample_loop, grid_search, merge, task_vector, MergeWeights};
use deme_core::training::{adjacent_vs_distant, gradient_similarity_matrix, train, LossTarget, ReweightStrategy};
use deme_core::{Error, NoiseSchedule, ParamSet, TaskVector, Tensor};
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::{ExperimentConfig, LandscapeMode};
use crate::error::{CliError, Result};
use crate::io::{header, read_samples, write_samples, write_table};

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const MERGED: &str = "merged.ckpt";

pub fn finetuned_name(i: usize) -> String {
    format!("finetuned_{i}.ckpt")
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    Ok(cfg.output_dir.join(name))
}

fn provenance(cfg: &ExperimentConfig, command: &str) -> Provenance {
    Provenance { command: command.into(), config_hash: cfg.hash(), seed: cfg.seed, ..Default::default() }
}

/// The training set, regenerated deterministically from the config.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Tensor> {
    Ok(generate(cfg.dataset.kind(), cfg.dataset.size, cfg.sub_seed("dataset"))?)
}

/// Balanced reference sample used by every sliced-Wasserstein evaluation.
pub fn reference(cfg: &ExperimentConfig, label: &str) -> Result<Tensor> {
    Ok(generate_balanced(cfg.dataset.kind(), cfg.metric.reference_size, cfg.sub_seed(label))?)
}

/// Held-out data for per-range denoising losses.
pub fn heldout(cfg: &ExperimentConfig) -> Result<Tensor> {
    Ok(generate(cfg.dataset.kind(), cfg.metric.reference_size, cfg.sub_seed("heldout"))?)
}

fn schedule(ckpt: &Checkpoint) -> Result<NoiseSchedule> {
    Ok(ckpt.schedule.build()?)
}

/// Draws `n` samples from one model with the configured sampler.
pub fn draw_samples(
    cfg: &ExperimentConfig,
    params: &ParamSet,
    arch: &DenoiserConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    Ok(sample_model(&cfg.sampler(), params, arch, sched, n, seed)?)
}

fn sample_model(
    sampler: &Sampler,
    params: &ParamSet,
    arch: &DenoiserConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> deme_core::Result<Tensor> {
    sample_loop(|x, t| predict(params, arch, x, &vec![t; x.rows()]), sched, sampler, n, arch.data_dim, seed)
}

/// Sliced-Wasserstein distance between samples and a reference set.
pub fn metric(cfg: &ExperimentConfig, samples: &Tensor, reference: &Tensor) -> Result<f64> {
    Ok(sliced_wasserstein(samples, reference, cfg.metric.num_projections, cfg.sub_seed("metric/projections"))?)
}

/// Held-out epsilon loss of `params` on each range of an `num_ranges` partition.
pub fn range_losses(
    cfg: &ExperimentConfig,
    params: &ParamSet,
    arch: &DenoiserConfig,
    sched: &NoiseSchedule,
    partition: &RangePartition,
) -> Result<Vec<f64>> {
    let x0 = heldout(cfg)?;
    partition
        .ranges()
        .enumerate()
        .map(|(i, r)| {
            let batch = range_eval_batch(&x0, r, sched, cfg.sub_seed(&format!("heldout/{i}")))?;
            Ok(heldout_range_loss(params, arch, &batch, sched)?)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub id: String,
    pub initial_metric: f64,
    pub final_metric: f64,
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    let sched_cfg = cfg.schedule.config();
    let sched = sched_cfg.build()?;
    let data = dataset(cfg)?;
    let arch = cfg.denoiser();
    let init = init_params(&arch, cfg.sub_seed("init"))?;
    log::info!("pretraining for {} iterations", cfg.train.num_iterations);
    let outcome = train(&init, &data, &cfg.train_config(), &arch, &sched, ReweightStrategy::Standard, LossTarget::EpsPrediction)?;

    let loss_csv = out_path(cfg, "pretrain_loss.csv")?;
    write_table(
        &loss_csv,
        &header(&["iteration", "loss"]),
        outcome.losses.iter().enumerate().map(|(i, l)| [i.to_string(), l.to_string()]),
    )?;

    let ckpt = Checkpoint::new(arch.clone(), sched_cfg, provenance(cfg, "pretrain"), outcome.params);
    let path = out_path(cfg, PRETRAINED)?;
    ckpt.save(&path)?;

    let reference = reference(cfg, "reference")?;
    let seed = cfg.sub_seed("eval/sample");
    let n = cfg.metric.num_samples;
    let initial_metric = metric(cfg, &draw_samples(cfg, &init, &arch, &sched, n, seed)?, &reference)?;
    let final_metric = metric(cfg, &draw_samples(cfg, &ckpt.params, &arch, &sched, n, seed)?, &reference)?;
    Ok(PretrainReport { checkpoint: path, loss_csv, id: ckpt.id(), initial_metric, final_metric })
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub csv: PathBuf,
    pub matrix: Vec<Vec<f64>>,
    pub adjacent: f64,
    pub distant: f64,
}

pub fn probe_gradients(cfg: &ExperimentConfig, checkpoint: &Path, buckets: usize) -> Result<ProbeReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let sched = schedule(&ckpt)?;
    let data = dataset(cfg)?;
    let matrix = gradient_similarity_matrix(
        &ckpt.params,
        &ckpt.architecture,
        &data,
        &sched,
        buckets,
        cfg.probe.samples_per_bucket,
        cfg.sub_seed("probe"),
    )?;
    let (adjacent, distant) = adjacent_vs_distant(&matrix);
    let csv = out_path(cfg, "gradient_similarity.csv")?;
    let rows = (0..buckets).flat_map(|i| {
        let m = &matrix;
        (0..buckets).map(move |j| [i.to_string(), j.to_string(), m[i][j].to_string()])
    });
    write_table(&csv, &header(&["bucket_i", "bucket_j", "cosine"]), rows)?;
    Ok(ProbeReport { csv, matrix, adjacent, distant })
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub checkpoints: Vec<PathBuf>,
    /// Held-out loss on each range: (base, finetuned).
    pub range_losses: Vec<(f64, f64)>,
}

/// The projection-augmented starting point and its architecture.
fn augmented(base: &Checkpoint) -> Result<(ParamSet, DenoiserConfig)> {
    if base.architecture.use_projection {
        return Ok((base.params.clone(), base.architecture.clone()));
    }
    Ok((augment_with_projections(&base.params, &base.architecture)?, base.architecture.with_projection()))
}

/// Runs one finetuning job per range. Successful ranges are written even if
/// others fail; the first failure is then reported.
pub fn finetune(cfg: &ExperimentConfig, base_path: &Path) -> Result<FinetuneReport> {
    let base = Checkpoint::load(base_path)?;
    let sched = schedule(&base)?;
    let data = dataset(cfg)?;
    let (init, student) = augmented(&base)?;
    let teacher = Teacher { params: &base.params, config: &base.architecture };
    let n = cfg.deme.num_ranges;
    let partition = partition_ranges(sched.num_timesteps(), n)?;
    log::info!("finetuning {n} ranges for {} iterations each", cfg.deme.num_iterations);

    let results: Vec<Result<ParamSet>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let outcome = finetune_range(teacher, &init, &student, i, &data, &cfg.deme_config(i), &sched)?;
            Ok(outcome.params)
        })
        .collect();

    let base_losses = range_losses(cfg, &base.params, &base.architecture, &sched, &partition)?;
    let x0 = heldout(cfg)?;
    let mut checkpoints = Vec::new();
    let mut range_losses_out = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(params) => {
                let batch = range_eval_batch(&x0, partition.range(i), &sched, cfg.sub_seed(&format!("heldout/{i}")))?;
                let loss = heldout_range_loss(&params, &student, &batch, &sched)?;
                let prov = Provenance {
                    parents: vec![base.id()],
                    range_index: Some(i),
                    num_ranges: Some(n),
                    p: Some(cfg.deme.p),
                    seed: cfg.deme_config(i).seed,
                    ..provenance(cfg, "finetune")
                };
                let path = out_path(cfg, &finetuned_name(i))?;
                Checkpoint::new(student.clone(), base.schedule, prov, params).save(&path)?;
                checkpoints.push(path);
                range_losses_out.push((base_losses[i], loss));
            }
            Err(e) => {
                log::error!("range {i} failed: {e}");
                failures.push(e);
            }
        }
    }
    if let Some(first) = failures.into_iter().next() {
        return Err(CliError::PartialFailure {
            failed: n - checkpoints.len(),
            total: n,
            first: Box::new(first),
        });
    }
    Ok(FinetuneReport { checkpoints, range_losses: range_losses_out })
}

/// Base (augmented), its architecture, the finetuned checkpoints and their task vectors.
pub struct TaskVectorSet {
    pub base: Checkpoint,
    pub origin: ParamSet,
    pub architecture: DenoiserConfig,
    pub finetuned: Vec<Checkpoint>,
    pub task_vectors: Vec<TaskVector>,
}

pub fn load_task_vectors(base_path: &Path, finetuned: &[PathBuf]) -> Result<TaskVectorSet> {
    if finetuned.is_empty() {
        return Err(CliError::Config("at least one finetuned checkpoint is required".into()));
    }
    let base = Checkpoint::load(base_path)?;
    let (origin, architecture) = augmented(&base)?;
    let mut cks = Vec::new();
    let mut tvs = Vec::new();
    for (k, path) in finetuned.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        if ck.architecture != architecture {
            return Err(Error::Alignment(format!(
                "{} has architecture {:?}, expected {:?}",
                path.display(),
                ck.architecture,
                architecture
            ))
            .into());
        }
        if ck.schedule != base.schedule {
            return Err(Error::Alignment(format!("{} uses a different noise schedule", path.display())).into());
        }
        let range = ck.provenance.range_index.unwrap_or(k);
        tvs.push(task_vector(&origin, &ck.params, range)?);
        cks.push(ck);
    }
    Ok(TaskVectorSet { base, origin, architecture, finetuned: cks, task_vectors: tvs })
}

#[derive(Clone, Debug)]
pub struct MergeReport {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub weights: MergeWeights,
    pub score: f64,
    pub num_coarse: usize,
    pub num_points: usize,
}

pub fn merge_command(cfg: &ExperimentConfig, base_path: &Path, finetuned: &[PathBuf]) -> Result<MergeReport> {
    let set = load_task_vectors(base_path, finetuned)?;
    let sched = schedule(&set.base)?;
    let reference = reference(cfg, "merge/reference")?;
    let seed = cfg.sub_seed("merge/search");
    let n = cfg.merge.samples_per_eval;
    let arch = &set.architecture;
    let grid = cfg.merge.grid();
    let sampler = cfg.sampler();
    log::info!("grid search over {} task vectors", set.task_vectors.len());
    let result = grid_search(&set.origin, &set.task_vectors, &grid, |params| {
        sliced_wasserstein(
            &sample_model(&sampler, params, arch, &sched, n, seed)?,
            &reference,
            cfg.metric.num_projections,
            cfg.sub_seed("metric/projections"),
        )
    })?;

    let k = set.task_vectors.len();
    let mut names: Vec<String> = (1..=k).map(|i| format!("w_{i}")).collect();
    names.push("score".into());
    let log_csv = out_path(cfg, "merge_log.csv")?;
    write_table(
        &log_csv,
        &names,
        result.log.iter().map(|(w, s)| w.0.iter().chain(std::iter::once(s)).map(f64::to_string).collect::<Vec<_>>()),
    )?;

    let merged = merge(&set.origin, &set.task_vectors, &result.weights)?;
    let mut parents = vec![set.base.id()];
    parents.extend(set.finetuned.iter().map(Checkpoint::id));
    let prov = Provenance {
        parents,
        num_ranges: Some(k),
        merge_weights: Some(result.weights.0.clone()),
        ..provenance(cfg, "merge")
    };
    let path = out_path(cfg, MERGED)?;
    Checkpoint::new(arch.clone(), set.base.schedule, prov, merged).save(&path)?;
    Ok(MergeReport {
        checkpoint: path,
        log_csv,
        weights: result.weights,
        score: result.score,
        num_coarse: result.num_coarse,
        num_points: result.log.len(),
    })
}

/// Orders ensemble members by range and checks they cover a full partition.
fn ensemble_members(cks: Vec<Checkpoint>) -> Result<(Vec<Checkpoint>, RangePartition)> {
    let n = cks.len();
    let declared = cks[0].provenance.num_ranges;
    if declared != Some(n) || cks.iter().any(|c| c.provenance.num_ranges != declared) {
        return Err(CliError::Config(format!(
            "ensemble of {n} checkpoints does not match their recorded range count {declared:?}"
        )));
    }
    let mut slots: Vec<Option<Checkpoint>> = (0..n).map(|_| None).collect();
    for c in cks {
        let i = c.provenance.range_index.filter(|&i| i < n).ok_or_else(|| {
            CliError::Config("ensemble member has no valid range index".into())
        })?;
        if slots[i].replace(c).is_some() {
            return Err(CliError::Config(format!("range {i} appears twice in the ensemble")));
        }
    }
    let members: Vec<Checkpoint> = slots.into_iter().map(|s| s.expect("every slot filled")).collect();
    if members.iter().any(|c| c.architecture != members[0].architecture || c.schedule != members[0].schedule) {
        return Err(Error::Alignment("ensemble members differ in architecture or schedule".into()).into());
    }
    let partition = partition_ranges(members[0].schedule.num_timesteps, n)?;
    Ok((members, partition))
}

#[derive(Clone, Debug)]
pub struct SampleReport {
    pub csv: PathBuf,
    pub samples: Tensor,
}

/// Samples from one checkpoint, or from a timestep-wise ensemble of
/// finetuned checkpoints when `ensemble` is set.
pub fn sample(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    ensemble: bool,
    n: usize,
    seed: Option<u64>,
    output: Option<&Path>,
) -> Result<SampleReport> {
    if checkpoints.is_empty() || (!ensemble && checkpoints.len() != 1) {
        return Err(CliError::Config(format!(
            "{} mode needs {}, got {} checkpoints",
            if ensemble { "ensemble" } else { "single-model" },
            if ensemble { "one checkpoint per range" } else { "exactly one checkpoint" },
            checkpoints.len()
        )));
    }
    let cks = checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let seed = seed.unwrap_or_else(|| cfg.sub_seed("sample"));
    let samples = if ensemble {
        let (members, partition) = ensemble_members(cks)?;
        let sched = schedule(&members[0])?;
        let models: Vec<ParamSet> = members.iter().map(|c| c.params.clone()).collect();
        ensemble_sample_loop(&models, &members[0].architecture, &partition, &sched, &cfg.sampler(), n, seed)?
    } else {
        let ck = &cks[0];
        draw_samples(cfg, &ck.params, &ck.architecture, &schedule(ck)?, n, seed)?
    };
    let csv = match output {
        Some(p) => p.to_path_buf(),
        None => out_path(cfg, "samples.csv")?,
    };
    write_samples(&csv, &samples)?;
    Ok(SampleReport { csv, samples })
}

#[derive(Clone, Debug)]
pub enum EvalInput {
    Samples(PathBuf),
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub csv: PathBuf,
    pub sliced_wasserstein: f64,
    /// Per-range held-out losses; only for checkpoint inputs.
    pub range_losses: Option<Vec<f64>>,
}

pub fn eval(cfg: &ExperimentConfig, input: &EvalInput, reference_csv: Option<&Path>) -> Result<EvalReport> {
    let reference = match reference_csv {
        Some(p) => read_samples(p)?,
        None => reference(cfg, "reference")?,
    };
    let (samples, range_losses) = match input {
        EvalInput::Samples(p) => (read_samples(p)?, None),
        EvalInput::Checkpoint(p) => {
            let ck = Checkpoint::load(p)?;
            let sched = schedule(&ck)?;
            let samples =
                draw_samples(cfg, &ck.params, &ck.architecture, &sched, cfg.metric.num_samples, cfg.sub_seed("eval/sample"))?;
            let partition = partition_ranges(sched.num_timesteps(), cfg.deme.num_ranges)?;
            (samples, Some(range_losses(cfg, &ck.params, &ck.architecture, &sched, &partition)?))
        }
    };
    let sw = metric(cfg, &samples, &reference)?;
    let mut rows = vec![["sliced_wasserstein".to_string(), sw.to_string()]];
    for (i, l) in range_losses.iter().flatten().enumerate() {
        rows.push([format!("range_{i}_loss"), l.to_string()]);
    }
    let csv = out_path(cfg, "eval.csv")?;
    write_table(&csv, &header(&["metric", "value"]), rows)?;
    Ok(EvalReport { csv, sliced_wasserstein: sw, range_losses })
}

#[derive(Clone, Debug)]
pub struct LandscapeReport {
    pub csv: PathBuf,
    pub grid: LandscapeGrid,
    pub gradient_proxy: f64,
    /// Loss of the plane origin evaluated directly, without the plane map.
    pub origin_loss: f64,
    /// Plane coordinates of the finetuned endpoints (task-vector mode only).
    pub endpoints: Vec<(f64, f64)>,
}

/// `checkpoints` is `[model]` for the pretrained plane and `[base, ft_a, ft_b]`
/// for the task-vector plane.
pub fn landscape(cfg: &ExperimentConfig, checkpoints: &[PathBuf], mode: LandscapeMode) -> Result<LandscapeReport> {
    let l = &cfg.landscape;
    let (basis, arch, sched, extent, endpoints) = match mode {
        LandscapeMode::PretrainedPlane => {
            let [path] = checkpoints else {
                return Err(CliError::Config("pretrained-plane mode takes exactly one checkpoint".into()));
            };
            let ck = Checkpoint::load(path)?;
            let basis = random_plane_basis(&ck.params, cfg.sub_seed("landscape/plane"))?;
            (basis, ck.architecture.clone(), schedule(&ck)?, l.extent.unwrap_or(1.0), Vec::new())
        }
        LandscapeMode::TaskVectorPlane => {
            let [base, a, b] = checkpoints else {
                return Err(CliError::Config("task-vector-plane mode takes a base and two finetuned checkpoints".into()));
            };
            let set = load_task_vectors(base, &[a.clone(), b.clone()])?;
            let (t1, t2) = (&set.task_vectors[0], &set.task_vectors[1]);
            let basis = orthonormal_plane_basis(&set.origin, t1, t2)?;
            let endpoints =
                [t1, t2].iter().map(|t| basis.coordinates(t.finetuned())).collect::<deme_core::Result<Vec<_>>>()?;
            (basis, set.architecture, schedule(&set.base)?, l.extent.unwrap_or_else(|| default_extent(t1, t2)), endpoints)
        }
    };
    let data = dataset(cfg)?;
    let t_range = l.t_range(sched.num_timesteps());
    let seed = cfg.sub_seed("landscape/probe");
    let grid = landscape_grid(&basis, &arch, &data, &sched, t_range, l.resolution, extent, l.eval_samples, seed)?;
    let origin_loss = LossProbe::new(&arch, &data, &sched, t_range, l.eval_samples, seed)?.loss(&basis.origin)?;
    let csv = out_path(cfg, "landscape.csv")?;
    let r = grid.resolution();
    let rows = (0..r * r).map(|k| {
        let (i, j) = (k / r, k % r);
        [grid.coords[i].to_string(), grid.coords[j].to_string(), grid.values[i][j].to_string()]
    });
    write_table(&csv, &header(&["a", "b", "loss"]), rows)?;
    let gradient_proxy = grid.gradient_proxy();
    Ok(LandscapeReport { csv, grid, gradient_proxy, origin_loss, endpoints })
}

#[derive(Clone, Debug)]
pub struct TvStatsReport {
    pub norms_csv: PathBuf,
    pub cosine_csv: PathBuf,
    pub stats: TvStatistics,
    pub source_ranges: Vec<usize>,
}

pub fn tv_stats(cfg: &ExperimentConfig, base: &Path, finetuned: &[PathBuf]) -> Result<TvStatsReport> {
    let set = load_task_vectors(base, finetuned)?;
    let stats = tv_statistics(&set.task_vectors)?;
    let norms_csv = out_path(cfg, "tv_norms.csv")?;
    write_table(
        &norms_csv,
        &header(&["vector", "source_range", "name", "min", "median", "max", "mean", "norm"]),
        stats.layers.iter().map(|s| {
            [
                s.vector.to_string(),
                s.source_range.to_string(),
                s.name.clone(),
                s.min.to_string(),
                s.median.to_string(),
                s.max.to_string(),
                s.mean.to_string(),
                s.norm.to_string(),
            ]
        }),
    )?;
    let source_ranges: Vec<usize> = set.task_vectors.iter().map(TaskVector::source_range).collect();
    let cosine_csv = out_path(cfg, "tv_cosine.csv")?;
    let k = source_ranges.len();
    let rows = (0..k * k).map(|idx| {
        let (i, j) = (idx / k, idx % k);
        [source_ranges[i].to_string(), source_ranges[j].to_string(), stats.cosine[i][j].to_string()]
    });
    write_table(&cosine_csv, &header(&["range_i", "range_j", "cosine"]), rows)?;
    Ok(TvStatsReport { norms_csv, cosine_csv, stats, source_ranges })
}
