//! Experiment configuration: a TOML file with dotted section keys plus
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use deme_core::data::DatasetKind;
use deme_core::deme::DemeConfig;
use deme_core::denoiser::DenoiserConfig;
use deme_core::diffusion::{Sampler, SamplerKind, ScheduleConfig};
use deme_core::merging::GridSpec;
use deme_core::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use deme_core::rng::derive_seed;
use deme_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    GaussianMixture,
    TwoMoons,
    SwissRoll2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetName,
    pub size: usize,
    pub components: usize,
    pub radius: f64,
    pub std: f64,
    /// Noise level for the moons and swiss-roll generators.
    pub noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { kind: DatasetName::GaussianMixture, size: 20_000, components: 8, radius: 2.0, std: 0.1, noise: 0.05 }
    }
}

impl DatasetSection {
    pub fn kind(&self) -> DatasetKind {
        match self.kind {
            DatasetName::GaussianMixture => {
                DatasetKind::GaussianMixture { components: self.components, radius: self.radius, std: self.std }
            }
            DatasetName::TwoMoons => DatasetKind::TwoMoons { noise: self.noise },
            DatasetName::SwissRoll2d => DatasetKind::SwissRoll2d { noise: self.noise },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub num_timesteps: usize,
    /// Defaults to the DDPM range rescaled to `num_timesteps`.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { num_timesteps: 100, beta_start: None, beta_end: None }
    }
}

impl ScheduleSection {
    pub fn config(&self) -> ScheduleConfig {
        let r = ScheduleConfig::rescaled(self.num_timesteps);
        ScheduleConfig {
            num_timesteps: self.num_timesteps,
            beta_start: self.beta_start.unwrap_or(r.beta_start),
            beta_end: self.beta_end.unwrap_or(r.beta_end),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    /// Hidden layers that receive a channel projection; all of them when absent.
    pub projection_sites: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self { hidden_dims: d.hidden_dims, time_embed_dim: d.time_embed_dim, projection_sites: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

fn optimizer(name: OptimizerName, learning_rate: f64, schedule: LrSchedule) -> OptimizerConfig {
    let kind = match name {
        OptimizerName::Adam => OptimizerKind::adam(),
        OptimizerName::Sgd => OptimizerKind::Sgd,
    };
    OptimizerConfig { kind, learning_rate, schedule }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub num_iterations: usize,
    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            num_iterations: 5_000,
            optimizer: OptimizerName::Adam,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemeSection {
    #[serde(alias = "N")]
    pub num_ranges: usize,
    pub p: f64,
    pub consistency_weight: f64,
    pub num_iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for DemeSection {
    fn default() -> Self {
        Self {
            num_ranges: 4,
            p: 0.4,
            consistency_weight: 1.0,
            num_iterations: 1_500,
            batch_size: 128,
            optimizer: OptimizerName::Adam,
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub lo: f64,
    pub hi: f64,
    pub coarse_step: f64,
    pub refine_radius: f64,
    pub fine_step: f64,
    /// Explicit per-weight value lists; replaces the coarse-to-fine lattice when set.
    pub values: Option<Vec<Vec<f64>>>,
    pub samples_per_eval: usize,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            coarse_step: 0.25,
            refine_radius: 0.25,
            fine_step: 0.05,
            values: None,
            samples_per_eval: 2_000,
        }
    }
}

impl MergeSection {
    pub fn grid(&self) -> GridSpec {
        match &self.values {
            Some(values) => GridSpec::Explicit { values: values.clone() },
            None => GridSpec::CoarseToFine {
                lo: self.lo,
                hi: self.hi,
                coarse_step: self.coarse_step,
                refine_radius: self.refine_radius,
                fine_step: self.fine_step,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub num_projections: usize,
    /// Samples drawn for a final evaluation.
    pub num_samples: usize,
    pub reference_size: usize,
    pub sampler: SamplerKind,
    pub steps: usize,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            num_projections: 128,
            num_samples: 10_000,
            reference_size: 10_000,
            sampler: SamplerKind::DdimDeterministic,
            steps: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub buckets: usize,
    pub samples_per_bucket: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { buckets: 10, samples_per_bucket: 512 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeMode {
    PretrainedPlane,
    TaskVectorPlane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    pub mode: LandscapeMode,
    pub resolution: usize,
    /// Half-width of the grid; defaults to 1.5x the larger task-vector norm,
    /// or 1.0 for a random plane.
    pub extent: Option<f64>,
    pub eval_samples: usize,
    pub t_start: Option<usize>,
    pub t_end: Option<usize>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            mode: LandscapeMode::PretrainedPlane,
            resolution: 21,
            extent: None,
            eval_samples: 1_024,
            t_start: None,
            t_end: None,
        }
    }
}

impl LandscapeSection {
    pub fn t_range(&self, num_timesteps: usize) -> Option<(usize, usize)> {
        match (self.t_start, self.t_end) {
            (None, None) => None,
            (a, b) => Some((a.unwrap_or(0), b.unwrap_or(num_timesteps))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every sub-task derives its own seed from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub deme: DemeSection,
    pub merge: MergeSection,
    pub metric: MetricSection,
    pub probe: ProbeSection,
    pub landscape: LandscapeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            deme: DemeSection::default(),
            merge: MergeSection::default(),
            metric: MetricSection::default(),
            probe: ProbeSection::default(),
            landscape: LandscapeSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Writes `value` at a dotted path such as `deme.p`, creating tables as needed.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies `key=value` overrides on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e| CliError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser().validate()?;
        self.schedule.config().build::<f64>()?;
        self.train_config().validate()?;
        let deme = self.deme_config(0);
        deme.validate()?;
        deme.partition(self.schedule.num_timesteps)?;
        self.merge.grid().validate(self.deme.num_ranges)?;
        self.sampler().timesteps(self.schedule.num_timesteps)?;
        if self.dataset.size == 0 {
            return Err(CliError::Config("dataset.size must be positive".into()));
        }
        if self.metric.num_projections == 0 || self.metric.reference_size < 2 || self.merge.samples_per_eval < 2 {
            return Err(CliError::Config("metric needs projections and at least 2 samples".into()));
        }
        Ok(())
    }

    /// Hex digest identifying the effective configuration. The output
    /// directory is excluded so relocated runs share a hash.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&Self { output_dir: PathBuf::new(), ..self.clone() }).expect("config is serializable");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            hidden_dims: self.model.hidden_dims.clone(),
            time_embed_dim: self.model.time_embed_dim,
            use_projection: false,
            projection_sites: self
                .model
                .projection_sites
                .clone()
                .unwrap_or_else(|| (0..self.model.hidden_dims.len()).collect()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            num_iterations: t.num_iterations,
            optimizer: optimizer(t.optimizer, t.learning_rate, t.lr_schedule),
            seed: self.sub_seed("pretrain"),
        }
    }

    pub fn finetune_optimizer(&self) -> OptimizerConfig {
        optimizer(self.deme.optimizer, self.deme.learning_rate, self.deme.lr_schedule)
    }

    pub fn deme_config(&self, range_index: usize) -> DemeConfig {
        let d = &self.deme;
        DemeConfig {
            num_ranges: d.num_ranges,
            p: d.p,
            consistency_weight: d.consistency_weight,
            num_iterations: d.num_iterations,
            batch_size: d.batch_size,
            optimizer: self.finetune_optimizer(),
            seed: self.sub_seed(&format!("finetune/{range_index}")),
        }
    }

    pub fn sampler(&self) -> Sampler {
        match self.metric.sampler {
            SamplerKind::DdpmAncestral => Sampler::ddpm(self.schedule.num_timesteps),
            SamplerKind::DdimDeterministic => Sampler::ddim(self.metric.steps),
        }
    }
}
