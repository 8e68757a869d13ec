use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deme_cli::commands::{self, EvalInput};
use deme_cli::config::{ExperimentConfig, LandscapeMode};
use deme_cli::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "deme", version, about = "Per-timestep-range diffusion finetuning and merging on toy 2-D data")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override such as `deme.p=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base model on the full timestep range.
    Pretrain,
    /// Pairwise gradient similarity between timestep buckets.
    ProbeGradients {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        buckets: Option<usize>,
    },
    /// Finetune one model per timestep range.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid-search merge weights and write the merged model.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        finetuned: Vec<PathBuf>,
    },
    /// Draw samples from one model or a timestep-wise ensemble.
    Sample {
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        ensemble: bool,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        /// Sampling seed; derived from the master seed when absent.
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sliced-Wasserstein distance to the data, plus per-range losses for checkpoints.
    Eval {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        samples: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference samples; generated from the dataset config when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Loss over a 2-D plane slice of parameter space.
    Landscape {
        /// `model` for the pretrained plane, `base ft_a ft_b` for the task-vector plane.
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<LandscapeMode>,
    },
    /// Per-layer task-vector magnitudes and pairwise cosines.
    TvStats {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        finetuned: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Pretrain => {
            let r = commands::pretrain(&cfg)?;
            println!("checkpoint {} (id {})", r.checkpoint.display(), r.id);
            println!("sliced_wasserstein untrained={:.6} trained={:.6}", r.initial_metric, r.final_metric);
        }
        Command::ProbeGradients { checkpoint, buckets } => {
            let r = commands::probe_gradients(&cfg, &checkpoint, buckets.unwrap_or(cfg.probe.buckets))?;
            println!("wrote {}", r.csv.display());
            println!("adjacent_mean={:.6} distant_mean={:.6} contrast={:.6}", r.adjacent, r.distant, r.adjacent - r.distant);
        }
        Command::Finetune { checkpoint } => {
            let r = commands::finetune(&cfg, &checkpoint)?;
            for (path, (base, ft)) in r.checkpoints.iter().zip(&r.range_losses) {
                println!("{} heldout_loss base={base:.6} finetuned={ft:.6}", path.display());
            }
        }
        Command::Merge { base, finetuned } => {
            let r = commands::merge_command(&cfg, &base, &finetuned)?;
            println!("wrote {} and {}", r.checkpoint.display(), r.log_csv.display());
            println!("weights={:?} score={:.6} points={} (coarse {})", r.weights.0, r.score, r.num_points, r.num_coarse);
        }
        Command::Sample { checkpoint, ensemble, n, sample_seed, output } => {
            let r = commands::sample(&cfg, &checkpoint, ensemble, n, sample_seed, output.as_deref())?;
            println!("wrote {} samples to {}", r.samples.rows(), r.csv.display());
        }
        Command::Eval { samples, checkpoint, reference } => {
            let input = match (samples, checkpoint) {
                (Some(s), None) => EvalInput::Samples(s),
                (None, Some(c)) => EvalInput::Checkpoint(c),
                _ => return Err(CliError::Config("give exactly one of --samples or --checkpoint".into())),
            };
            let r = commands::eval(&cfg, &input, reference.as_deref())?;
            println!("sliced_wasserstein={:.6}", r.sliced_wasserstein);
            for (i, l) in r.range_losses.iter().flatten().enumerate() {
                println!("range_{i}_loss={l:.6}");
            }
        }
        Command::Landscape { checkpoint, mode } => {
            let r = commands::landscape(&cfg, &checkpoint, mode.unwrap_or(cfg.landscape.mode))?;
            println!("wrote {}", r.csv.display());
            println!("gradient_proxy={:.6} origin_loss={:.6}", r.gradient_proxy, r.origin_loss);
            for (k, (a, b)) in r.endpoints.iter().enumerate() {
                println!("endpoint_{k} a={a:.6} b={b:.6}");
            }
        }
        Command::TvStats { base, finetuned } => {
            let r = commands::tv_stats(&cfg, &base, &finetuned)?;
            println!("wrote {} and {}", r.norms_csv.display(), r.cosine_csv.display());
            for (i, row) in r.stats.cosine.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:+.4}")).collect();
                println!("range {}: {}", r.source_ranges[i], cells.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
