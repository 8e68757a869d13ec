//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.
//!
//! The model-quality criteria (6, 7, 8, 10, 11) share one full pipeline run per
//! seed, driven through the same command functions as the `deme` binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use deme_cli::checkpoint::Checkpoint;
use deme_cli::commands::{self, EvalInput};
use deme_cli::config::{ExperimentConfig, LandscapeMode};
use deme_core::deme::{partition_ranges, sample_timestep};
use deme_core::denoiser::{init_params, predict, DenoiserConfig};
use deme_core::diffusion::{q_sample, ScheduleConfig};
use deme_core::graph::Graph;
use deme_core::merging::{ensemble_select, grid_search, merge, piecewise_weight, task_vector, GridSpec, MergeWeights};
use deme_core::rng::{normal_tensor, rng_from_seed};
use deme_core::training::{batch_loss, train, weighted_loss, DiffusionBatch, LossTarget, ReweightStrategy, TrainConfig};
use deme_core::{ParamSet, Tensor};
use rand::Rng;

/// Experiment used by the pipeline criteria.
const PIPELINE: &str = r#"
dataset.size = 20000
schedule.num_timesteps = 100
model.hidden_dims = [16, 16]
train.num_iterations = 20000
train.learning_rate = 3e-3
deme.N = 4
deme.p = 0.4
deme.num_iterations = 1500
deme.learning_rate = 5e-4
merge.coarse_step = 0.5
merge.refine_radius = 0.25
merge.fine_step = 0.25
merge.samples_per_eval = 10000
metric.num_samples = 10000
metric.reference_size = 10000
probe.buckets = 10
probe.samples_per_bucket = 512
landscape.resolution = 11
landscape.eval_samples = 1024
"#;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn majority(hits: usize, need: usize) -> bool {
    hits >= need
}

// ---------------------------------------------------------------- criterion 1

fn perturbed_params(cfg: &DenoiserConfig, seed: u64) -> ParamSet {
    let rng = std::cell::RefCell::new(rng_from_seed(seed ^ 0x5eed));
    init_params::<f64>(cfg, seed)
        .unwrap()
        .map(|t| t.add(&normal_tensor::<f64, _>(t.shape(), &mut *rng.borrow_mut()).scale(0.25)).unwrap())
}

fn autodiff_matches_finite_differences() -> Verdict {
    let start = Instant::now();
    let sched = ScheduleConfig::rescaled(50).build::<f64>().unwrap();
    let mut worst = 0.0f64;
    let mut coords = 0;
    let instances = 25;
    for seed in 0..instances {
        let mut rng = rng_from_seed(1000 + seed);
        let hidden: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=6)).collect();
        let mut cfg = DenoiserConfig::small(&hidden);
        cfg.time_embed_dim = 4;
        cfg.use_projection = seed % 2 == 0;
        let params = perturbed_params(&cfg, seed);
        let x0: Tensor = normal_tensor(&[4, 2], &mut rng);
        let batch = DiffusionBatch::draw(x0, &mut rng, &sched, |r| r.random_range(0..50)).unwrap();
        let strategy = ReweightStrategy::all_defaults()[seed as usize % 5];
        let target = [LossTarget::EpsPrediction, LossTarget::X0Prediction, LossTarget::VPrediction][seed as usize % 3];
        let loss = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let b = g.bind(p, grad);
            let l = batch_loss(&mut g, &b, &cfg, &batch, strategy, target, &sched).unwrap().loss;
            let v = g.value(l).item().unwrap();
            if grad {
                g.backward(l).unwrap();
                (v, Some(g.grads_for(&b).unwrap().flatten()))
            } else {
                (v, None)
            }
        };
        let analytic = loss(&params, true).1.unwrap();
        let flat = params.flatten();
        for k in 0..flat.len() {
            let h = 1e-5 * flat[k].abs().max(1.0);
            let at = |d: f64| {
                let mut f = flat.clone();
                f[k] += d;
                loss(&params.unflatten(&f).unwrap(), false).0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let scale = analytic[k].abs().max(fd.abs());
            if scale > 1e-8 {
                worst = worst.max((analytic[k] - fd).abs() / scale);
            }
            coords += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 60.0,
        format!("{instances} instances, {coords} coordinates, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn reweighting_family_is_equivalent() -> Verdict {
    let sched = ScheduleConfig::rescaled(100).build::<f64>().unwrap();
    let mut rng = rng_from_seed(2);
    let n = 1000;
    let x0: Tensor = normal_tensor(&[n, 2], &mut rng);
    let batch = DiffusionBatch::draw(x0, &mut rng, &sched, |r| r.random_range(0..100)).unwrap();
    let eps_hat: Tensor = normal_tensor(&[n, 2], &mut rng);
    let v_hat: Tensor = normal_tensor(&[n, 2], &mut rng);
    let per_sample = |pred: &Tensor, s, t| {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let nodes = weighted_loss(&mut g, p, &batch, s, t, &sched).unwrap();
        g.value(nodes.per_sample).data().to_vec()
    };
    let mut worst = 0.0f64;
    for s in ReweightStrategy::all_defaults() {
        let e = per_sample(&eps_hat, s, LossTarget::EpsPrediction);
        let v = per_sample(&v_hat, s, LossTarget::VPrediction);
        for i in 0..n {
            let ab = sched.alpha_bar[batch.ts[i]];
            let snr = ab / (1.0 - ab);
            let w = match s {
                ReweightStrategy::Standard => snr,
                ReweightStrategy::SnrPlusOne => snr + 1.0,
                ReweightStrategy::TruncatedSnr => snr.max(1.0),
                ReweightStrategy::MinSnrGamma { gamma } => snr.min(gamma),
                ReweightStrategy::P2 { k, gamma } => snr / (k + snr).powf(gamma),
            };
            let (mut oe, mut ov) = (0.0, 0.0);
            for j in 0..2 {
                let (x, xt) = (batch.x0.row(i)[j], batch.x_t.row(i)[j]);
                oe += (x - (xt - (1.0 - ab).sqrt() * eps_hat.row(i)[j]) / ab.sqrt()).powi(2);
                ov += (x - (ab.sqrt() * xt - (1.0 - ab).sqrt() * v_hat.row(i)[j])).powi(2);
            }
            worst = worst.max((e[i] - w * oe).abs() / (w * oe)).max((v[i] - w * ov).abs() / (w * ov));
        }
    }
    verdict(worst <= 1e-9, format!("5 strategies x {{eps, v}} x {n} draws, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn merge_identities_hold() -> Verdict {
    let cfg = DenoiserConfig::small(&[16, 16]).with_projection();
    let base = perturbed_params(&cfg, 30);
    let fts: Vec<ParamSet> = (0..4).map(|i| perturbed_params(&cfg, 31 + i)).collect();
    let tvs: Vec<_> = fts.iter().enumerate().map(|(i, f)| task_vector(&base, f, i).unwrap()).collect();
    let zero = merge(&base, &tvs, &MergeWeights::zeros(4)).unwrap() == base;
    let one_hot = (0..4).all(|i| merge(&base, &tvs, &MergeWeights::one_hot(4, i)).unwrap() == fts[i]);
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = merge(&base, &tvs, &MergeWeights(w.clone())).unwrap().flatten();
        let b = base.flatten();
        let taus: Vec<Vec<f64>> = tvs.iter().map(|t| t.flatten()).collect();
        for k in 0..b.len() {
            let oracle = b[k] + (0..4).map(|i| w[i] * taus[i][k]).sum::<f64>();
            worst = worst.max((m[k] - oracle).abs());
        }
    }
    verdict(
        zero && one_hot && worst <= 1e-12,
        format!("zero weights bitwise: {zero}; one-hot bitwise: {one_hot}; linearity max error {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn ensemble_index_law_holds() -> Verdict {
    let mut checked = 0u64;
    let mut bad = None;
    'outer: for t_max in 1..=10_000usize {
        for n in 1..=16.min(t_max) {
            let p = partition_ranges(t_max, n).unwrap();
            for (i, (lo, hi)) in p.ranges().enumerate() {
                for t in lo..hi {
                    if ensemble_select(t, &p) != i || (t * n) / t_max != i {
                        bad = Some((t_max, n, t));
                        break 'outer;
                    }
                }
                checked += (hi - lo) as u64;
            }
        }
    }
    match bad {
        None => verdict(true, format!("{checked} (T, N, t) triples, T <= 10^4, N <= 16")),
        Some((t, n, s)) => verdict(false, format!("mismatch at T={t} N={n} t={s}")),
    }
}

// ---------------------------------------------------------------- criterion 5

fn sampling_law_holds() -> Verdict {
    let partition = partition_ranges(1000, 4).unwrap();
    let draws = 100_000;
    let mut worst = 0.0f64;
    for (k, p) in [0.0, 0.3, 0.4, 1.0].into_iter().enumerate() {
        for i in 0..4 {
            let mut rng = rng_from_seed(500 + 10 * k as u64 + i as u64);
            let (lo, hi) = partition.range(i);
            let hits = (0..draws).filter(|_| (lo..hi).contains(&sample_timestep(i, &partition, p, &mut rng).unwrap())).count();
            let expected = 1.0 - p + p / 4.0;
            let sigma = (expected * (1.0 - expected) / draws as f64).sqrt();
            let dev = (hits as f64 / draws as f64 - expected).abs();
            worst = worst.max(if sigma == 0.0 { if dev == 0.0 { 0.0 } else { f64::INFINITY } } else { dev / sigma });
        }
    }
    verdict(worst <= 4.0, format!("p in {{0, 0.3, 0.4, 1}}, N=4, 10^5 draws each, worst deviation {worst:.2} sigma"))
}

// ---------------------------------------------------------------- criterion 9

fn piecewise_equivalence_holds() -> Verdict {
    let sched = ScheduleConfig::rescaled(100).build::<f64>().unwrap();
    let partition = partition_ranges(100, 4).unwrap();
    let cfg = DenoiserConfig::small(&[16, 16]);
    let params = init_params::<f64>(&cfg, 9).unwrap();
    let weights = MergeWeights(vec![0.4, 1.3, 0.7, 1.0]);
    let mut rng = rng_from_seed(90);
    let loss_at = |t: usize, rng: &mut deme_core::rng::SeededRng| {
        let x0: Tensor = normal_tensor(&[1, 2], rng);
        let eps: Tensor = normal_tensor(&[1, 2], rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let pred = predict(&params, &cfg, &xt, &[t]).unwrap();
        pred.sub(&eps).unwrap().data().iter().map(|d| d * d).sum::<f64>()
    };
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n)
    };
    let draws = 20_000;
    let (mut lhs, mut lhs_var) = (0.0, 0.0);
    for (i, (lo, hi)) in partition.ranges().enumerate() {
        let xs: Vec<f64> = (0..draws).map(|_| loss_at(rng.random_range(lo..hi), &mut rng)).collect();
        let (m, v) = stats(&xs);
        lhs += weights.0[i] * m;
        lhs_var += weights.0[i].powi(2) * v;
    }
    let ys: Vec<f64> = (0..4 * draws)
        .map(|_| {
            let t = rng.random_range(0..100);
            4.0 * piecewise_weight(t, &partition, &weights).unwrap() * loss_at(t, &mut rng)
        })
        .collect();
    let (rhs, rhs_var) = stats(&ys);
    let sigma = (lhs_var + rhs_var).sqrt();
    let z = (lhs - rhs).abs() / sigma;
    verdict(z <= 4.0, format!("sum w_i L_i = {lhs:.5}, E_t[N w(t) l(t)] = {rhs:.5}, |diff| = {z:.2} sigma"))
}

// ---------------------------------------------------------------- criterion 12

fn grid_search_is_correct() -> Verdict {
    let cfg = DenoiserConfig::small(&[4]);
    let base = perturbed_params(&cfg, 120);
    let fts: Vec<ParamSet> = (0..3).map(|i| perturbed_params(&cfg, 121 + i)).collect();
    let tvs: Vec<_> = fts.iter().enumerate().map(|(i, f)| task_vector(&base, f, i).unwrap()).collect();
    let target: Vec<f64> = perturbed_params(&cfg, 200).flatten();
    let objective = |p: &ParamSet| -> deme_core::Result<f64> {
        Ok(p.flatten().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum())
    };
    let mut argmin_ok = 0;
    let trials = 20;
    let mut rng = rng_from_seed(12);
    for _ in 0..trials {
        let values: Vec<Vec<f64>> =
            (0..3).map(|_| (0..rng.random_range(1..=5)).map(|_| (rng.random_range(-8..=8) as f64) * 0.25).collect()).collect();
        let grid = GridSpec::Explicit { values: values.clone() };
        let res = grid_search(&base, &tvs, &grid, objective).unwrap();
        // Exhaustive enumeration with the same tie-break.
        let mut best: Option<(f64, Vec<f64>)> = None;
        for a in &values[0] {
            for b in &values[1] {
                for c in &values[2] {
                    let w = vec![*a, *b, *c];
                    let s = objective(&merge(&base, &tvs, &MergeWeights(w.clone())).unwrap()).unwrap();
                    let better = match &best {
                        None => true,
                        Some((bs, bw)) => s < *bs || (s == *bs && w < *bw),
                    };
                    if better {
                        best = Some((s, w));
                    }
                }
            }
        }
        let (bs, bw) = best.unwrap();
        if res.score == bs && res.weights.0 == bw && res.log.len() <= 200 {
            argmin_ok += 1;
        }
    }
    let mut refine_ok = 0;
    for k in 0..10 {
        let grid = GridSpec::CoarseToFine { lo: -1.0, hi: 1.0, coarse_step: 0.5 + 0.1 * k as f64, refine_radius: 0.3, fine_step: 0.1 };
        let res = grid_search(&base, &tvs, &grid, objective).unwrap();
        let coarse_best = res.log[..res.num_coarse].iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
        if res.score <= coarse_best {
            refine_ok += 1;
        }
    }
    verdict(
        argmin_ok == trials && refine_ok == 10,
        format!("argmin == exhaustive on {argmin_ok}/{trials} grids; refinement no worse on {refine_ok}/10"),
    )
}

// ---------------------------------------------------------------- criterion 13

fn commands_are_deterministic() -> Verdict {
    const TINY: &str = "seed = 13\ndataset.size = 300\nmodel.hidden_dims = [8]\nmodel.time_embed_dim = 8\n\
        schedule.num_timesteps = 40\ntrain.num_iterations = 10\ntrain.batch_size = 16\ndeme.num_iterations = 4\n\
        deme.batch_size = 16\nmerge.values = [[0, 1], [0, 1], [0, 1], [0, 1]]\nmerge.samples_per_eval = 32\n\
        metric.num_samples = 64\nmetric.reference_size = 64\nmetric.num_projections = 8\nmetric.steps = 4\n\
        probe.buckets = 4\nprobe.samples_per_bucket = 16\nlandscape.resolution = 3\nlandscape.eval_samples = 16\n";
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let run = |out: &str, args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_deme"))
            .current_dir(dir.path())
            .env("SOURCE_DATE_EPOCH", "1")
            .args(["--config", "c.toml", "--out", out])
            .args(args)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    for out in ["a", "b"] {
        let ck = |n: &str| format!("{out}/{n}");
        let fts: Vec<String> = (0..4).map(|i| ck(&format!("finetuned_{i}.ckpt"))).collect();
        let f: Vec<&str> = fts.iter().map(String::as_str).collect();
        let base = ck("pretrained.ckpt");
        let steps: Vec<Vec<&str>> = vec![
            vec!["pretrain"],
            vec!["probe-gradients", "--checkpoint", &base],
            vec!["finetune", "--checkpoint", &base],
            [vec!["merge", "--base", &base, "--finetuned"], f.clone()].concat(),
            [vec!["sample", "--ensemble", "-n", "9", "--checkpoint"], f.clone()].concat(),
            vec!["eval", "--checkpoint", &base],
            vec!["landscape", "--mode", "task-vector-plane", "--checkpoint", &base, f[0], f[1]],
            [vec!["tv-stats", "--base", &base, "--finetuned"], f.clone()].concat(),
        ];
        for s in &steps {
            run(out, s);
        }
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    let differing: Vec<_> = files
        .iter()
        .filter(|n| std::fs::read(dir.path().join("a").join(n)).unwrap() != std::fs::read(dir.path().join("b").join(n)).unwrap())
        .collect();
    let ck_path = dir.path().join("a/merged.ckpt");
    let ck = Checkpoint::load(&ck_path).unwrap();
    let resaved = dir.path().join("resaved.ckpt");
    ck.save(&resaved).unwrap();
    let roundtrip = std::fs::read(&resaved).unwrap() == std::fs::read(&ck_path).unwrap()
        && Checkpoint::load(&resaved).unwrap().params == ck.params;
    verdict(
        differing.is_empty() && roundtrip,
        format!("{} artifacts from 8 commands compared, {} differ; checkpoint round trip bitwise: {roundtrip}", files.len(), differing.len()),
    )
}

// ------------------------------------------------------- pipeline criteria

struct SeedRun {
    seed: u64,
    adjacent: f64,
    distant: f64,
    range_losses: Vec<(f64, f64)>,
    base_sw: f64,
    ensemble_sw: f64,
    merged_sw: f64,
    reweight_sw: f64,
    merge_weights: Vec<f64>,
    proxy_restricted: f64,
    proxy_full: f64,
    origin_exact: bool,
    cosine: Vec<Vec<f64>>,
    seconds: f64,
    probe_seconds: f64,
}

fn pipeline_config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(PIPELINE, &[format!("seed={seed}")]).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn run_seed(seed: u64, root: &Path) -> SeedRun {
    let start = Instant::now();
    let out = root.join(format!("seed{seed}"));
    let cfg = pipeline_config(seed, &out);
    let pre = commands::pretrain(&cfg).unwrap();
    let base_path = pre.checkpoint.clone();

    let probe_start = Instant::now();
    let probe = commands::probe_gradients(&cfg, &base_path, cfg.probe.buckets).unwrap();
    let probe_seconds = probe_start.elapsed().as_secs_f64();

    let ft = commands::finetune(&cfg, &base_path).unwrap();
    let merged = commands::merge_command(&cfg, &base_path, &ft.checkpoints).unwrap();
    let eval_seed = cfg.sub_seed("eval/sample");
    let sw = |path: &PathBuf| commands::eval(&cfg, &EvalInput::Checkpoint(path.clone()), None).unwrap().sliced_wasserstein;
    let base_sw = sw(&base_path);
    let merged_sw = sw(&merged.checkpoint);
    let ens = commands::sample(&cfg, &ft.checkpoints, true, cfg.metric.num_samples, Some(eval_seed), Some(&out.join("ensemble.csv"))).unwrap();
    let ensemble_sw = commands::eval(&cfg, &EvalInput::Samples(ens.csv), None).unwrap().sliced_wasserstein;

    // Loss-reweighting baseline: min-SNR finetuning of the base for the same total iterations.
    let base = Checkpoint::load(&base_path).unwrap();
    let tc = TrainConfig {
        batch_size: cfg.deme.batch_size,
        num_iterations: cfg.deme.num_iterations * cfg.deme.num_ranges,
        optimizer: cfg.finetune_optimizer(),
        seed: cfg.sub_seed("reweight"),
    };
    let sched = base.schedule.build::<f64>().unwrap();
    let data = commands::dataset(&cfg).unwrap();
    let rw = train(&base.params, &data, &tc, &base.architecture, &sched, ReweightStrategy::min_snr(), LossTarget::EpsPrediction).unwrap();
    let rw_path = out.join("reweighted.ckpt");
    Checkpoint::new(base.architecture.clone(), base.schedule, Default::default(), rw.params).save(&rw_path).unwrap();
    let reweight_sw = sw(&rw_path);

    let quarter = cfg.schedule.num_timesteps / 4;
    let land = |t_end: Option<usize>| {
        let mut c = cfg.clone();
        c.landscape.t_start = t_end.map(|_| 0);
        c.landscape.t_end = t_end;
        commands::landscape(&c, &[base_path.clone()], LandscapeMode::PretrainedPlane).unwrap()
    };
    let restricted = land(Some(quarter));
    let full = land(None);
    let mid = restricted.grid.resolution() / 2;
    let origin_exact = restricted.grid.values[mid][mid] == restricted.origin_loss && full.grid.values[mid][mid] == full.origin_loss;

    let tv = commands::tv_stats(&cfg, &base_path, &ft.checkpoints).unwrap();
    SeedRun {
        seed,
        adjacent: probe.adjacent,
        distant: probe.distant,
        range_losses: ft.range_losses,
        base_sw,
        ensemble_sw,
        merged_sw,
        reweight_sw,
        merge_weights: merged.weights.0,
        proxy_restricted: restricted.gradient_proxy,
        proxy_full: full.gradient_proxy,
        origin_exact,
        cosine: tv.stats.cosine,
        seconds: start.elapsed().as_secs_f64(),
        probe_seconds,
    }
}

fn gradient_pattern(runs: &[SeedRun]) -> Verdict {
    let hits = runs.iter().filter(|r| r.adjacent > r.distant).count();
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.adjacent, r.distant)).collect();
    let secs: f64 = runs.iter().map(|r| r.probe_seconds).sum();
    verdict(
        majority(hits, 4) && secs < 600.0,
        format!("adjacent > distant in {hits}/5 seeds (adjacent/distant: {}), probes {secs:.0}s", detail.join(", ")),
    )
}

fn finetuning_gain(runs: &[SeedRun]) -> Verdict {
    let hits = runs.iter().filter(|r| r.range_losses.iter().all(|(b, f)| f <= b)).count();
    let worst: Vec<String> = runs
        .iter()
        .map(|r| {
            let rel = r.range_losses.iter().map(|(b, f)| (f - b) / b).fold(f64::NEG_INFINITY, f64::max);
            format!("{:+.2}%", 100.0 * rel)
        })
        .collect();
    verdict(
        majority(hits, 4),
        format!("all 4 ranges improve in {hits}/5 seeds (worst relative change per seed: {})", worst.join(", ")),
    )
}

fn end_to_end_gain(runs: &[SeedRun]) -> Verdict {
    let ens = runs.iter().filter(|r| r.ensemble_sw < r.base_sw).count();
    let mer = runs.iter().filter(|r| r.merged_sw < r.base_sw).count();
    let rw = runs.iter().filter(|r| r.base_sw - r.reweight_sw < r.base_sw - r.merged_sw).count();
    let total: f64 = runs.iter().map(|r| r.seconds).sum();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("s{}: base {:.4} ens {:.4} merged {:.4} rw {:.4}", r.seed, r.base_sw, r.ensemble_sw, r.merged_sw, r.reweight_sw))
        .collect();
    verdict(
        majority(ens, 4) && majority(mer, 4) && majority(rw, 3) && total < 1800.0,
        format!(
            "ensemble < base {ens}/5, merged < base {mer}/5, reweighting gain < merged gain {rw}/5, pipeline {total:.0}s [{}]",
            detail.join("; ")
        ),
    )
}

fn landscape_pattern(runs: &[SeedRun]) -> Verdict {
    let hits = runs.iter().filter(|r| r.proxy_restricted > r.proxy_full).count();
    let exact = runs.iter().all(|r| r.origin_exact);
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.4}/{:.4}", r.proxy_restricted, r.proxy_full)).collect();
    verdict(
        majority(hits, 4) && exact,
        format!("restricted > full in {hits}/5 seeds ({}); origin cell exact: {exact}", detail.join(", ")),
    )
}

fn task_vector_geometry(runs: &[SeedRun]) -> Verdict {
    let max_far = |c: &Vec<Vec<f64>>| {
        let mut m = 0.0f64;
        for i in 0..c.len() {
            for j in i + 2..c.len() {
                m = m.max(c[i][j].abs());
            }
        }
        m
    };
    let hits = runs.iter().filter(|r| max_far(&r.cosine) < 0.5).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            let c = &r.cosine;
            format!("s{}: adj [{:.2} {:.2} {:.2}] far [{:.2} {:.2} {:.2}]", r.seed, c[0][1], c[1][2], c[2][3], c[0][2], c[1][3], c[0][3])
        })
        .collect();
    verdict(majority(hits, 4), format!("non-adjacent |cos| < 0.5 in {hits}/5 seeds [{}]", detail.join("; ")))
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        println!("  [{n:>2}] {name}: {} ({:.1}s)", if v.pass { "ok" } else { "not met" }, t.elapsed().as_secs_f64());
        results.push((n, name, v));
    };
    record(1, "autodiff vs finite differences", &autodiff_matches_finite_differences);
    record(2, "reweighting-family equivalence", &reweighting_family_is_equivalent);
    record(3, "merge identities", &merge_identities_hold);
    record(4, "ensemble index law", &ensemble_index_law_holds);
    record(5, "probabilistic sampling law", &sampling_law_holds);
    record(9, "piecewise-weighting equivalence", &piecewise_equivalence_holds);
    record(12, "grid-search correctness", &grid_search_is_correct);
    record(13, "determinism and persistence", &commands_are_deterministic);

    let root = tempfile::tempdir().unwrap();
    let runs: Vec<SeedRun> = SEEDS
        .iter()
        .map(|&s| {
            let r = run_seed(s, root.path());
            println!("  seed {s} pipeline finished in {:.0}s (merge weights {:?})", r.seconds, r.merge_weights);
            r
        })
        .collect();
    record(6, "gradient-conflict pattern", &|| gradient_pattern(&runs));
    record(7, "decoupled-finetuning gain", &|| finetuning_gain(&runs));
    record(8, "end-to-end gain", &|| end_to_end_gain(&runs));
    record(10, "landscape pattern", &|| landscape_pattern(&runs));
    record(11, "task-vector geometry", &|| task_vector_geometry(&runs));

    results.sort_by_key(|r| r.0);
    println!();
    for (n, name, v) in &results {
        println!("{} criterion {n:>2} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("\n{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
