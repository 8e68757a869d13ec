//! Task vectors, weighted merging, timestep-wise ensembles and merge-weight search.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deme::RangePartition;
use crate::denoiser::{predict, DenoiserConfig};
use crate::diffusion::{sample_loop, sample_trajectory, NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `tau_i = theta_i - theta`, remembering which range produced it.
///
/// The finetuned endpoint is kept next to the difference so that merging can
/// reproduce it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector<S> {
    entries: ParamSet<S>,
    finetuned: ParamSet<S>,
    base_fingerprint: u64,
    source_range: usize,
}

fn fingerprint<S: Real>(params: &ParamSet<S>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.iter() {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in t.data() {
            h = (h ^ v.to_f64_lossy().to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn task_vector<S: Real>(base: &ParamSet<S>, finetuned: &ParamSet<S>, source_range: usize) -> Result<TaskVector<S>> {
    let entries = finetuned.zip_with(base, |a, b| a.sub(b))?;
    Ok(TaskVector { entries, finetuned: finetuned.clone(), base_fingerprint: fingerprint(base), source_range })
}

impl<S: Real> TaskVector<S> {
    pub fn entries(&self) -> &ParamSet<S> {
        &self.entries
    }

    pub fn finetuned(&self) -> &ParamSet<S> {
        &self.finetuned
    }

    pub fn source_range(&self) -> usize {
        self.source_range
    }

    pub fn flatten(&self) -> Vec<S> {
        self.entries.flatten()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().flat_map(|(_, t)| t.data()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
    }

    /// Euclidean norm of each named parameter's difference.
    pub fn layer_norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()))
            .collect()
    }
}

/// One real weight per task vector. Any finite values are allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights(pub Vec<f64>);

impl MergeWeights {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.0.iter().find(|w| !w.is_finite()) {
            return Err(Error::Config(format!("merge weight {w} is not finite")));
        }
        Ok(())
    }
}

/// `theta + sum_i w_i tau_i`.
///
/// Evaluated as `(1 - sum w) theta + sum w_i theta_i` with zero coefficients
/// skipped, so zero weights give `theta` and one-hot weights give `theta_i`
/// bit for bit.
pub fn merge<S: Real>(base: &ParamSet<S>, task_vectors: &[TaskVector<S>], weights: &MergeWeights) -> Result<ParamSet<S>> {
    if task_vectors.len() != weights.len() {
        return Err(Error::Config(format!("{} task vectors but {} weights", task_vectors.len(), weights.len())));
    }
    weights.validate()?;
    let fp = fingerprint(base);
    for tv in task_vectors {
        base.check_aligned(&tv.entries)?;
        if tv.base_fingerprint != fp {
            return Err(Error::Alignment(format!(
                "task vector for range {} was computed against a different base",
                tv.source_range
            )));
        }
    }
    let c0 = 1.0 - weights.0.iter().sum::<f64>();
    let mut terms: Vec<(S, &ParamSet<S>)> = Vec::with_capacity(task_vectors.len() + 1);
    if c0 != 0.0 {
        terms.push((S::of(c0), base));
    }
    for (tv, &w) in task_vectors.iter().zip(&weights.0) {
        if w != 0.0 {
            terms.push((S::of(w), &tv.finetuned));
        }
    }
    let mut out = ParamSet::new();
    for (name, theta) in base.iter() {
        let slices: Vec<(S, &[S])> = terms.iter().map(|(c, p)| (*c, p.get(name).expect("aligned").data())).collect();
        let data = (0..theta.len())
            .map(|k| {
                let mut it = slices.iter().map(|(c, d)| *c * d[k]);
                let first = it.next().unwrap_or_else(S::zero);
                it.fold(first, |acc, v| acc + v)
            })
            .collect();
        out.insert(name.clone(), Tensor::new(theta.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Piecewise-constant weight `w(t) = w_i` for `t` in range `i`.
pub fn piecewise_weight(t: usize, partition: &RangePartition, weights: &MergeWeights) -> Result<f64> {
    if weights.len() != partition.num_ranges() {
        return Err(Error::Config(format!("{} weights for {} ranges", weights.len(), partition.num_ranges())));
    }
    Ok(weights.0[partition.containing(t)?])
}

/// Index of the specialist responsible for timestep `t`: `floor(t N / T)`.
pub fn ensemble_select(t: usize, partition: &RangePartition) -> usize {
    let n = partition.num_ranges();
    let i = (t as u128 * n as u128 / partition.num_timesteps() as u128) as usize;
    i.min(n - 1)
}

fn check_ensemble<S: Real>(models: &[ParamSet<S>], config: &DenoiserConfig, partition: &RangePartition) -> Result<()> {
    if models.len() != partition.num_ranges() {
        return Err(Error::Config(format!("{} models for {} ranges", models.len(), partition.num_ranges())));
    }
    models.iter().try_for_each(|m| config.check_params(m))
}

/// Reverse chain where each step is denoised by the model owning its timestep.
pub fn ensemble_sample_loop<S: Real>(
    models: &[ParamSet<S>],
    config: &DenoiserConfig,
    partition: &RangePartition,
    sched: &NoiseSchedule<S>,
    sampler: &Sampler,
    n: usize,
    seed: u64,
) -> Result<Tensor<S>> {
    check_ensemble(models, config, partition)?;
    sample_loop(
        |x, t| predict(&models[ensemble_select(t, partition)], config, x, &vec![t; x.rows()]),
        sched,
        sampler,
        n,
        config.data_dim,
        seed,
    )
}

/// Like [`ensemble_sample_loop`] but returns every intermediate state.
pub fn ensemble_sample_trajectory<S: Real>(
    models: &[ParamSet<S>],
    config: &DenoiserConfig,
    partition: &RangePartition,
    sched: &NoiseSchedule<S>,
    sampler: &Sampler,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<S>>> {
    check_ensemble(models, config, partition)?;
    sample_trajectory(
        |x, t| predict(&models[ensemble_select(t, partition)], config, x, &vec![t; x.rows()]),
        sched,
        sampler,
        n,
        config.data_dim,
        seed,
    )
}

/// Search space for merge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// Cartesian product of one value list per weight.
    Explicit { values: Vec<Vec<f64>> },
    /// A coarse lattice over `[lo, hi]`, then a fine lattice of half-width
    /// `refine_radius` around the coarse winner.
    CoarseToFine { lo: f64, hi: f64, coarse_step: f64, refine_radius: f64, fine_step: f64 },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::CoarseToFine { lo: 0.0, hi: 1.0, coarse_step: 0.25, refine_radius: 0.25, fine_step: 0.05 }
    }
}

fn snap(v: f64) -> f64 {
    let s = (v * 1e12).round() / 1e12;
    if s == 0.0 {
        0.0
    } else {
        s
    }
}

fn lattice(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=count).map(|k| snap(lo + k as f64 * step)).collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

impl GridSpec {
    pub fn validate(&self, num_weights: usize) -> Result<()> {
        match self {
            GridSpec::Explicit { values } => {
                if values.len() != num_weights {
                    return Err(Error::Config(format!("grid has {} axes for {num_weights} weights", values.len())));
                }
                if values.iter().any(Vec::is_empty) {
                    return Err(Error::Config("grid axes must be non-empty".into()));
                }
                if values.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config("grid values must be finite".into()));
                }
            }
            &GridSpec::CoarseToFine { lo, hi, coarse_step, refine_radius, fine_step } => {
                let finite = [lo, hi, coarse_step, refine_radius, fine_step].iter().all(|v| v.is_finite());
                if !finite || hi < lo || coarse_step <= 0.0 || fine_step <= 0.0 || refine_radius < 0.0 {
                    return Err(Error::Config("coarse-to-fine grid needs lo <= hi and positive steps".into()));
                }
                if fine_step > coarse_step {
                    return Err(Error::Config("fine step must not exceed the coarse step".into()));
                }
            }
        }
        Ok(())
    }

    /// Points evaluated before refinement, in lexicographic order.
    pub fn coarse_points(&self, num_weights: usize) -> Result<Vec<Vec<f64>>> {
        self.validate(num_weights)?;
        let mut pts = match self {
            GridSpec::Explicit { values } => {
                let axes: Vec<Vec<f64>> = values.iter().map(|a| a.iter().map(|&v| snap(v)).collect()).collect();
                cartesian(&axes)
            }
            &GridSpec::CoarseToFine { lo, hi, coarse_step, .. } => cartesian(&vec![lattice(lo, hi, coarse_step); num_weights]),
        };
        pts.sort_by(|a, b| lex_cmp(a, b));
        pts.dedup();
        Ok(pts)
    }

    /// Fine lattice around `center`, excluding points already in `seen`.
    fn refinement_points(&self, center: &[f64], seen: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let &GridSpec::CoarseToFine { refine_radius, fine_step, .. } = self else {
            return Vec::new();
        };
        let k = (refine_radius / fine_step + 1e-9).floor() as i64;
        let axes: Vec<Vec<f64>> =
            center.iter().map(|&c| (-k..=k).map(|j| snap(c + j as f64 * fine_step)).collect()).collect();
        let mut pts: Vec<Vec<f64>> = cartesian(&axes).into_iter().filter(|p| !seen.contains(p)).collect();
        pts.sort_by(|a, b| lex_cmp(a, b));
        pts.dedup();
        pts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub weights: MergeWeights,
    pub score: f64,
    /// Every evaluated point: coarse points first, then refinement points.
    pub log: Vec<(MergeWeights, f64)>,
    pub num_coarse: usize,
}

fn evaluate_points<S, F>(base: &ParamSet<S>, tvs: &[TaskVector<S>], points: &[Vec<f64>], eval_fn: &F) -> Result<Vec<f64>>
where
    S: Real,
    F: Fn(&ParamSet<S>) -> Result<f64> + Sync,
{
    points
        .par_iter()
        .map(|w| {
            let weights = MergeWeights(w.clone());
            let merged = merge(base, tvs, &weights)?;
            eval_fn(&merged).map_err(|e| Error::Evaluation { weights: w.clone(), source: Box::new(e) })
        })
        .collect()
}

fn best_of(log: &[(MergeWeights, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (w, s)) in log.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bw, bs) = &log[b];
                match s.partial_cmp(bs).expect("non-NaN") {
                    Ordering::Less => Some(i),
                    Ordering::Equal if lex_cmp(&w.0, &bw.0).is_lt() => Some(i),
                    _ => Some(b),
                }
            }
        };
    }
    best
}

/// Minimises `eval_fn(merge(base, tvs, w))` over the grid. Lower is better.
///
/// Ties go to the lexicographically smallest weights; NaN scores are logged
/// and never selected.
pub fn grid_search<S, F>(base: &ParamSet<S>, tvs: &[TaskVector<S>], grid: &GridSpec, eval_fn: F) -> Result<GridSearchResult>
where
    S: Real,
    F: Fn(&ParamSet<S>) -> Result<f64> + Sync,
{
    let coarse = grid.coarse_points(tvs.len())?;
    let scores = evaluate_points(base, tvs, &coarse, &eval_fn)?;
    let mut log: Vec<(MergeWeights, f64)> = coarse.iter().cloned().map(MergeWeights).zip(scores).collect();
    let num_coarse = log.len();
    for (w, s) in &log {
        if s.is_nan() {
            log::warn!("merge weights {:?} scored NaN and are disqualified", w.0);
        }
    }
    let coarse_best = best_of(&log).ok_or_else(|| Error::Degenerate("every grid point scored NaN".into()))?;

    let fine = grid.refinement_points(&log[coarse_best].0 .0, &coarse);
    if !fine.is_empty() {
        let scores = evaluate_points(base, tvs, &fine, &eval_fn)?;
        for (w, s) in fine.into_iter().zip(scores) {
            if s.is_nan() {
                log::warn!("merge weights {w:?} scored NaN and are disqualified");
            }
            log.push((MergeWeights(w), s));
        }
    }
    let best = best_of(&log).expect("coarse winner is still present");
    log::info!("grid search: {} points, best {:?} -> {}", log.len(), log[best].0 .0, log[best].1);
    Ok(GridSearchResult { weights: log[best].0.clone(), score: log[best].1, log, num_coarse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deme::partition_ranges;
    use crate::denoiser::init_params;
    use crate::diffusion::make_linear_schedule;
    use crate::rng::{normal, rng_from_seed};
    use proptest::prelude::*;

    fn toy() -> (ParamSet<f64>, Vec<ParamSet<f64>>) {
        let cfg = DenoiserConfig::small(&[6, 6]);
        let base = init_params::<f64>(&cfg, 0).unwrap();
        let fts = (1..=3).map(|s| init_params::<f64>(&cfg, s).unwrap()).collect();
        (base, fts)
    }

    fn tvs(base: &ParamSet<f64>, fts: &[ParamSet<f64>]) -> Vec<TaskVector<f64>> {
        fts.iter().enumerate().map(|(i, f)| task_vector(base, f, i).unwrap()).collect()
    }

    #[test]
    fn task_vector_basics() {
        let (base, fts) = toy();
        let zero = task_vector(&base, &base, 0).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        let tv = task_vector(&base, &fts[0], 0).unwrap();
        // Flat oracle for per-layer norms.
        let mut offset = 0;
        let (fb, ff) = (base.flatten(), fts[0].flatten());
        for ((name, norm), (_, t)) in tv.layer_norms().iter().zip(base.iter()) {
            let oracle = (offset..offset + t.len()).map(|k| (ff[k] - fb[k]).powi(2)).sum::<f64>().sqrt();
            assert!((norm - oracle).abs() < 1e-12, "{name}");
            offset += t.len();
        }
        let mut bad = fts[0].clone();
        bad.remove("block0.bias");
        assert!(matches!(task_vector(&base, &bad, 0), Err(Error::Alignment(m)) if m.contains("block0.bias")));
    }

    #[test]
    fn merge_identities() {
        let (base, fts) = toy();
        let tvs = tvs(&base, &fts);
        assert_eq!(merge(&base, &tvs, &MergeWeights::zeros(3)).unwrap(), base);
        for i in 0..3 {
            assert_eq!(merge(&base, &tvs, &MergeWeights::one_hot(3, i)).unwrap(), fts[i]);
        }
        let reconstructed = base.zip_with(tvs[1].entries(), |a, b| a.add(b)).unwrap();
        for (a, b) in reconstructed.flatten().iter().zip(fts[1].flatten()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert!(merge(&base, &tvs, &MergeWeights::zeros(2)).is_err());
        assert!(merge(&base, &tvs, &MergeWeights(vec![f64::NAN, 0.0, 0.0])).is_err());
        assert!(matches!(merge(&fts[2], &tvs, &MergeWeights::zeros(3)), Err(Error::Alignment(_))));
    }

    #[test]
    fn midpoint_matches_scalar_oracle() {
        let (base, fts) = toy();
        let tvs = tvs(&base, &fts[..2]);
        let m = merge(&base, &tvs, &MergeWeights(vec![0.5, 0.5])).unwrap().flatten();
        let (b, f1, f2) = (base.flatten(), fts[0].flatten(), fts[1].flatten());
        for k in 0..b.len() {
            let oracle = b[k] + 0.5 * (f1[k] - b[k]) + 0.5 * (f2[k] - b[k]);
            assert!((m[k] - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn merge_is_linear_in_weights(w in prop::collection::vec(-2.0f64..2.0, 3), a in -3.0f64..3.0) {
            let (base, fts) = toy();
            let tvs = tvs(&base, &fts);
            let scaled = MergeWeights(w.iter().map(|v| a * v).collect());
            let lhs = merge(&base, &tvs, &scaled).unwrap().flatten();
            let rhs = merge(&base, &tvs, &MergeWeights(w)).unwrap().flatten();
            for ((l, r), b) in lhs.iter().zip(&rhs).zip(base.flatten()) {
                prop_assert!(((l - b) - a * (r - b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn piecewise_lookup() {
        let part = partition_ranges(1000, 4).unwrap();
        let w = MergeWeights(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(piecewise_weight(0, &part, &w).unwrap(), 1.0);
        assert_eq!(piecewise_weight(250, &part, &w).unwrap(), 2.0);
        assert_eq!(piecewise_weight(999, &part, &w).unwrap(), 4.0);
        let u = MergeWeights(vec![0.7; 4]);
        assert!((0..1000).all(|t| piecewise_weight(t, &part, &u).unwrap() == 0.7));
        assert!(piecewise_weight(1000, &part, &w).is_err());
    }

    #[test]
    fn ensemble_index_law() {
        let part = partition_ranges(1000, 4).unwrap();
        assert_eq!([0, 249, 250, 999].map(|t| ensemble_select(t, &part)), [0, 0, 1, 3]);
        let one = partition_ranges(17, 1).unwrap();
        assert!((0..17).all(|t| ensemble_select(t, &one) == 0));
        for t_max in [1, 7, 10, 64, 99, 100] {
            for n in 1..=t_max.min(16) {
                let p = partition_ranges(t_max, n).unwrap();
                for t in 0..t_max {
                    assert_eq!(ensemble_select(t, &p), p.containing(t).unwrap());
                }
            }
        }
    }

    fn sampling_setup() -> (DenoiserConfig, ParamSet<f64>, NoiseSchedule<f64>) {
        let cfg = DenoiserConfig::small(&[8, 8]);
        (cfg.clone(), init_params(&cfg, 5).unwrap(), make_linear_schedule(20, 1e-3, 0.3).unwrap())
    }

    #[test]
    fn identical_ensemble_equals_single_model() {
        let (cfg, p, s) = sampling_setup();
        let part = partition_ranges(20, 4).unwrap();
        for sampler in [Sampler::ddpm(20), Sampler::ddim(7)] {
            let single = sample_loop(|x, t| predict(&p, &cfg, x, &vec![t; x.rows()]), &s, &sampler, 9, 2, 3).unwrap();
            let ens = ensemble_sample_loop(&vec![p.clone(); 4], &cfg, &part, &s, &sampler, 9, 3).unwrap();
            assert_eq!(single, ens);
            assert_eq!(ens, ensemble_sample_loop(&vec![p.clone(); 4], &cfg, &part, &s, &sampler, 9, 3).unwrap());
        }
        assert!(matches!(ensemble_sample_loop(&vec![p; 3], &cfg, &part, &s, &Sampler::ddim(5), 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stub_changes_only_its_steps() {
        let (cfg, p, s) = sampling_setup();
        let part = partition_ranges(20, 2).unwrap();
        // All-zero weights make the network output exactly zero.
        let stub = p.map(|t| Tensor::zeros(t.shape()));
        let sampler = Sampler::ddim(20);
        let steps = sampler.timesteps(20).unwrap();
        let reference = ensemble_sample_trajectory(&[p.clone(), p.clone()], &cfg, &part, &s, &sampler, 6, 1).unwrap();
        let mixed = ensemble_sample_trajectory(&[p.clone(), stub], &cfg, &part, &s, &sampler, 6, 1).unwrap();
        // Steps are visited from high t to low t: the stub owns the first half.
        let first_diff = (0..reference.len()).find(|&k| reference[k] != mixed[k]).unwrap();
        assert_eq!(first_diff, 1);
        assert!(ensemble_select(steps[0], &part) == 1);
        assert_eq!(reference[0], mixed[0]);
    }

    #[test]
    fn stub_in_low_range_leaves_early_steps_unchanged() {
        let (cfg, p, s) = sampling_setup();
        let part = partition_ranges(20, 2).unwrap();
        let stub = p.map(|t| Tensor::zeros(t.shape()));
        let sampler = Sampler::ddim(20);
        let steps = sampler.timesteps(20).unwrap();
        let reference = ensemble_sample_trajectory(&[p.clone(), p.clone()], &cfg, &part, &s, &sampler, 6, 1).unwrap();
        let mixed = ensemble_sample_trajectory(&[stub, p.clone()], &cfg, &part, &s, &sampler, 6, 1).unwrap();
        for (k, &t) in steps.iter().enumerate() {
            // State k + 1 is produced by the step at timestep t.
            if ensemble_select(t, &part) == 1 {
                assert_eq!(reference[k + 1], mixed[k + 1], "t={t}");
            } else {
                assert_ne!(reference[k + 1], mixed[k + 1], "t={t}");
            }
        }
    }

    fn quadratic_tvs() -> (ParamSet<f64>, Vec<TaskVector<f64>>) {
        let mut base = ParamSet::new();
        base.insert("w", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let mut a = ParamSet::new();
        a.insert("w", Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        let mut b = ParamSet::new();
        b.insert("w", Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        (base.clone(), vec![task_vector(&base, &a, 0).unwrap(), task_vector(&base, &b, 1).unwrap()])
    }

    fn bowl(cx: f64, cy: f64) -> impl Fn(&ParamSet<f64>) -> Result<f64> + Sync {
        move |p| {
            let w = p.require("w")?.data();
            Ok((w[0] - cx).powi(2) + 2.0 * (w[1] - cy).powi(2))
        }
    }

    #[test]
    fn explicit_grids() {
        let (base, tvs) = quadratic_tvs();
        let single = GridSpec::Explicit { values: vec![vec![0.3], vec![0.6]] };
        let r = grid_search(&base, &tvs, &single, bowl(0.5, 0.5)).unwrap();
        assert_eq!(r.weights.0, vec![0.3, 0.6]);
        assert_eq!(r.log.len(), 1);
        let g = GridSpec::Explicit { values: vec![vec![0.0, 0.5, 1.0]; 2] };
        let r = grid_search(&base, &tvs, &g, bowl(0.5, 0.5)).unwrap();
        assert_eq!(r.weights.0, vec![0.5, 0.5]);
        assert_eq!(r.score, 0.0);
        assert_eq!(r.log.len(), 9);
    }

    #[test]
    fn ties_nan_and_failures() {
        let (base, tvs) = quadratic_tvs();
        let g = GridSpec::Explicit { values: vec![vec![1.0, 0.0], vec![0.0, 1.0]] };
        let r = grid_search(&base, &tvs, &g, |_| Ok(1.0)).unwrap();
        assert_eq!(r.weights.0, vec![0.0, 0.0]);
        let r = grid_search(&base, &tvs, &g, |p| {
            let w = p.require("w")?.data();
            Ok(if w[0] == 0.0 { f64::NAN } else { 2.0 - w[1] })
        })
        .unwrap();
        assert_eq!(r.weights.0, vec![1.0, 1.0]);
        let err = grid_search(&base, &tvs, &g, |p| {
            if p.require("w")?.data()[0] == 1.0 {
                Err(Error::Degenerate("boom".into()))
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation { ref weights, .. } if weights[0] == 1.0));
        let bad = GridSpec::CoarseToFine { lo: 0.0, hi: 1.0, coarse_step: 0.1, refine_radius: 0.1, fine_step: 0.2 };
        assert!(matches!(grid_search(&base, &tvs, &bad, |_| Ok(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn refinement_matches_exhaustive_fine_grid() {
        let (base, tvs) = quadratic_tvs();
        let mut rng = rng_from_seed(8);
        for _ in 0..10 {
            let cx = 0.1 + 0.8 * normal::<f64, _>(&mut rng).abs().min(1.0);
            let cy = 0.1 + 0.8 * normal::<f64, _>(&mut rng).abs().min(1.0);
            let grid = GridSpec::CoarseToFine { lo: 0.0, hi: 1.0, coarse_step: 0.25, refine_radius: 0.25, fine_step: 0.05 };
            let r = grid_search(&base, &tvs, &grid, bowl(cx, cy)).unwrap();
            let coarse_best = r.log[..r.num_coarse].iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
            assert!(r.score <= coarse_best);
            assert_eq!(r.num_coarse, 25);
            let mut seen: Vec<&Vec<f64>> = r.log.iter().map(|(w, _)| &w.0).collect();
            seen.sort_by(|a, b| lex_cmp(a, b));
            seen.dedup();
            assert_eq!(seen.len(), r.log.len());
            assert!(r.log.len() - r.num_coarse <= 121);
            // Exhaustive oracle over the whole fine lattice.
            let f = bowl(cx, cy);
            let mut oracle = (vec![], f64::INFINITY);
            for x in lattice(0.0, 1.0, 0.05) {
                for y in lattice(0.0, 1.0, 0.05) {
                    let mut p = ParamSet::new();
                    p.insert("w", Tensor::from_f64(&[2], &[x, y]).unwrap());
                    let s = f(&p).unwrap();
                    if s < oracle.1 {
                        oracle = (vec![x, y], s);
                    }
                }
            }
            assert_eq!(r.weights.0, oracle.0);
            assert!((r.score - oracle.1).abs() < 1e-12);
        }
    }
}
