//! MLP epsilon-predictor with sinusoidal timestep features and optional
//! channel-wise projections.
//!
//! Layout for `hidden_dims = [C0, .., C(L-1)]` and embedding width `E`:
//!
//! ```text
//! emb      = silu(sinusoid(t) @ time_embed.weight + time_embed.bias)       [n x E]
//! h        = x_t
//! for k < L:
//!   h      = silu([h, emb] @ blockK.weight + blockK.bias)                 [n x Ck]
//!   h      = h @ projK.W^T            (only at projection sites)
//! out      = [h, emb] @ blockL.weight + blockL.bias                       [n x data_dim]
//! ```
//!
//! Each row of `h` is one feature vector `F`, so `h @ W^T` applies `W F`.
//! Projection matrices start as the identity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::params::ParamSet;
use crate::rng::{normal, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub use_projection: bool,
    /// Hidden-layer indices followed by a projection.
    pub projection_sites: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dims: vec![128, 128, 128],
            time_embed_dim: 32,
            use_projection: false,
            projection_sites: vec![0, 1, 2],
        }
    }
}

pub fn block_weight(k: usize) -> String {
    format!("block{k}.weight")
}

pub fn block_bias(k: usize) -> String {
    format!("block{k}.bias")
}

pub fn projection_name(k: usize) -> String {
    format!("proj{k}.W")
}

pub const TIME_EMBED_WEIGHT: &str = "time_embed.weight";
pub const TIME_EMBED_BIAS: &str = "time_embed.bias";

impl DenoiserConfig {
    pub fn small(hidden: &[usize]) -> Self {
        Self {
            hidden_dims: hidden.to_vec(),
            projection_sites: (0..hidden.len()).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.time_embed_dim == 0 || self.hidden_dims.is_empty() {
            return Err(Error::Config("denoiser dims must be positive and at least one hidden layer given".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_embed_dim must be even, got {}", self.time_embed_dim)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Some(bad) = self.projection_sites.iter().find(|&&k| k >= self.hidden_dims.len()) {
            return Err(Error::Config(format!(
                "projection site {bad} out of range for {} hidden layers",
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Same architecture with projections switched on.
    pub fn with_projection(&self) -> Self {
        Self { use_projection: true, ..self.clone() }
    }

    /// Same architecture with projections switched off.
    pub fn without_projection(&self) -> Self {
        Self { use_projection: false, ..self.clone() }
    }

    /// True if the two configs differ at most in their projection settings.
    pub fn same_backbone(&self, other: &Self) -> bool {
        self.data_dim == other.data_dim
            && self.hidden_dims == other.hidden_dims
            && self.time_embed_dim == other.time_embed_dim
    }

    fn active_sites(&self) -> Vec<usize> {
        if !self.use_projection {
            return Vec::new();
        }
        let mut sites = self.projection_sites.clone();
        sites.sort_unstable();
        sites.dedup();
        sites
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let e = self.time_embed_dim;
        let mut out = BTreeMap::new();
        out.insert(TIME_EMBED_WEIGHT.to_string(), vec![e, e]);
        out.insert(TIME_EMBED_BIAS.to_string(), vec![e]);
        let mut fan_in = self.data_dim;
        for (k, &c) in self.hidden_dims.iter().enumerate() {
            out.insert(block_weight(k), vec![fan_in + e, c]);
            out.insert(block_bias(k), vec![c]);
            fan_in = c;
        }
        let last = self.hidden_dims.len();
        out.insert(block_weight(last), vec![fan_in + e, self.data_dim]);
        out.insert(block_bias(last), vec![self.data_dim]);
        for k in self.active_sites() {
            let c = self.hidden_dims[k];
            out.insert(projection_name(k), vec![c, c]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Number of scalars held by projection matrices when projections are on.
    pub fn projection_param_count(&self) -> usize {
        let with = self.with_projection();
        with.active_sites().iter().map(|&k| with.hidden_dims[k].pow(2)).sum()
    }

    /// Projection parameters as a fraction of the projection-free model.
    pub fn projection_fraction(&self) -> f64 {
        self.projection_param_count() as f64 / self.without_projection().param_count() as f64
    }

    /// Fails unless `params` has exactly this config's names and shapes.
    pub fn check_params<S: Real>(&self, params: &ParamSet<S>) -> Result<()> {
        let shapes = self.param_shapes();
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::Alignment(format!("unexpected parameter `{extra}` for this architecture")));
        }
        for (name, shape) in &shapes {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Alignment(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features of the timesteps, one row per entry of `ts`.
pub fn timestep_features<S: Real>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(S::of));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("feature matrix is well formed")
}

pub fn init_params<S: Real>(config: &DenoiserConfig, seed: u64) -> Result<ParamSet<S>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    // Iterate in BTreeMap (name) order so the draw sequence is fixed.
    for (name, shape) in config.param_shapes() {
        let t = if name.starts_with("proj") {
            Tensor::eye(shape[0])
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let std = (1.0 / shape[0] as f64).sqrt();
            let data = (0..shape.iter().product::<usize>()).map(|_| normal::<S, _>(&mut rng) * S::of(std)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Inserts identity projections into a projection-free parameter set.
///
/// The result drives `config.with_projection()` and produces the same outputs
/// as the input under `config.without_projection()`.
pub fn augment_with_projections<S: Real>(params: &ParamSet<S>, config: &DenoiserConfig) -> Result<ParamSet<S>> {
    if let Some(existing) = params.names().find(|n| n.starts_with("proj")) {
        return Err(Error::Contract(format!("parameter set already has projection `{existing}`")));
    }
    config.without_projection().check_params(params)?;
    let with = config.with_projection();
    let mut out = params.clone();
    for k in with.active_sites() {
        out.insert(projection_name(k), Tensor::eye(with.hidden_dims[k]));
    }
    Ok(out)
}

/// Builds the forward pass on `graph` and returns the output node.
pub fn forward_graph<S: Real>(
    graph: &mut Graph<S>,
    params: &Bindings,
    config: &DenoiserConfig,
    x_t: NodeId,
    ts: &[usize],
) -> Result<NodeId> {
    let (rows, cols) = graph.value(x_t).dims2()?;
    if cols != config.data_dim {
        return dim_err(format!("input has {cols} columns, denoiser expects {}", config.data_dim));
    }
    if ts.len() != rows {
        return dim_err(format!("{} timesteps for {rows} rows", ts.len()));
    }
    let p = |name: &str| params.get(name).copied().ok_or_else(|| Error::Alignment(format!("missing parameter `{name}`")));

    let feats = graph.constant(timestep_features(ts, config.time_embed_dim));
    let emb = graph.matmul(feats, p(TIME_EMBED_WEIGHT)?)?;
    let emb = graph.add_row(emb, p(TIME_EMBED_BIAS)?)?;
    let emb = graph.silu(emb);

    let sites = config.active_sites();
    let mut h = x_t;
    for k in 0..config.hidden_dims.len() {
        let input = graph.concat_cols(h, emb)?;
        let z = graph.matmul(input, p(&block_weight(k))?)?;
        let z = graph.add_row(z, p(&block_bias(k))?)?;
        h = graph.silu(z);
        if sites.contains(&k) {
            let wt = graph.transpose(p(&projection_name(k))?)?;
            h = graph.matmul(h, wt)?;
        }
    }
    let last = config.hidden_dims.len();
    let input = graph.concat_cols(h, emb)?;
    let out = graph.matmul(input, p(&block_weight(last))?)?;
    graph.add_row(out, p(&block_bias(last))?)
}

/// Epsilon prediction with a timestep per row, outside of any training graph.
pub fn predict<S: Real>(params: &ParamSet<S>, config: &DenoiserConfig, x_t: &Tensor<S>, ts: &[usize]) -> Result<Tensor<S>> {
    config.check_params(params)?;
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let x = g.constant(x_t.clone());
    let out = forward_graph(&mut g, &bound, config, x, ts)?;
    Ok(g.value(out).clone())
}

/// Epsilon prediction for a batch sharing one timestep.
pub fn denoiser_forward<S: Real>(params: &ParamSet<S>, x_t: &Tensor<S>, t: usize, config: &DenoiserConfig) -> Result<Tensor<S>> {
    predict(params, config, x_t, &vec![t; x_t.rows()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig { data_dim: 2, hidden_dims: vec![8, 6], time_embed_dim: 4, use_projection: false, projection_sites: vec![0, 1] }
    }

    #[test]
    fn init_is_deterministic_and_projections_are_identity() {
        let c = cfg().with_projection();
        let a = init_params::<f64>(&c, 7).unwrap();
        let b = init_params::<f64>(&c, 7).unwrap();
        assert_eq!(a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for k in 0..2 {
            let w = a.get(&projection_name(k)).unwrap();
            let n = w.rows();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(w.row(i)[j], if i == j { 1.0 } else { 0.0 });
                }
            }
        }
        assert!(a.get("block0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_names_match_enumeration() {
        let c = cfg().with_projection();
        let mut expected = vec![
            "time_embed.weight", "time_embed.bias",
            "block0.weight", "block0.bias",
            "block1.weight", "block1.bias",
            "block2.weight", "block2.bias",
            "proj0.W", "proj1.W",
        ];
        expected.sort_unstable();
        let p = init_params::<f64>(&c, 1).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), expected);
        // block0: (2+4)*8 + 8, block1: (8+4)*6 + 6, block2: (6+4)*2 + 2, time: 16 + 4, proj: 64 + 36
        assert_eq!(p.total_dim(), 56 + 78 + 22 + 20 + 100);
    }

    #[test]
    fn projection_count_by_enumeration() {
        let c = DenoiserConfig { hidden_dims: vec![64, 64], projection_sites: vec![0, 1], ..DenoiserConfig::default() };
        let mut count = 0;
        for site in &c.projection_sites {
            for _row in 0..c.hidden_dims[*site] {
                for _col in 0..c.hidden_dims[*site] {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 8192);
        assert_eq!(c.projection_param_count(), count);
        assert_eq!(c.with_projection().param_count() - c.param_count(), count);
    }

    #[test]
    fn projection_fraction_is_reported() {
        let c = DenoiserConfig::default();
        let frac = c.projection_fraction();
        let base = c.param_count() as f64;
        assert_eq!(frac, 3.0 * 128.0 * 128.0 / base);
        assert!(frac > 0.0 && frac.is_finite());
    }

    #[test]
    fn identity_projections_are_transparent() {
        let c = cfg();
        let plain = init_params::<f64>(&c, 3).unwrap();
        let aug = augment_with_projections(&plain, &c).unwrap();
        assert_eq!(aug.total_dim() - plain.total_dim(), 8 * 8 + 6 * 6);
        let mut rng = rng_from_seed(99);
        for i in 0..50 {
            let x = normal_tensor::<f64, _>(&[3, 2], &mut rng);
            let t = i % 20;
            let a = denoiser_forward(&plain, &x, t, &c).unwrap();
            let b = denoiser_forward(&aug, &x, t, &c.with_projection()).unwrap();
            assert_eq!(a, b);
        }
        assert!(matches!(augment_with_projections(&aug, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_models_with_and_without_projection_agree() {
        let c = cfg();
        let with = init_params::<f64>(&c.with_projection(), 5).unwrap();
        let mut without = with.clone();
        without.remove("proj0.W");
        without.remove("proj1.W");
        let x = Tensor::from_f64(&[2, 2], &[0.1, 0.2, -3.0, 4.0]).unwrap();
        assert_eq!(
            denoiser_forward(&with, &x, 3, &c.with_projection()).unwrap(),
            denoiser_forward(&without, &x, 3, &c).unwrap()
        );
    }

    #[test]
    fn forward_is_deterministic_and_finite_for_large_inputs() {
        let c = cfg();
        let p = init_params::<f64>(&c, 4).unwrap();
        let x = Tensor::from_f64(&[2, 2], &[1e3, -1e3, 999.0, 0.0]).unwrap();
        let a = denoiser_forward(&p, &x, 9, &c).unwrap();
        assert_eq!(a, denoiser_forward(&p, &x, 9, &c).unwrap());
        assert!(a.is_finite());
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn dimension_and_alignment_errors() {
        let c = cfg();
        let p = init_params::<f64>(&c, 4).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(denoiser_forward(&p, &x, 0, &c), Err(Error::Dimension(_))));
        assert!(matches!(denoiser_forward(&p, &Tensor::zeros(&[2, 2]), 0, &c.with_projection()), Err(Error::Alignment(_))));
        let bad = DenoiserConfig { projection_sites: vec![5], ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let c = cfg();
        let p = init_params::<f32>(&c, 4).unwrap();
        let x = Tensor::<f32>::from_f64(&[1, 2], &[0.5, -0.5]).unwrap();
        let y64 = denoiser_forward(&init_params::<f64>(&c, 4).unwrap(), &x.cast(), 2, &c).unwrap();
        let y32 = denoiser_forward(&p, &x, 2, &c).unwrap();
        for (a, b) in y32.data().iter().zip(y64.data()) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }
}
