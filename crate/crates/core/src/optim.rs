//! First-order optimizers over [`ParamSet`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning-rate multiplier over a run of known length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down towards 0 at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::adam(), learning_rate: 1e-3, schedule: LrSchedule::Constant }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer with its running state (Adam moments, step count).
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    config: OptimizerConfig,
    first_moment: ParamSet<S>,
    second_moment: ParamSet<S>,
    step_count: u64,
    lr_scale: f64,
}

impl<S: Real> Optimizer<S> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let zeros = params.map(|t| Tensor::zeros(t.shape()));
        Ok(Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0, lr_scale: 1.0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Multiplies the configured learning rate for subsequent steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Applies one update and returns the new parameters.
    pub fn step(&mut self, params: &ParamSet<S>, grads: &ParamSet<S>) -> Result<ParamSet<S>> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Alignment(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Alignment(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step_count += 1;
        let lr = S::of(self.config.learning_rate * self.lr_scale);
        let mut out = ParamSet::new();
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (name, p) in params.iter() {
                    out.insert(name.clone(), p.axpy(-lr, grads.require(name)?)?);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let mut m_next = ParamSet::new();
                let mut v_next = ParamSet::new();
                for (name, p) in params.iter() {
                    let g = grads.require(name)?.data();
                    let m = self.first_moment.require(name)?.data();
                    let v = self.second_moment.require(name)?.data();
                    let mut md = Vec::with_capacity(g.len());
                    let mut vd = Vec::with_capacity(g.len());
                    let mut pd = Vec::with_capacity(g.len());
                    for i in 0..g.len() {
                        let mi = b1 * m[i] + (S::one() - b1) * g[i];
                        let vi = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                        let m_hat = mi / c1;
                        let v_hat = vi / c2;
                        pd.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
                        md.push(mi);
                        vd.push(vi);
                    }
                    let shape = p.shape().to_vec();
                    m_next.insert(name.clone(), Tensor::new(shape.clone(), md)?);
                    v_next.insert(name.clone(), Tensor::new(shape.clone(), vd)?);
                    out.insert(name.clone(), Tensor::new(shape, pd)?);
                }
                self.first_moment = m_next;
                self.second_moment = v_next;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_one_step() {
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &single(1.0)).unwrap();
        let next = opt.step(&single(1.0), &single(2.0)).unwrap();
        assert!((next.get("w").unwrap().item().unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut opt = Optimizer::new(OptimizerConfig { kind, learning_rate: 0.5, ..Default::default() }, &single(3.0)).unwrap();
            let next = opt.step(&single(3.0), &single(0.0)).unwrap();
            assert_eq!(next, single(3.0));
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // Closed form for step 1: m_hat = g, v_hat = g^2, so
        // p' = p - lr * g / (|g| + eps). With g = 1, lr = 0.01, eps = 1e-8:
        // p' = 0.5 - 0.01 / (1 + 1e-8).
        let expected = 0.5 - 0.01 / (1.0 + 1e-8);
        let cfg = OptimizerConfig { kind: OptimizerKind::adam(), learning_rate: 0.01, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &single(0.5)).unwrap();
        let next = opt.step(&single(0.5), &single(1.0)).unwrap();
        assert!((next.get("w").unwrap().item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_alignment_error() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &single(1.0)).unwrap();
        let err = opt.step(&single(1.0), &ParamSet::new()).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.0, ..Default::default() };
        assert!(Optimizer::new(cfg, &single(1.0)).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.factor(0, 10), 1.0);
        assert!((c.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(c.factor(9, 10) < 0.03);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);
    }
}
