//! Decoupled per-timestep-range diffusion finetuning and task-vector merging,
//! on small synthetic datasets.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root fix the working precision to `f64`, which is what the CLI and the
//! checkpoint format use.

pub mod analysis;
pub mod data;
pub mod deme;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod merging;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamSet = params::ParamSet<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type Graph = graph::Graph<f64>;
pub type NoiseSchedule = diffusion::NoiseSchedule<f64>;
pub type NoiseSchedule32 = diffusion::NoiseSchedule<f32>;
pub type Optimizer = optim::Optimizer<f64>;
pub type TaskVector = merging::TaskVector<f64>;
pub type PlaneBasis = analysis::PlaneBasis<f64>;
