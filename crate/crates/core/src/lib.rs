//! Capacity-constrained optimal-transport routing of spatial region tokens
//! to mixture-of-experts poolers, for bags of patch embeddings.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` precision used for training and evaluation.

pub mod autodiff;
pub mod bagio;
pub mod error;
pub mod nnmodel;
pub mod otroute;
pub mod rng;
pub mod scalar;
pub mod tokenizer;
pub mod traingrad;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PatchBag = bagio::PatchBag<f64>;
pub type RegionSet = tokenizer::RegionSet<f64>;
pub type RegionGraph = tokenizer::RegionGraph<f64>;
pub type Marginals = otroute::Marginals<f64>;
pub type TransportPlan = otroute::TransportPlan<f64>;
pub type DispatchMatrix = otroute::DispatchMatrix<f64>;
pub type ModelParams = nnmodel::ModelParams<f64>;
pub type ForwardDiagnostics = nnmodel::ForwardDiagnostics<f64>;
pub type GradientSet = traingrad::GradientSet<f64>;
