//! Multi-fidelity tensor emulation.
//!
//! Simulator ensembles shaped `space × month × year × design` are compressed
//! with a truncated Tucker decomposition; the design-mode factor columns
//! ("effective weights") receive independent Gaussian-process priors and the
//! spatiotemporal bases are treated as fixed. A low-fidelity emulator is
//! carried onto a finer mesh by nearest-neighbour basis interpolation and
//! corrected with an additive discrepancy that has its own Tucker basis.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the CLI and file formats use.

pub mod baseline;
pub mod blockcov;
pub mod eval;
pub mod gp;
pub mod linalg;
pub mod mcmc;
pub mod mf;
pub mod persist;
pub mod predict;
pub mod scalar;
pub mod sf;
pub mod synth;
pub mod tensor;
pub mod transform;
pub mod tucker;

mod error;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = tensor::DenseTensor<f64>;
pub type Tucker = tucker::TuckerModel<f64>;
pub type Design = gp::DesignMatrix<f64>;
pub type Hyperparams = gp::GpHyperparams<f64>;
pub type Transform = transform::TransformSpec<f64>;
pub type SfModel = sf::SfEmulator<f64>;
pub type MfModel = mf::MfEmulator<f64>;
pub type NaiveModel = baseline::NaiveGpModel<f64>;
pub type Prediction = predict::PredictionResult<f64>;
pub type Mesh = mf::MeshCoords<f64>;
