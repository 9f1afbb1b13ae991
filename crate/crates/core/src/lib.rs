//! U-HNO: a hybrid spectral/Gaussian neural operator with sparse per-pixel
//! routing, plus the PDE generators, losses, metrics and training loop
//! around it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod error;
pub mod gaussian;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pde;
pub mod scalar;
pub mod spar;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::LossWeights;
pub use model::{AblationMode, ModelConfig, UhnoModel};
pub use scalar::Scalar;
pub use spar::SparConfig;
pub use tensor::{ComplexTensor, Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Model64 = UhnoModel<f64>;
pub type Model32 = UhnoModel<f32>;
