pub mod acpo;
pub mod adapters;
pub mod data;
pub mod diffusion;
pub mod iqa;
pub mod metrics;
pub mod numcore;
pub mod rng;

pub use numcore::{NumError, Scalar};

pub type Tensor = numcore::Tensor<f64>;
pub type Tape = numcore::Tape<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
