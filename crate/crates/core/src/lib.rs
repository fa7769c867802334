pub mod attention;
pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod lm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit instances of the generic numeric core.
pub type Tensor = nn::Tensor<f64>;
pub type Tape = nn::Tape<f64>;
pub type Graph<'p> = nn::Graph<'p, f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type GradBuffer = nn::GradBuffer<f64>;
pub type PrefixState = ctc::PrefixState<f64>;
