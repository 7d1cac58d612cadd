pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod grouping;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod params;
pub mod prompt;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
