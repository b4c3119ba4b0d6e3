//! Contrastive bidirectional transformer pretraining at desk scale.

pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod probes;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{CbtError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{FiniteReport, Tensor};
