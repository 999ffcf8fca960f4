//! A miniature YOLO-style single-stage detector with CBAM attention,
//! built on a small reverse-mode autograd engine.

pub mod bbox;
pub mod cbam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod detector;
pub mod dual;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod par;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use cbam::{CbamBlock, CbamConfig, GateMode};
pub use detector::{build_model, Model, ModelConfig, RawPredictions};
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
