pub mod bench;
pub mod cate;
pub mod conformal;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod matrix;
pub mod models;
pub mod optimizer;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use pipeline::PipelineSpec;
