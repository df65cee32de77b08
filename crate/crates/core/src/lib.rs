pub mod boxhead;
pub mod contrastive;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod scene;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
