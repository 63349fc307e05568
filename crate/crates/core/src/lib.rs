pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod dga;
pub mod eval;
pub mod deformation;
pub mod error;
pub mod imageio;
pub mod nn;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod usm;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{no_grad, Gradients, Tensor};
