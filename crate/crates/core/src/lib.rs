pub mod attention;
pub mod audit;
pub mod autodiff;
pub mod blocks;
pub mod cka;
pub mod error;
pub mod harness;
pub mod layers;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
