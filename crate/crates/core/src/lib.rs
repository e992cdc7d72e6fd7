pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod maskhead;
pub mod model;
pub mod pipeline;
pub mod sapa;
pub mod select;
pub mod synthdata;
pub mod tensor;
pub mod ttscale;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
