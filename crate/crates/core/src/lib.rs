pub mod cli;
pub mod engine;
pub mod error;
pub mod init;
pub mod linalg;
pub mod lmm;
pub mod model;
pub mod natgrad;
pub mod quadrature;
pub mod selection;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
