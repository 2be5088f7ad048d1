pub mod corpus;
pub mod error;
pub mod eval;
pub mod init;
pub mod model;
pub mod probe;
pub mod train;

pub use error::{Error, Result};
