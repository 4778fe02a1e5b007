pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gnncore;
pub mod gradcheck;
pub mod graphbuild;
pub mod numkit;
pub mod persist;
pub mod pipeline;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, FormatError, Result};
