pub mod classes;
pub mod curate;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fixture;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod review;
pub mod store;
mod text;


pub use classes::{IconClass, N_CLASSES};
pub use error::{Error, Result};
