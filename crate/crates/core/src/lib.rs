pub mod cluster;
pub mod confidence;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gnn;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postproc;
pub mod synth;
pub mod track;

pub use error::{Error, Result};
