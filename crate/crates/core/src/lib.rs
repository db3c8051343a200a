//! Multi-aircraft 4D trajectory prediction with a dual-attention
//! spatiotemporal graph network.
//!
//! The pipeline runs from ADS-B reports to probabilistic forecasts:
//!
//! - [`ingest`] parses track files, resamples them to a 10 s grid and cuts
//!   fixed-roster scenes.
//! - [`stgraph`] turns a scene into node features and a normalized
//!   inverse-distance adjacency stack.
//! - [`adjattn`] rebuilds the adjacency with self-attention over its rows.
//! - [`gnn`] runs the graph-convolution and graph-attention branches and fuses them.
//! - [`head`] extrapolates in time and emits trivariate Gaussians.
//! - [`traineval`] trains with Adam and reports ADE/FDE.
//!
//! Everything differentiable runs on the tape in [`numerics`].

pub mod adjattn;
pub mod error;
pub mod gnn;
pub mod head;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod stgraph;
pub mod store;
pub mod synth;
pub mod traineval;

pub use error::{Error, Result};
pub use ingest::Scene;
pub use model::{ModelConfig, TrajectoryModel};
pub use numerics::{ParamStore, Tape, Tensor, Var};
