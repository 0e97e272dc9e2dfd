//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Graphs are rebuilt per iteration: operations append nodes to a [`Graph`],
//! [`Graph::backward`] walks them once in reverse creation order (creation
//! order is topological by construction). Parameters live in a [`ParamStore`]
//! outside any graph and are bound into a graph per forward pass, so several
//! loss graphs per iteration can share one parameter set.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
