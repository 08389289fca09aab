//! Minimal dense tensor math with reverse-mode differentiation.
//!
//! Everything is double precision and row-major. A [`Graph`] records every
//! operation in evaluation order; [`Graph::backward`] walks that record in
//! reverse exactly once and returns the gradients of a scalar loss with
//! respect to each named parameter that took part in the computation.
//!
//! Parameters live in a [`ParameterStore`] keyed by dotted names
//! (`decoder.transformer.block0.attn.wq.w`). Layers in [`layers`] read their
//! weights from the store by prefix, so a model is just a function of
//! `(graph, store, inputs)`.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{fnv1a, seeded_rng, Init, ParamSpec, ParameterStore};
pub use tensor::Tensor;
