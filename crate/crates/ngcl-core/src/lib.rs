//! Desk-scale laboratory for gated non-negative contrastive learning.
//!
//! The crate is organized around a small fixed-op reverse-mode tape
//! ([`graph`]), a synthetic compositional data generator plus CIFAR-10
//! ingestion ([`datagen`]), the encoder/gating model ([`model`]), the
//! contrastive + sparsity objective ([`objective`]), a deterministic
//! trainer ([`trainer`]), interpretability metrics ([`metrics`]), and a
//! numerical verification harness for the method's propositions
//! ([`verify`]).

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{DiffGraph, Gradients, NodeId, OpKind};
pub use tensor::Tensor;
