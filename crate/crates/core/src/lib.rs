//! Instruction-tuning toolkit for small causal language models.
//!
//! The crate covers the whole loop: instruction records and their prompt
//! formats ([`data`]), a small decoder-only transformer ([`model`]) built on a
//! reverse-mode tensor engine ([`tensor`]), low-rank adapters ([`lora`]), the
//! adapter tuning loop ([`training`]) and likelihood-based evaluation
//! ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Gradients, Graph, Tensor, Var};
