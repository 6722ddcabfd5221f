//! Modular attention-state reuse for transformer inference.
//!
//! Prompts are built from schemas written in a small markup language. Each
//! schema module is encoded once at fixed position IDs; serving a prompt then
//! concatenates the cached attention states of the modules it imports and
//! only runs the model over arguments and new text.
//!
//! The crate also ships an exact masked-attention oracle, so the cached path
//! can be checked against the computation it approximates.

pub mod bench;
pub mod cache;
pub mod compiler;
pub mod engine;
pub mod layout;
pub mod model;
pub mod pml;
