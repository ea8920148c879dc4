//! Function embeddings for binary code similarity detection over
//! decompiled LLVM-IR.
//!
//! The pipeline runs in stages:
//!
//! 1. [`ir_corpus`] splits `.ll` text into functions, basic blocks and CFGs
//!    and strips annotations that carry no semantics.
//! 2. [`normalize`] tokenizes instructions and folds identifiers and
//!    constants into a small vocabulary.
//! 3. [`sampling`] builds next-instruction and masked-token examples from
//!    random walks over the instruction-level CFG.
//! 4. [`lm`] pretrains a small transformer encoder and embeds basic blocks.
//! 5. [`ggnn_moco`] turns block embeddings into function embeddings with a
//!    gated graph network trained by momentum contrast.
//! 6. [`retrieval`] scores pairs by cosine similarity and evaluates AUC,
//!    Recall@k and MRR.
//!
//! [`pipeline`] wires the stages to files on disk; [`synth`] generates a
//! small synthetic corpus for experiments without a compile farm.

pub mod config;
pub mod error;
pub mod ggnn_moco;
pub mod ir_corpus;
pub mod lm;
pub mod normalize;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
