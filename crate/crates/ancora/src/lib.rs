//! Image-text alignment with learnable special tokens and a category
//! knowledge bank.
//!
//! The model appends a small block of trainable special tokens to each
//! branch's input. Their hidden states at a fixed layer summarize the
//! sample (global features); the remaining positions carry token-level
//! detail (local features). Per-modality MLP heads project both into a
//! shared space. Training mixes two objectives: symmetric contrastive
//! alignment across the crossed global/local pairings, and grounding
//! of the global features against projected category descriptions.
//!
//! Everything runs on a hand-rolled reverse-mode tape over dense f64
//! matrices, sized for deterministic desk-scale experiments rather
//! than throughput: the same forward code serves training, scoring,
//! and the finite-difference checks that pin every adjoint.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod knowledge;
pub mod kv;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod tensorio;
pub mod tokenizer;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
