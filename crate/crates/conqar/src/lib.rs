//! ConQAR: a convolutional quantum-like language model with mutual attention
//! for review-based rating prediction.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — a small dense-tensor engine with reverse-mode autodiff
//!   (gradient tape) and a finite-difference gradient checker. Everything
//!   else is built on top of it; no external linear-algebra backend is used
//!   in the forward/backward path.
//! * [`corpus`] — review-dataset parsing (Amazon/Yelp JSON lines, TSV),
//!   tokenization, vocabulary construction, and per-user/per-item document
//!   assembly with leakage-safe test-time exclusion.
//! * [`encoder`] — word embeddings and the convolutional text encoder that
//!   turns a document into an n x L feature map.
//! * [`density`] — projection of feature-map columns onto unit states and
//!   their mixture into a density matrix (symmetric, PSD, unit trace), plus
//!   the trace regularizer.
//! * [`attention`] — the mutual-attention layer that correlates a user
//!   density matrix with an item density matrix and fuses both into a single
//!   interaction vector.
//! * [`head`] — the fully connected prediction head and the training losses.
//! * [`trainer`] — config, optimizer, training loop, MAE evaluation, grid
//!   search and the ablation runner.
//! * [`checkpoint`] — lossless model serialization.
//! * [`viz`] — heatmap and review-highlight exports.

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod density;
pub mod encoder;
pub mod error;
pub mod head;
pub mod numerics;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
