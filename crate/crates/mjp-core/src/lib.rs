//! Desk-scale vision-transformer laboratory built around masked-jigsaw-puzzle
//! (MJP) position embeddings.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: a minimal f64 tensor library with a dynamic reverse-mode
//!   tape and an AdamW optimizer;
//! - [`jigsaw`]: patchify/unpatchify, block-wise mask sampling and the
//!   jigsaw shuffle of masked patch positions;
//! - [`embed`]: patch projection, the position-embedding table with the
//!   shared unknown embedding, and the dense absolute localization (DAL)
//!   regressors;
//! - [`model`]: a toy ViT classifier with standard / mjp-aware / oblivious
//!   forward modes and a single training step;
//! - [`metrics`]: consistency and embedding-distance metrics plus image
//!   similarity metrics (MSE / PSNR / SSIM / 2-D spectral cosine);
//! - [`analysis`]: spectral summaries of PE tables and a linear
//!   position-regression probe;
//! - [`attack`]: closed-form gradient-inversion of the input image from
//!   leaked per-parameter gradients, with the three evaluation scenarios.

pub mod analysis;
pub mod attack;
pub mod embed;
pub mod error;
pub mod jigsaw;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Tape, Tensor, Var};
