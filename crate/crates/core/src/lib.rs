//! Entropy-regularized semi-dual unbalanced optimal transport (E-SUOT) for
//! gradual domain adaptation.
//!
//! A sequence of learned transport maps pushes labeled source samples toward
//! an unlabeled target sample cloud without estimating the target density;
//! a classifier is then fine-tuned stage by stage along the generated
//! intermediate domains.
//!
//! Module map:
//! - [`nn`]: dense networks, reverse-mode gradients, Adam, spectral norms
//! - [`divergence`]: conjugates `f⋆` and the target-side penalty
//! - [`ot`]: cost matrices, Sinkhorn, barycentric projection
//! - [`suot`]: potential/map objectives and the three stage trainers
//! - [`gda`]: classifier training, the adaptation pipeline, self-training
//! - [`diagnostics`]: trajectory and bound estimates, score-matching baseline
//! - [`data`]: synthetic benchmarks, label-shift resampling, CSV I/O
//! - [`cli`]: the `esuot` command-line front end

pub mod cli;
pub mod data;
mod dataset;
pub mod diagnostics;
pub mod divergence;
pub mod error;
pub mod gda;
pub mod nn;
pub mod ot;
pub mod suot;

pub use dataset::Dataset;
pub use error::{Error, Result};
