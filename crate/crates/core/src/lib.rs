//! Desk-scale laboratory for language drift in a pivot-translation game.
//!
//! Two recurrent agents translate source → pivot → target over procedurally
//! generated toy languages. Interactive finetuning through a Gumbel
//! straight-through channel improves the task score but lets the pivot
//! language drift; the training module implements the countermeasure
//! regimes (supervised replay, iterated teacher/student refinement and
//! their combinations) plus the gradient-conflict probe, and the metrics
//! module measures task score, pivot grounding and language-model fit.

pub mod agents;
pub mod checkpoint;
pub mod error;
pub mod game;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{grad_cosine, Mat, Tape, Tensor};
