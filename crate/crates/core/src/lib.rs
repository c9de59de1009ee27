//! A desk-scale laboratory for step-aware differentiable-reward fine-tuning of
//! diffusion models over synthetic 2-D motion data.
//!
//! The crate is organized around a reverse-mode autodiff tape ([`autodiff`])
//! on which everything else is measured: a toy DDPM-style sampler
//! ([`diffusion`]), small feed-forward denoiser and dual-encoder reward
//! models ([`models`]), a family of reward fine-tuning strategies with
//! explicit graph-retention contracts ([`finetune`]), self-refining
//! preference learning for the reward model ([`spl`]), numerical
//! verification tooling ([`instrument`]), and the synthetic dataset plus
//! pretraining loops ([`toymotion`]).

pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod finetune;
pub mod instrument;
pub mod models;
pub mod seeds;
pub mod spl;
pub mod toymotion;

mod error;

pub use autodiff::{GraphStats, Tape, TapeError, ValueId};
pub use error::{Error, Result};
