//! Joint discrete/continuous sequence modeling with flow-matching frame
//! generation, trained end to end on a synthetic paired corpus.
//!
//! The crate is organized around a small reverse-mode array engine
//! ([`autodiff`]), closed-form optimal-transport path math and its Euler
//! sampler ([`flow`]), the joint text/state/frame architecture ([`model`]),
//! parallel task layouts ([`parseq`]), a deterministic synthetic corpus
//! ([`synth`]), the two-stage trainer ([`train`]), and the autoregressive
//! generation loop ([`infer`]).

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
