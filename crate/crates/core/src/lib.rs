//! Desk-scale multimodal survival prediction.
//!
//! The crate trains a tiny vision-language model to answer questions about
//! 3D scans and to predict survival from the same backbone: censored
//! statistics ([`survstats`]), a reverse-mode tape ([`autodiff`]),
//! differentiable survival losses ([`losses`]), the model itself
//! ([`model`]), report/volume preparation ([`dataprep`]), two-stage
//! training ([`train`]), and held-out evaluation ([`eval`]).
//!
//! Everything is deterministic given a seed: randomness flows through the
//! counter-based generator in [`rng`], and the parallel feature keeps
//! reductions in a fixed order so enabling threads never changes results.

pub mod autodiff;
pub mod dataprep;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod rng;
pub mod survstats;
pub mod train;
