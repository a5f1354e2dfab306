//! Hybrid quantum-classical pipeline for THz multi-layer content recognition.
//!
//! A raster-scanned 3-layer sample yields one reflected THz time-domain
//! waveform per scan position; each of the six surfaces (front and back of
//! every layer) carries binary pencil content. The crate provides:
//!
//! - [`statevector`]: a dense n-qubit simulator with the gate set the
//!   feature-extraction circuit needs (amplitude embedding, RY, CZ,
//!   computational-basis probabilities),
//! - [`vqc`]: the staggered two-design ansatz, waveform-to-feature forward
//!   pass, and exact gradients via parameter shift and adjoint sweeps,
//! - [`nn`]: a small feed-forward classifier head (linear / batch-norm /
//!   Mish, sigmoid outputs, binary cross-entropy, step-decayed SGD),
//! - [`thz`]: a physics-inspired synthetic waveform generator with depth
//!   jitter, echo overlap and the shadow effect,
//! - [`pipeline`]: training and evaluation for the four compared methods
//!   (gated reflection intensity, logistic regression, DNN, QML+DNN),
//! - [`io`]: bit-exact persistence for datasets, checkpoints, metrics and
//!   PGM heatmaps.

pub mod io;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod statevector;
pub mod thz;
pub mod vqc;
