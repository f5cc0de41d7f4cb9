//! Deterministic operator library for occlusion-aware person-image
//! generation at desk scale.
//!
//! The crate implements the full forward pass of a re-posing pipeline as
//! plain, seedable numerical kernels:
//!
//! * [`tensor`]: dense `f32` tensors, label maps, channel normalization,
//!   and the GLT1/PPM/PGM file formats.
//! * [`region`]: per-region style pooling, broadcasting, occlusion masks,
//!   and feature modulation.
//! * [`graph`]: body-structure graphs over regions, the centrifugal
//!   three-way neighborhood partition, and style propagation so occluded
//!   regions inherit statistics from visible neighbors.
//! * [`local`]: patch self-correlation volumes and spatially varying
//!   convolution (per-position filter taps and biases).
//! * [`transport`]: cosine cost matrices, balanced and unbalanced entropic
//!   transport solvers, and plan-guided parameter warping.
//! * [`stack`]: small seeded convolution stacks used as fixed encoders and
//!   decoders.
//! * [`objectives`]: focal, L1, perceptual, and adversarial losses with
//!   analytic gradients and a finite-difference checker.
//! * [`pipeline`]: the wiring of all of the above into pose transfer and
//!   texture inpainting, plus a synthetic scene generator and a self-test
//!   suite.
//!
//! Everything is single-threaded and reproducible: computations accumulate
//! in `f64` and store `f32` in fixed order, randomness comes only from
//! seeded generators, and identical inputs give bit-identical outputs.

pub mod error;
pub mod graph;
pub mod local;
pub mod objectives;
pub mod pipeline;
pub mod region;
pub mod stack;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use pipeline::{synth_scene, Pipeline, PipelineConfig, Scene};
pub use tensor::{SegmentationMap, Tensor, VisibilityMap};
