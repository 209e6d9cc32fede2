//! Spectral regularization of convolution kernels.
//!
//! A zero-padded, unit-stride "same" convolution with kernel
//! `K ∈ ℝ^{k×k×g×h}` acts on a vectorized input as a structured matrix `M`
//! of size `hN² × gN²` whose channel blocks are doubly block banded Toeplitz.
//! This crate builds `M` (sparse, explicitly) and applies it matrix-free,
//! computes its extreme singular triples, evaluates the penalties
//!
//! * `½‖M‖²_F`
//! * `−σ_min(M)`
//! * `½‖M‖²_F − min(g,h)·N²·σ_min(M)`
//!
//! together with their exact gradients with respect to every kernel entry,
//! and runs fixed-step gradient descent on them while tracing `σ_max` and
//! `σ_min`.
//!
//! Public indices are 1-based throughout: a kernel entry is addressed as
//! `(p, q, z, y)` with `1 ≤ p, q ≤ k`, `1 ≤ z ≤ g` (input channel) and
//! `1 ≤ y ≤ h` (output channel).
//!
//! With the default `parallel` feature the inner loops (per-channel
//! convolution, gradient assembly, finite-difference sweeps, validation
//! grids) run on rayon; without it the same code runs sequentially.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
mod error;
pub mod optimizer;
pub mod par;
pub mod regularizers;
pub mod spectral;
pub mod structured;
pub mod tensor;
pub mod validation;

pub use error::{Error, Result};
pub use optimizer::{init_kernel, run, GdConfig, InitScheme, RunOutcome, RunStatus, StopRule, Trace, TraceRecord};
pub use regularizers::{GradientTensor, PenaltyKind};
pub use spectral::{SimplicityStatus, SpectralPair, SpectralSolver, SvdBackend};
pub use structured::{OmegaIndexSet, StructuredMatrix};
pub use tensor::{InputTensor, KernelTensor, OutputTensor, ProblemDims};
