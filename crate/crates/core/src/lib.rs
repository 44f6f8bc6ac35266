//! Desk-scale facial-landmark training laboratory.
//!
//! The crate trains a small anti-aliased hourglass network for heatmap-based
//! landmark regression on a procedurally generated face corpus. Training uses
//! the FiFA curriculum (epoch-scheduled black patches centered on landmarks),
//! a Siamese two-view scheme with a DCCA consistency loss, AdamW, and the
//! usual landmark metrics (NME variants, failure rate, AUC). Everything runs
//! in f64 on a reverse-mode tape with a finite-difference gradient checker,
//! and every run is bit-reproducible from its seed.

pub mod augment;
pub mod checkpoint;
pub mod codec;
pub mod dcca;
pub mod error;
pub mod gradsuite;
pub mod landmarks;
pub(crate) mod linalg;
pub mod metrics;
pub mod netops;
pub mod network;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};
