//! Hierarchical task-oriented communication at desk scale.
//!
//! A subtask-conditioned joint source-channel coding pipeline: a conditional
//! module maps a subtask id to a latent Gaussian, a JSCC encoder compresses an
//! observation image conditioned on the received subtask representation, the
//! latent crosses a Rayleigh/AWGN channel, and a conditioned JSCC decoder
//! reconstructs a task-specific image for a frozen actor network. Training
//! minimizes a conditional variational information bottleneck objective whose
//! variational bounds are verified by brute force on enumerable toy systems.

pub mod bounds;
pub mod channel;
pub mod config;
pub mod cvib;
pub mod gaussian;
pub mod harness;
pub mod models;
pub mod stream;
pub mod tensor;
pub mod world;

pub use tensor::tape::{Tape, Var};
pub use tensor::Tensor;
