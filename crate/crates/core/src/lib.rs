//! Long-tailed contrastive representation learning lab.
//!
//! Decoupled supervised contrastive loss and patch-based self distillation
//! on procedurally generated long-tailed image data, together with the
//! gradient and convergence probes that check their behaviour.

pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod queue;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
