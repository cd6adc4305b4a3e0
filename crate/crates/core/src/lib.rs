//! Two-stage long-context pipeline on a minimal selective state-space
//! language model: a first pass scores and compresses the prompt into a
//! handful of selected hidden states, a second pass feeds the spliced
//! sequence back through the model with importance scores wired into
//! the step-size path. Everything trains end-to-end on a reverse-mode
//! tape, at desk scale, in f64.

pub mod adaptation;
pub mod bench;
pub mod cli;
pub mod compression;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod runconfig;
pub mod ssm;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
