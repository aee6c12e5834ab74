//! Domain generalization through prompt disentanglement, worst-case style
//! alignment and a domain-specific prototype cache, on a frozen surrogate
//! vision-language backbone.

pub mod backbone;
pub mod diagnostics;
pub mod dspl;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod stages;
pub mod wera;

pub use error::{Error, Result};
