//! Automated embedded firmware development pipeline.
//!
//! Given a hardware configuration and a natural-language task, the crate
//! resolves driver libraries from a package index, learns their APIs from
//! header and example files, assembles a budgeted prompt for a chat model,
//! and drives nested compile/flash repair loops until the firmware passes
//! both a deterministic order check and a model-mediated logic check.
//!
//! Every model interaction goes through [`gateway::Gateway`], which
//! supports record and replay so the whole pipeline can run offline against
//! the [`executor::SimulatedExecutor`].

pub mod autoprogram;
pub mod dep_resolver;
pub mod error;
pub mod eval_harness;
pub mod executor;
pub mod gateway;
pub mod hw_config;
pub mod knowledge;
pub mod library_index;
pub mod memory_pickup;
pub mod pipeline;
pub mod prompting;
pub mod security;
pub mod text;

pub use error::{Error, Result};
