//! Chat-model task planning for robot manipulation.
//!
//! Instructions and a symbolic environment go in; a validated, executable
//! action sequence comes out, refined through feedback rounds when needed.

pub mod actions;
pub mod env;
pub mod executor;
pub mod llm;
pub mod plan;
pub mod prompt;
pub mod feedback;
pub mod session;
pub mod bench;
pub mod api;
pub mod cli;
