//! Imaginary question answering harness: question models invent
//! multiple-choice questions about made-up concepts, answer models answer
//! them, and the harness measures how often they agree.

pub mod analysis;
pub mod anspipeline;
pub mod cli;
pub mod domain;
pub mod genpipeline;
pub mod metrics;
pub mod probes;
pub mod prompts;
pub mod providers;
pub mod store;
