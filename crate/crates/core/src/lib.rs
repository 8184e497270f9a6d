//! Instruction-data construction for driving video-language models.
//!
//! - [`bddx`]: annotation ingest and validation
//! - [`gcot`]: grounded chain-of-thought responses for VQA records
//! - [`tasks`]: the four driving instruction tasks
//! - [`embed`]: embedding indices and in-context exemplar retrieval
//! - [`sequence`]: interleaved training sequences with loss masks
//! - [`kernels`]: forward-pass reference kernels
//! - [`container`]: `EMB1`/`MAT1` binary files
//! - [`llm`]: chat-completion clients, cache and audit log

pub mod bddx;
pub mod container;
pub mod embed;
pub mod gcot;
pub mod kernels;
pub mod llm;
pub mod seed;
pub mod sequence;
pub mod tasks;
