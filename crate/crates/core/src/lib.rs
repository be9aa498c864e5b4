//! Error-slice discovery in a shared vision-language embedding space, with
//! LLM-written hypotheses and annotation-free last-layer mitigation.

pub mod artifacts;
pub mod corpus;
mod fsutil;
pub mod hypothesis;
pub mod matrix;
pub mod metrics;
pub mod mitigator;
pub mod pipeline;
pub mod projection;
pub mod retrieval;
pub mod slicer;
pub mod synthbench;

pub use corpus::{load_corpus, load_dataset, EmbeddingMatrix, SliceDataset, TextCorpus};
pub use fsutil::write_atomic;
pub use pipeline::PipelineError;
