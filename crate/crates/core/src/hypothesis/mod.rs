//! Hypothesis generation: prompt rendering, the chat-completion client and the
//! tolerant parser for the `hypothesis_dict` / `prompt_dict` response format.

mod client;
mod parser;
mod prompt;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{prompt_sha256, DEFAULT_API_KEY_ENV, HttpRetryPolicy, LlmClient, LlmProvider, LlmRequest, MockEntry, MockProvider};
pub(crate) use client::{post_json, HttpFailure};
pub use parser::{parse_hypothesis_statements, parse_llm_response, render_response};
pub use prompt::{build_metadata_prompt, build_prompt, MetadataRecord};

/// Analysis is capped at this many hypotheses per class unless configured otherwise.
pub const DEFAULT_MAX_HYPOTHESES: usize = 20;

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error("sentence list is empty")]
    EmptySentences,
    #[error("metadata record list is empty")]
    EmptyRecords,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("http error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Http { status: Option<u16>, message: String },
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("could not parse LLM response: {message}")]
    Parse { message: String, raw: String },
    #[error("hypothesis/prompt pairing failed: {0}")]
    Pairing(String),
    #[error("mock provider has no response for prompt sha256 {0}")]
    MockMissing(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub attribute: String,
    pub statement: String,
    pub test_sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisSet {
    #[serde(rename = "class")]
    pub class_label: usize,
    pub raw_response: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisSet {
    pub fn with_class(mut self, class_label: usize) -> Self {
        self.class_label = class_label;
        self
    }

    /// Keeps the first `max` hypotheses.
    pub fn truncated(mut self, max: usize) -> Self {
        self.hypotheses.truncate(max);
        self
    }

    pub fn get(&self, id: &str) -> Option<&Hypothesis> {
        self.hypotheses.iter().find(|h| h.id == id)
    }
}
