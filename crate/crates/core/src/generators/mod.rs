//! Candidate-program and test-input generation behind one backend trait.

mod extract;
mod grammar;
mod offline;
mod prompt;
mod remote;

pub use extract::{extract_code, extract_test_input, format_adversary_response, ExtractError};
pub use grammar::{Count, InputGrammar, Item, LineSpec};
pub use offline::{OfflineBackend, OfflineConfig, OfflineSpec, PoolProgram, Variant};
pub use prompt::{
    chat_messages, example_intro, fill, render_prompt, ChatMessage, MissingPlaceholder, Role,
    TEMPLATE_VERSION,
};
pub use remote::{EndpointConfig, RemoteBackend};

use serde::{Deserialize, Serialize};

use crate::model::{whitespace_token_count, Problem};

#[derive(Debug, Clone)]
pub struct GeneratorRequest<'a> {
    pub role: Role,
    pub problem: &'a Problem,
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorResponse {
    pub raw_text: String,
    /// Program source (solver) or test input bytes (adversary).
    pub extracted: Vec<u8>,
    pub token_length: u64,
    pub finish_reason: String,
}

impl GeneratorResponse {
    /// Runs the role's extractor over `raw_text`. `token_length` falls back
    /// to a whitespace token count when the backend reports none.
    pub fn from_raw(
        role: Role,
        raw_text: String,
        token_length: Option<u64>,
        finish_reason: impl Into<String>,
    ) -> Result<Self, ExtractError> {
        let extracted = match role {
            Role::Solver => extract_code(&raw_text)?.into_bytes(),
            Role::Adversary => extract_test_input(&raw_text)?,
        };
        Ok(GeneratorResponse {
            token_length: token_length.unwrap_or_else(|| whitespace_token_count(&raw_text)),
            raw_text,
            extracted,
            finish_reason: finish_reason.into(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("endpoint unavailable after {attempts} attempts: {last_error}")]
    EndpointUnavailable { attempts: u32, last_error: String },
    #[error("endpoint rejected credentials (HTTP {status})")]
    AuthError { status: u16 },
    #[error("problem `{0}` has no offline input grammar")]
    MissingGrammar(String),
    #[error("problem `{0}` has no offline program pool")]
    MissingPool(String),
    #[error("offline generation requires a seed")]
    MissingSeed,
    #[error(transparent)]
    Prompt(#[from] MissingPlaceholder),
}

/// A source of samples for either role.
///
/// Slots are positionally aligned with sample indices; `None` marks a sample
/// that failed (transport error, nothing extractable) and is dropped.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;

    fn generate(
        &self,
        req: &GeneratorRequest<'_>,
    ) -> Result<Vec<Option<GeneratorResponse>>, GeneratorError>;
}
