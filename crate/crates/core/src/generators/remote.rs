//! Chat-completion client for OpenAI-compatible endpoints.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    chat_messages, render_prompt, Generator, GeneratorError, GeneratorRequest, GeneratorResponse,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    /// Attempts per sample, including the first.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_in_flight: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_ms: 300_000,
            max_attempts: 5,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            max_in_flight: 8,
            max_tokens: None,
        }
    }
}

enum Attempt {
    Done(GeneratorResponse),
    /// Worth retrying: transport errors, 429, 5xx.
    Transient(String),
    /// Not worth retrying for this sample (other 4xx, unparseable body).
    Failed(String),
    Auth(u16),
}

enum SlotOutcome {
    Ok(GeneratorResponse),
    Unavailable { attempts: u32, last_error: String },
    Failed,
    Auth(u16),
}

pub struct RemoteBackend {
    config: EndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        RemoteBackend {
            config,
            agent,
            api_key,
        }
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.config.backoff_max_ms))
    }

    fn attempt(&self, req: &GeneratorRequest<'_>, body: &Value) -> Attempt {
        let mut call = self
            .agent
            .post(self.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Attempt::Auth(status),
            429 | 500..=599 => return Attempt::Transient(format!("HTTP {status}")),
            _ => return Attempt::Failed(format!("HTTP {status}")),
        }
        let parsed: Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => return Attempt::Failed(format!("bad response body: {e}")),
        };
        let choice = &parsed["choices"][0];
        let Some(text) = choice["message"]["content"].as_str() else {
            return Attempt::Failed("response has no message content".into());
        };
        let finish = choice["finish_reason"].as_str().unwrap_or("unknown");
        let tokens = parsed["usage"]["completion_tokens"].as_u64();
        match GeneratorResponse::from_raw(req.role, text.to_string(), tokens, finish) {
            Ok(r) => Attempt::Done(r),
            Err(e) => Attempt::Failed(e.to_string()),
        }
    }

    fn sample(&self, req: &GeneratorRequest<'_>, messages: &Value, index: usize) -> SlotOutcome {
        let mut body = json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "n": 1,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed.wrapping_add(index as u64) & ((1 << 53) - 1));
        }
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let attempts = self.config.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            match self.attempt(req, &body) {
                Attempt::Done(r) => return SlotOutcome::Ok(r),
                Attempt::Auth(s) => return SlotOutcome::Auth(s),
                Attempt::Failed(e) => {
                    tracing::warn!(sample = index, error = %e, "sample failed");
                    return SlotOutcome::Failed;
                }
                Attempt::Transient(e) => {
                    last_error = e;
                    if attempt + 1 < attempts {
                        let wait = self.backoff(attempt);
                        tracing::warn!(sample = index, attempt = attempt + 1, error = %last_error, ?wait, "retrying");
                        thread::sleep(wait);
                    }
                }
            }
        }
        SlotOutcome::Unavailable {
            attempts,
            last_error,
        }
    }
}

impl Generator for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    /// Issues one request per sample with at most `max_in_flight` in flight.
    /// Individual failures leave empty slots; the call errors only when
    /// credentials are rejected or every sample exhausted its retries.
    fn generate(
        &self,
        req: &GeneratorRequest<'_>,
    ) -> Result<Vec<Option<GeneratorResponse>>, GeneratorError> {
        let prompt = render_prompt(req.role, req.problem)?;
        let messages = serde_json::to_value(chat_messages(&prompt)).expect("messages serialize");
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<SlotOutcome>>> =
            (0..req.n_samples).map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_in_flight.max(1).min(req.n_samples.max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= req.n_samples {
                        break;
                    }
                    let outcome = self.sample(req, &messages, i);
                    *slots[i].lock().expect("slot") = Some(outcome);
                });
            }
        });
        let outcomes: Vec<SlotOutcome> = slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot").expect("filled"))
            .collect();

        if let Some(status) = outcomes.iter().find_map(|o| match o {
            SlotOutcome::Auth(s) => Some(*s),
            _ => None,
        }) {
            return Err(GeneratorError::AuthError { status });
        }
        if !outcomes.is_empty()
            && outcomes
                .iter()
                .all(|o| matches!(o, SlotOutcome::Unavailable { .. }))
        {
            let (attempts, last_error) = match &outcomes[0] {
                SlotOutcome::Unavailable {
                    attempts,
                    last_error,
                } => (*attempts, last_error.clone()),
                _ => unreachable!(),
            };
            return Err(GeneratorError::EndpointUnavailable {
                attempts,
                last_error,
            });
        }
        Ok(outcomes
            .into_iter()
            .map(|o| match o {
                SlotOutcome::Ok(r) => Some(r),
                _ => None,
            })
            .collect())
    }
}
