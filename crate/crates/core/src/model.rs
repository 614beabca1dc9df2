//! Shared domain types, corpus ingestion and output normalization.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::generators::OfflineSpec;

/// A byte payload (stdin contents, expected output, test input).
///
/// Serialized as a plain JSON string when the bytes are valid UTF-8, which
/// keeps corpora human-editable, and as `{"base64": "..."}` otherwise.
/// Both forms preserve the bytes exactly.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lossy text view, for prompts and diagnostics.
    pub fn to_text(&self) -> String {
        String::from_utf8_lossy(&self.0).into_owned()
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Self {
        Payload(s.as_bytes().to_vec())
    }
}

impl From<String> for Payload {
    fn from(s: String) -> Self {
        Payload(s.into_bytes())
    }
}

impl From<Vec<u8>> for Payload {
    fn from(v: Vec<u8>) -> Self {
        Payload(v)
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) => s.serialize_str(text),
            Err(_) => {
                #[derive(Serialize)]
                struct B64<'a> {
                    base64: &'a str,
                }
                let enc = base64::engine::general_purpose::STANDARD.encode(&self.0);
                B64 { base64: &enc }.serialize(s)
            }
        }
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            B64 { base64: String },
        }
        match Repr::deserialize(d)? {
            Repr::Text(t) => Ok(Payload(t.into_bytes())),
            Repr::B64 { base64 } => base64::engine::general_purpose::STANDARD
                .decode(base64)
                .map(Payload)
                .map_err(serde::de::Error::custom),
        }
    }
}

/// Hard resource limits applied to every sandboxed execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceLimits {
    #[serde(rename = "wall_time_ms", with = "millis")]
    pub wall_time: Duration,
    #[serde(rename = "cpu_time_ms", with = "millis")]
    pub cpu_time: Duration,
    #[serde(rename = "memory_bytes")]
    pub memory: u64,
    #[serde(rename = "output_cap_bytes")]
    pub output_cap: u64,
    pub max_test_input_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            wall_time: Duration::from_secs(5),
            cpu_time: Duration::from_secs(5),
            memory: 512 * 1024 * 1024,
            output_cap: 16 * 1024 * 1024,
            max_test_input_bytes: 1024 * 1024,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.wall_time.is_zero()
            || self.cpu_time.is_zero()
            || self.memory == 0
            || self.output_cap == 0
            || self.max_test_input_bytes == 0
        {
            return Err("all resource limits must be strictly positive".into());
        }
        if self.wall_time < self.cpu_time {
            return Err("wall_time must be >= cpu_time".into());
        }
        Ok(())
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// An input/expected-output pair taken from the corpus. The expected output
/// is the oracle and is never rewritten after ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTest {
    pub input: Payload,
    pub expected_output: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub gt_tests: Vec<GroundTruthTest>,
    /// Program run on a candidate test input; exit status 0 means the input
    /// satisfies the problem's constraints.
    #[serde(default, rename = "validator", skip_serializing_if = "Option::is_none")]
    pub input_validator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<ResourceLimits>,
    /// Input grammar and program pool used by the offline generator backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<OfflineSpec>,
}

impl Problem {
    pub fn effective_limits(&self, default: &ResourceLimits) -> ResourceLimits {
        self.limits.unwrap_or(*default)
    }

    pub fn gt_test_id(index: usize) -> String {
        format!("gt{index:02}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateProgram {
    pub problem_id: String,
    pub source: String,
    pub sample_index: u32,
    pub round: u32,
    pub generator_id: String,
    pub token_length: u64,
}

impl CandidateProgram {
    pub fn id(&self) -> String {
        format!("c{:02}", self.sample_index)
    }
}

/// Lifecycle of an adversarial test. Only `Valid` tests are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Unchecked,
    Valid,
    InvalidSpec,
    OverLimit,
    AllFail,
}

/// An adversary-produced test input. There is deliberately no expected
/// output: adversarial tests are judged on termination alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialTest {
    pub problem_id: String,
    pub input: Payload,
    pub sample_index: u32,
    pub round: u32,
    pub generator_id: String,
    pub token_length: u64,
    pub validity: Validity,
    /// The adversary's full formatted response the input was extracted from.
    pub raw_response: String,
}

impl AdversarialTest {
    pub fn id(&self) -> String {
        format!("adv{:02}", self.sample_index)
    }
}

/// Whitespace-delimited token count; the fallback when a generator does not
/// report completion tokens.
pub fn whitespace_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Canonical form used for ground-truth comparison: trailing whitespace is
/// stripped from every line and trailing blank lines are removed. All other
/// bytes are preserved.
pub fn normalize_output(raw: &[u8]) -> Vec<u8> {
    let mut lines: Vec<&[u8]> = raw.split(|&b| b == b'\n').map(trim_end_ascii_ws).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join(&b'\n')
}

fn trim_end_ascii_ws(line: &[u8]) -> &[u8] {
    let end = line
        .iter()
        .rposition(|b| !b.is_ascii_whitespace())
        .map_or(0, |p| p + 1);
    &line[..end]
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("invalid problem `{problem_id}`: {message}")]
    Validation { problem_id: String, message: String },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusDoc {
    Many(Vec<Problem>),
    Wrapped { problems: Vec<Problem> },
    One(Box<Problem>),
}

/// Loads and validates a corpus from a `.json` file (a problem, an array of
/// problems, or `{"problems": [...]}`), a `.jsonl` file with one problem per
/// line, or a directory of such files read in file-name order.
pub fn load_corpus(path: &Path) -> Result<Vec<Problem>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut problems = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("json" | "jsonl")
                )
            })
            .collect();
        files.sort();
        for f in files {
            problems.extend(read_corpus_file(&f)?);
        }
    } else {
        problems = read_corpus_file(path)?;
    }
    validate_corpus(&problems)?;
    Ok(problems)
}

fn read_corpus_file(path: &Path) -> Result<Vec<Problem>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: Problem = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line: Some(i + 1),
                message: e.to_string(),
            })?;
            out.push(p);
        }
        return Ok(out);
    }
    let doc: CorpusDoc = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    Ok(match doc {
        CorpusDoc::Many(v) | CorpusDoc::Wrapped { problems: v } => v,
        CorpusDoc::One(p) => vec![*p],
    })
}

pub fn validate_corpus(problems: &[Problem]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for p in problems {
        let fail = |message: &str| CorpusError::Validation {
            problem_id: p.id.clone(),
            message: message.to_string(),
        };
        if p.id.is_empty()
            || !p
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            || p.id.starts_with('.')
        {
            return Err(fail("id must be non-empty and use only [A-Za-z0-9_.-]"));
        }
        if !seen.insert(p.id.as_str()) {
            return Err(fail("duplicate problem id"));
        }
        if p.gt_tests.is_empty() {
            return Err(fail("gt_tests must contain at least one test"));
        }
        if let Some(limits) = &p.limits {
            limits.validate().map_err(|m| fail(&m))?;
        }
        if let Some(offline) = &p.offline {
            offline.validate().map_err(|m| fail(&m))?;
        }
    }
    Ok(())
}

/// Writes problems as a pretty-printed JSON array readable by [`load_corpus`].
pub fn save_corpus(problems: &[Problem], path: &Path) -> Result<(), CorpusError> {
    let text = serde_json::to_string_pretty(problems).expect("problems serialize");
    fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}
