use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::generators::fill;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    Sft,
    Kto,
}

impl HookKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HookKind::Sft => "sft",
            HookKind::Kto => "kto",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HookError {
    #[error("trainer hook template: unknown placeholder `{{{0}}}`")]
    Template(String),
    #[error("dataset `{0}` does not exist")]
    MissingDataset(String),
    #[error("could not start trainer hook: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("{kind} hook exited with {status}; stderr: {stderr}")]
    Failed {
        kind: &'static str,
        status: String,
        stderr: String,
    },
    #[error("{kind} hook printed no usable model id (last line {line:?})")]
    BadOutput { kind: &'static str, line: String },
}

/// Quotes `s` for POSIX `sh` unless it is made of unambiguous characters.
pub fn shell_quote(s: &str) -> String {
    let plain = !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"_-./:=@+,".contains(&b));
    if plain {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

pub fn render_hook_command(
    template: &str,
    kind: HookKind,
    dataset: &Path,
    model_id: &str,
    round: u32,
) -> Result<String, HookError> {
    let values = [
        ("kind", shell_quote(kind.as_str())),
        ("dataset", shell_quote(&dataset.display().to_string())),
        ("model_id", shell_quote(model_id)),
        ("round", round.to_string()),
    ];
    fill(template, |name| {
        values
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.as_str())
    })
    .map_err(|e| HookError::Template(e.0))
}

/// Runs the trainer hook through `sh -c` and returns the model id printed
/// on its last non-empty stdout line. The environment is inherited.
pub fn trainer_hook_invoke(
    template: &str,
    kind: HookKind,
    dataset: &Path,
    model_id: &str,
    round: u32,
) -> Result<String, HookError> {
    if !dataset.exists() {
        return Err(HookError::MissingDataset(dataset.display().to_string()));
    }
    let command = render_hook_command(template, kind, dataset, model_id, round)?;
    tracing::info!(kind = kind.as_str(), round, %command, "running trainer hook");
    let out = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(HookError::Spawn)?;
    let stderr = String::from_utf8_lossy(&out.stderr).trim_end().to_string();
    if !out.status.success() {
        return Err(HookError::Failed {
            kind: kind.as_str(),
            status: out.status.to_string(),
            stderr,
        });
    }
    if !stderr.is_empty() {
        tracing::debug!(kind = kind.as_str(), %stderr, "trainer hook stderr");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string();
    if line.is_empty() || line.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(HookError::BadOutput {
            kind: kind.as_str(),
            line,
        });
    }
    Ok(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> tempfile::NamedTempFile {
        tempfile::NamedTempFile::new().unwrap()
    }

    #[test]
    fn identity_hook_keeps_id() {
        let d = dataset();
        assert_eq!(
            trainer_hook_invoke("echo {model_id}", HookKind::Sft, d.path(), "base-7b", 1).unwrap(),
            "base-7b"
        );
    }

    #[test]
    fn hook_output_is_adopted() {
        let d = dataset();
        let id = trainer_hook_invoke(
            "echo training; echo adapter-r{round}-solver",
            HookKind::Sft,
            d.path(),
            "m",
            2,
        );
        assert_eq!(id.unwrap(), "adapter-r2-solver");
    }

    #[test]
    fn failing_hook_reports_stderr() {
        let d = dataset();
        match trainer_hook_invoke("echo boom >&2; exit 1", HookKind::Kto, d.path(), "m", 1) {
            Err(HookError::Failed { stderr, .. }) => assert_eq!(stderr, "boom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbled_output_is_rejected() {
        let d = dataset();
        assert!(matches!(
            trainer_hook_invoke("echo 'two words'", HookKind::Sft, d.path(), "m", 1),
            Err(HookError::BadOutput { .. })
        ));
        assert!(matches!(
            trainer_hook_invoke("true", HookKind::Sft, d.path(), "m", 1),
            Err(HookError::BadOutput { .. })
        ));
    }

    #[test]
    fn arguments_are_quoted() {
        let d = dataset();
        let id = trainer_hook_invoke(
            "printf '%s\\n' {model_id}",
            HookKind::Sft,
            d.path(),
            "it's; rm -rf x",
            1,
        );
        assert!(
            matches!(id, Err(HookError::BadOutput { ref line, .. }) if line == "it's; rm -rf x")
        );
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("adapter-1"), "adapter-1");
    }

    #[test]
    fn kind_and_round_substitute() {
        let cmd = render_hook_command(
            "train {kind} {dataset} {round}",
            HookKind::Kto,
            Path::new("/x/kto.jsonl"),
            "m",
            3,
        );
        assert_eq!(cmd.unwrap(), "train kto /x/kto.jsonl 3");
        assert!(matches!(
            render_hook_command("train {bogus}", HookKind::Kto, Path::new("d"), "m", 3),
            Err(HookError::Template(_))
        ));
    }
}
