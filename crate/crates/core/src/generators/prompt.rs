//! Fixed role prompts and chat-markup handling.

use serde::{Deserialize, Serialize};

use crate::model::Problem;

pub const TEMPLATE_VERSION: &str = "v1";

const SOLVER_TEMPLATE: &str = include_str!("../../templates/solver.v1.txt");
const ADVERSARY_TEMPLATE: &str = include_str!("../../templates/adversary.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Solver,
    Adversary,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Solver => "solver",
            Role::Adversary => "adversary",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            Role::Solver => SOLVER_TEMPLATE,
            Role::Adversary => ADVERSARY_TEMPLATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("template placeholder `{{{0}}}` has no value")]
pub struct MissingPlaceholder(pub String);

/// Example block shown to the adversary: the first ground-truth test.
pub fn example_intro(problem: &Problem) -> String {
    match problem.gt_tests.first() {
        Some(t) => format!(
            "Example input:\n```\n{}\n```\nExample output:\n```\n{}\n```\n\n",
            t.input.to_text().trim_end_matches('\n'),
            t.expected_output.to_text().trim_end_matches('\n'),
        ),
        None => String::new(),
    }
}

/// Instantiates the role's template for `problem`.
pub fn render_prompt(role: Role, problem: &Problem) -> Result<String, MissingPlaceholder> {
    let intro = example_intro(problem);
    fill(role.template(), |name| match name {
        "problem" => Some(problem.statement.as_str()),
        "example_intro" => Some(intro.as_str()),
        _ => None,
    })
}

/// Single-pass substitution of `{identifier}` placeholders. Substituted text
/// is not rescanned, so braces inside problem statements are left alone.
pub fn fill<'a>(
    template: &str,
    lookup: impl Fn(&str) -> Option<&'a str>,
) -> Result<String, MissingPlaceholder> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n)
                if !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                out.push_str(lookup(n).ok_or_else(|| MissingPlaceholder(n.to_string()))?);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// One chat message parsed from `<|im_start|>role ... <|im_end|>` markup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Splits a rendered prompt into chat messages. Text outside markup is
/// treated as a single user message.
pub fn chat_messages(prompt: &str) -> Vec<ChatMessage> {
    const START: &str = "<|im_start|>";
    const END: &str = "<|im_end|>";
    let mut out = Vec::new();
    let mut rest = prompt;
    while let Some(s) = rest.find(START) {
        let body = &rest[s + START.len()..];
        let (role, body) = body.split_once('\n').unwrap_or((body, ""));
        let (content, next) = match body.find(END) {
            Some(e) => (&body[..e], &body[e + END.len()..]),
            None => (body, ""),
        };
        out.push(ChatMessage {
            role: role.trim().to_string(),
            content: content.trim_end_matches('\n').to_string(),
        });
        rest = next;
    }
    if out.is_empty() {
        out.push(ChatMessage {
            role: "user".into(),
            content: prompt.to_string(),
        });
    }
    out
}
