//! Pulling programs and test inputs out of free-form model responses.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("response contains no program")]
    NoCode,
    #[error("response has no `Test Input:` block")]
    NoTestInput,
}

/// A fenced block: byte offsets of its content within the response.
#[derive(Debug, Clone, Copy)]
struct Fence {
    start: usize,
    end: usize,
    closed: bool,
}

/// Finds fenced blocks beginning at or after `from`. A fence opens on a line
/// whose trimmed text starts with three backticks and closes on the next
/// such line.
fn fences(text: &str, from: usize) -> Vec<Fence> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let mut pos = from;
    // Align to the beginning of a line.
    if pos > 0 && text.as_bytes().get(pos - 1) != Some(&b'\n') {
        pos = text[pos..].find('\n').map_or(text.len(), |i| pos + i + 1);
    }
    while pos < text.len() {
        let line_end = text[pos..].find('\n').map_or(text.len(), |i| pos + i);
        let line = &text[pos..line_end];
        let next = (line_end + 1).min(text.len());
        if line.trim_start().starts_with("```") {
            match open.take() {
                None => open = Some(next.max(line_end)),
                Some(start) => out.push(Fence {
                    start,
                    end: pos,
                    closed: true,
                }),
            }
        }
        pos = if line_end >= text.len() {
            text.len()
        } else {
            line_end + 1
        };
    }
    if let Some(start) = open {
        out.push(Fence {
            start: start.min(text.len()),
            end: text.len(),
            closed: false,
        });
    }
    out
}

/// The last fenced block, or the whole trimmed response when there is none.
pub fn extract_code(raw_text: &str) -> Result<String, ExtractError> {
    let code = match fences(raw_text, 0).last() {
        Some(f) => raw_text[f.start..f.end]
            .trim_end_matches(['\n', '\r'])
            .to_string(),
        None => raw_text.trim().to_string(),
    };
    if code.trim().is_empty() {
        return Err(ExtractError::NoCode);
    }
    Ok(code)
}

const TEST_INPUT_MARKER: &str = "Test Input:";

/// The bytes inside the first fenced block after the first `Test Input:`
/// marker. The newline ending the opening fence line and the one before the
/// closing fence are removed; everything in between is kept verbatim.
pub fn extract_test_input(raw_text: &str) -> Result<Vec<u8>, ExtractError> {
    let marker = raw_text
        .find(TEST_INPUT_MARKER)
        .ok_or(ExtractError::NoTestInput)?;
    let fence = fences(raw_text, marker + TEST_INPUT_MARKER.len())
        .into_iter()
        .find(|f| f.closed)
        .ok_or(ExtractError::NoTestInput)?;
    let body = &raw_text[fence.start..fence.end];
    let body = body.strip_suffix('\n').unwrap_or(body);
    Ok(body.as_bytes().to_vec())
}

/// Formats an adversary-style response around `input`, the inverse of
/// [`extract_test_input`] for inputs with no line starting with a fence.
pub fn format_adversary_response(reasoning: &str, input: &str, explanation: &str) -> String {
    format!("{reasoning}\n\nTest Input:\n```\n{input}\n```\n\nExplanation:\n{explanation}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_fenced_block() {
        let r = "Here you go:\n```python\nprint(1)\n```\n";
        assert_eq!(extract_code(r).unwrap(), "print(1)");
    }

    #[test]
    fn last_of_two_blocks() {
        let r = "Think.\n```\nprint(0)\n```\nBetter:\n```python\nn = int(input())\nprint(n)\n```\nDone.";
        assert_eq!(extract_code(r).unwrap(), "n = int(input())\nprint(n)");
    }

    #[test]
    fn unfenced_response_is_trimmed() {
        assert_eq!(extract_code("\n  print(2)  \n").unwrap(), "print(2)");
    }

    #[test]
    fn empty_response_has_no_code() {
        assert_eq!(extract_code("   \n"), Err(ExtractError::NoCode));
        assert_eq!(extract_code("```\n\n```"), Err(ExtractError::NoCode));
    }

    #[test]
    fn truncated_fence_runs_to_end() {
        assert_eq!(extract_code("```python\nprint(3)\n").unwrap(), "print(3)");
    }

    #[test]
    fn test_input_block() {
        let r = "Test Input:\n```\n3\n1 2 3\n```\nExplanation: ...";
        assert_eq!(extract_test_input(r).unwrap(), b"3\n1 2 3");
    }

    #[test]
    fn blank_line_block_is_empty_input() {
        let r = "Test Input:\n```\n\n```\nExplanation: empty";
        assert_eq!(extract_test_input(r).unwrap(), b"");
    }

    #[test]
    fn missing_marker() {
        assert_eq!(
            extract_test_input("```\n3\n```"),
            Err(ExtractError::NoTestInput)
        );
        assert_eq!(
            extract_test_input("Test Input: 3"),
            Err(ExtractError::NoTestInput)
        );
    }

    #[test]
    fn bold_marker_and_earlier_blocks() {
        let r = "Reasoning:\n```\nignored\n```\n**Test Input:**\n```text\n  5  \n\n```\n**Explanation:** spaces";
        assert_eq!(extract_test_input(r).unwrap(), b"  5  \n");
    }

    proptest! {
        #[test]
        fn adversary_format_round_trips(input in "[ 0-9a-z\t\n-]{0,60}") {
            let raw = format_adversary_response("Reasoning.", &input, "why");
            prop_assert_eq!(extract_test_input(&raw).unwrap(), input.as_bytes().to_vec());
        }
    }
}
