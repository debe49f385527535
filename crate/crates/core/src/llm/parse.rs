//! Parsing of tagged model responses (`<NAME>`, `<DESCRIPTION>`, `<DIFF>` / `<CODE>`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::diff::DiffEdit;

const SEARCH_MARKER: &str = "<<<<<<< SEARCH";
const DIVIDER: &str = "=======";
const REPLACE_MARKER: &str = ">>>>>>> REPLACE";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    Diff,
    Code,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    DiffEdits(Vec<DiffEdit>),
    FullCode(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub name: String,
    pub description: String,
    pub payload: Payload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("missing <{0}> tag")]
    MissingTag(&'static str),
    #[error("malformed SEARCH/REPLACE block: {0}")]
    MalformedDiffBlock(String),
    #[error("empty code block")]
    EmptyCode,
}

/// Text between the first `<tag>` and the following `</tag>`.
fn tag_content<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let end = raw[start..].find(&close)? + start;
    Some(&raw[start..end])
}

/// Lowercase, whitespace collapsed to underscores.
pub fn normalize_name(name: &str) -> String {
    let joined = name.split_whitespace().collect::<Vec<_>>().join("_").to_lowercase();
    if joined.is_empty() {
        "unnamed".to_string()
    } else {
        joined
    }
}

pub fn parse_response(raw: &str, expect: Expect) -> Result<ParsedResponse, ParseError> {
    let name = normalize_name(tag_content(raw, "NAME").unwrap_or(""));
    let description = tag_content(raw, "DESCRIPTION").unwrap_or("").trim().to_string();
    let payload = match expect {
        Expect::Diff => {
            let body = tag_content(raw, "DIFF").ok_or(ParseError::MissingTag("DIFF"))?;
            Payload::DiffEdits(parse_diff_blocks(body)?)
        }
        Expect::Code => {
            let body = tag_content(raw, "CODE").ok_or(ParseError::MissingTag("CODE"))?;
            let code = strip_fence(body);
            if code.trim().is_empty() {
                return Err(ParseError::EmptyCode);
            }
            Payload::FullCode(code)
        }
    };
    Ok(ParsedResponse {
        name,
        description,
        payload,
    })
}

/// Splits a `<DIFF>` body into its SEARCH/REPLACE blocks, in order.
pub fn parse_diff_blocks(body: &str) -> Result<Vec<DiffEdit>, ParseError> {
    enum State {
        Outside,
        Search(Vec<String>),
        Replace(Vec<String>, Vec<String>),
    }
    let mut edits = Vec::new();
    let mut state = State::Outside;
    for line in body.lines() {
        let marker = line.trim_end();
        state = match state {
            State::Outside if marker == SEARCH_MARKER => State::Search(Vec::new()),
            State::Outside => State::Outside,
            State::Search(s) if marker == DIVIDER => State::Replace(s, Vec::new()),
            State::Search(_) if marker == SEARCH_MARKER || marker == REPLACE_MARKER => {
                return Err(ParseError::MalformedDiffBlock(format!(
                    "unexpected `{marker}` before divider"
                )));
            }
            State::Search(mut s) => {
                s.push(line.to_string());
                State::Search(s)
            }
            State::Replace(s, r) if marker == REPLACE_MARKER => {
                if s.is_empty() {
                    return Err(ParseError::MalformedDiffBlock("empty SEARCH section".into()));
                }
                edits.push(DiffEdit::new(s.join("\n"), r.join("\n")));
                State::Outside
            }
            State::Replace(_, _) if marker == SEARCH_MARKER => {
                return Err(ParseError::MalformedDiffBlock("unterminated REPLACE section".into()));
            }
            State::Replace(s, mut r) => {
                r.push(line.to_string());
                State::Replace(s, r)
            }
        };
    }
    if !matches!(state, State::Outside) {
        return Err(ParseError::MalformedDiffBlock("unterminated block".into()));
    }
    if edits.is_empty() {
        return Err(ParseError::MalformedDiffBlock("no SEARCH/REPLACE blocks".into()));
    }
    Ok(edits)
}

/// Removes one surrounding fenced code block, if present.
fn strip_fence(body: &str) -> String {
    let lines: Vec<&str> = body.lines().collect();
    let Some(open) = lines.iter().position(|l| l.trim_start().starts_with("```")) else {
        return body.trim_matches('\n').to_string();
    };
    let close = lines[open + 1..]
        .iter()
        .rposition(|l| l.trim() == "```")
        .map(|i| i + open + 1)
        .unwrap_or(lines.len());
    let mut code = lines[open + 1..close].join("\n");
    code.push('\n');
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIFF_ONE: &str = "Sure, here is my edit.\n<NAME>\nTune Step\n</NAME>\n<DESCRIPTION>\nSmaller step.\n</DESCRIPTION>\n<DIFF>\n<<<<<<< SEARCH\nstep = 0.1\n=======\nstep = 0.05\n>>>>>>> REPLACE\n</DIFF>\nThanks!";

    #[test]
    fn single_block() {
        let r = parse_response(DIFF_ONE, Expect::Diff).unwrap();
        assert_eq!(r.name, "tune_step");
        assert_eq!(r.description, "Smaller step.");
        assert_eq!(
            r.payload,
            Payload::DiffEdits(vec![DiffEdit::new("step = 0.1", "step = 0.05")])
        );
    }

    #[test]
    fn missing_diff_tag() {
        assert_eq!(
            parse_response("<NAME>x</NAME><CODE>y</CODE>", Expect::Diff),
            Err(ParseError::MissingTag("DIFF"))
        );
    }

    #[test]
    fn consecutive_blocks_in_order() {
        let raw = "<DIFF>\n<<<<<<< SEARCH\na = 1\n=======\na = 2\n>>>>>>> REPLACE\n<<<<<<< SEARCH\n    b = 1\n    c = 1\n=======\n    b = 3\n>>>>>>> REPLACE\n</DIFF>";
        let r = parse_response(raw, Expect::Diff).unwrap();
        assert_eq!(
            r.payload,
            Payload::DiffEdits(vec![
                DiffEdit::new("a = 1", "a = 2"),
                DiffEdit::new("    b = 1\n    c = 1", "    b = 3"),
            ])
        );
    }

    #[test]
    fn malformed_blocks() {
        for body in [
            "<DIFF>\n<<<<<<< SEARCH\na\n</DIFF>",
            "<DIFF>\n<<<<<<< SEARCH\na\n=======\nb\n</DIFF>",
            "<DIFF>\nno blocks here\n</DIFF>",
            "<DIFF>\n<<<<<<< SEARCH\n=======\nb\n>>>>>>> REPLACE\n</DIFF>",
        ] {
            assert!(
                matches!(
                    parse_response(body, Expect::Diff),
                    Err(ParseError::MalformedDiffBlock(_))
                ),
                "{body}"
            );
        }
    }

    #[test]
    fn code_strips_fence() {
        let raw = "<NAME>new algo</NAME>\n<CODE>\n```python\ndef f():\n    return 2\n```\n</CODE>";
        let r = parse_response(raw, Expect::Code).unwrap();
        assert_eq!(r.name, "new_algo");
        assert_eq!(r.payload, Payload::FullCode("def f():\n    return 2\n".into()));
    }

    #[test]
    fn code_without_fence() {
        let r = parse_response("<CODE>\nx = 1\n</CODE>", Expect::Code).unwrap();
        assert_eq!(r.payload, Payload::FullCode("x = 1".into()));
    }

    #[test]
    fn empty_code() {
        assert_eq!(
            parse_response("<CODE>\n```python\n```\n</CODE>", Expect::Code),
            Err(ParseError::EmptyCode)
        );
        assert_eq!(
            parse_response("<CODE></CODE>", Expect::Code),
            Err(ParseError::EmptyCode)
        );
    }

    #[test]
    fn missing_name_defaults() {
        let r = parse_response("<CODE>x = 1</CODE>", Expect::Code).unwrap();
        assert_eq!(r.name, "unnamed");
    }
}
