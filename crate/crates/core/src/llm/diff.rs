//! SEARCH/REPLACE edit application.
//!
//! Each edit's search text must occur exactly once (byte-for-byte) in the
//! current text. Edits apply in order; later edits see earlier results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEdit {
    pub search: String,
    pub replace: String,
}

impl DiffEdit {
    pub fn new(search: impl Into<String>, replace: impl Into<String>) -> Self {
        DiffEdit {
            search: search.into(),
            replace: replace.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("edit {index}: search text not found")]
    NoMatch { index: usize },
    #[error("edit {index}: search text matches {count} locations")]
    AmbiguousMatch { index: usize, count: usize },
    #[error("edit {index}: search equals replace")]
    NoOpEdit { index: usize },
    #[error("edit {index}: empty search text")]
    EmptySearch { index: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffOptions {
    /// Retry failed exact matches line-wise, ignoring trailing whitespace.
    pub lenient_trailing_whitespace: bool,
}

/// Start offsets of every (possibly overlapping) occurrence of `needle`.
fn occurrences(haystack: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let at = from + pos;
        out.push(at);
        // advance one character to catch overlapping matches
        from = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
        if from > haystack.len() {
            break;
        }
    }
    out
}

pub fn apply_diff(source: &str, edits: &[DiffEdit]) -> Result<String, DiffError> {
    apply_diff_with(source, edits, DiffOptions::default())
}

pub fn apply_diff_with(source: &str, edits: &[DiffEdit], options: DiffOptions) -> Result<String, DiffError> {
    let mut text = source.to_string();
    for (index, edit) in edits.iter().enumerate() {
        if edit.search.is_empty() {
            return Err(DiffError::EmptySearch { index });
        }
        if edit.search == edit.replace {
            return Err(DiffError::NoOpEdit { index });
        }
        let hits = occurrences(&text, &edit.search);
        match hits.len() {
            1 => {
                let at = hits[0];
                text.replace_range(at..at + edit.search.len(), &edit.replace);
            }
            0 if options.lenient_trailing_whitespace => {
                let range = lenient_match(&text, &edit.search, index)?;
                text.replace_range(range, &edit.replace);
            }
            0 => return Err(DiffError::NoMatch { index }),
            count => return Err(DiffError::AmbiguousMatch { index, count }),
        }
    }
    Ok(text)
}

/// Byte ranges of each line, excluding the terminating newline.
fn line_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' {
            spans.push((start, i));
            start = i + 1;
        }
    }
    spans.push((start, text.len()));
    spans
}

fn lenient_match(text: &str, search: &str, index: usize) -> Result<std::ops::Range<usize>, DiffError> {
    let wanted: Vec<&str> = search.split('\n').map(str::trim_end).collect();
    let spans = line_spans(text);
    if wanted.len() > spans.len() {
        return Err(DiffError::NoMatch { index });
    }
    let hits: Vec<usize> = (0..=spans.len() - wanted.len())
        .filter(|&s| {
            wanted
                .iter()
                .enumerate()
                .all(|(k, w)| text[spans[s + k].0..spans[s + k].1].trim_end() == *w)
        })
        .collect();
    match hits.len() {
        0 => Err(DiffError::NoMatch { index }),
        1 => {
            let s = hits[0];
            Ok(spans[s].0..spans[s + wanted.len() - 1].1)
        }
        count => Err(DiffError::AmbiguousMatch { index, count }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_exact_match() {
        assert_eq!(apply_diff("a\nb\nc", &[DiffEdit::new("b", "x")]).unwrap(), "a\nx\nc");
    }

    #[test]
    fn duplicate_snippet_is_ambiguous() {
        assert_eq!(
            apply_diff("a\na", &[DiffEdit::new("a", "z")]),
            Err(DiffError::AmbiguousMatch { index: 0, count: 2 })
        );
    }

    #[test]
    fn overlapping_occurrences_are_ambiguous() {
        assert!(matches!(
            apply_diff("aaa", &[DiffEdit::new("aa", "b")]),
            Err(DiffError::AmbiguousMatch { .. })
        ));
    }

    #[test]
    fn sequential_application() {
        let edits = [DiffEdit::new("b", "x"), DiffEdit::new("x", "y")];
        assert_eq!(apply_diff("a\nb", &edits).unwrap(), "a\ny");
    }

    #[test]
    fn errors() {
        assert_eq!(
            apply_diff("abc", &[DiffEdit::new("q", "r")]),
            Err(DiffError::NoMatch { index: 0 })
        );
        assert_eq!(
            apply_diff("abc", &[DiffEdit::new("b", "b")]),
            Err(DiffError::NoOpEdit { index: 0 })
        );
        assert_eq!(
            apply_diff("abc", &[DiffEdit::new("a", "x"), DiffEdit::new("", "y")]),
            Err(DiffError::EmptySearch { index: 1 })
        );
    }

    #[test]
    fn exact_mode_is_whitespace_sensitive() {
        let src = "def f():  \n    return 1\n";
        let edit = DiffEdit::new("def f():\n    return 1", "def f():\n    return 2");
        assert_eq!(
            apply_diff(src, std::slice::from_ref(&edit)),
            Err(DiffError::NoMatch { index: 0 })
        );
        let lenient = DiffOptions {
            lenient_trailing_whitespace: true,
        };
        assert_eq!(
            apply_diff_with(src, &[edit], lenient).unwrap(),
            "def f():\n    return 2\n"
        );
    }
}
