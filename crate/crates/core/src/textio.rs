//! Shared helpers for the whitespace-separated text formats.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

/// Yields `(1-based line number, whitespace tokens)` for every line that is not
/// blank. Anything after a `#` is ignored.
pub fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        (!tokens.is_empty()).then_some((i + 1, tokens))
    })
}

pub fn parse_floats(line: usize, tokens: &[&str]) -> Result<Vec<f64>, ParseError> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ParseError::new(line, format!("invalid number `{t}`")))
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(ParseError::new(line, format!("non-finite value `{t}`")))
                    }
                })
        })
        .collect()
}

pub fn parse_usize(line: usize, token: &str) -> Result<usize, ParseError> {
    token
        .parse::<usize>()
        .map_err(|_| ParseError::new(line, format!("invalid index `{token}`")))
}

pub fn expect_len(line: usize, tokens: &[&str], n: usize, what: &str) -> Result<(), ParseError> {
    if tokens.len() != n {
        return Err(ParseError::new(
            line,
            format!("{what} expects {n} fields, found {}", tokens.len()),
        ));
    }
    Ok(())
}

/// Appends `values` separated by single spaces, using the shortest
/// round-trip representation of each float.
pub fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // normalize negative zero so equal values print identically
        let v = if *v == 0.0 { 0.0 } else { *v };
        let _ = write!(out, "{v}");
    }
}
