//! Tokenization and token-sequence search.

use alloc::string::String;
use alloc::vec::Vec;

/// Splits an utterance into lowercase tokens.
///
/// Whitespace separates tokens; every character that is neither whitespace
/// nor alphanumeric becomes a token of its own.
pub fn tokenize(utterance: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in utterance.chars() {
        if c.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_lowercase().collect());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(core::mem::take(current));
    }
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Position of the first occurrence of `needle` as a contiguous run in `haystack`.
pub fn find_subsequence<S: AsRef<str>>(haystack: &[S], needle: &[S]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&start| {
        needle
            .iter()
            .zip(&haystack[start..])
            .all(|(a, b)| a.as_ref() == b.as_ref())
    })
}
