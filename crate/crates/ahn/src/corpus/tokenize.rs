//! Sentence segmentation and word tokenization.
//!
//! Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
//! Tokens are lowercased maximal alphanumeric runs. Sentences without any
//! token are dropped.

use std::cell::Cell;

thread_local! {
    static TOKENIZE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `tokenize` invocations on this thread. Lets tests prove that
/// text-free training paths never touch review text.
pub fn tokenize_call_count() -> u64 {
    TOKENIZE_CALLS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceTokens {
    pub tokens: Vec<String>,
    /// Byte span of the sentence in the source text, whitespace-trimmed.
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(text: &str) -> Vec<SentenceTokens> {
    TOKENIZE_CALLS.with(|c| c.set(c.get() + 1));
    let mut sentences = Vec::new();
    let bytes = text.as_bytes();
    let mut sent_start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let is_terminal = matches!(c, '.' | '!' | '?');
        let at_boundary = is_terminal
            && match iter.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
        if at_boundary {
            let end = i + c.len_utf8();
            push_sentence(text, sent_start, end, &mut sentences);
            sent_start = end;
        }
        let _ = bytes;
    }
    if sent_start < text.len() {
        push_sentence(text, sent_start, text.len(), &mut sentences);
    }
    sentences
}

fn push_sentence(text: &str, start: usize, end: usize, out: &mut Vec<SentenceTokens>) {
    let raw = &text[start..end];
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return;
    }
    let lead = raw.len() - raw.trim_start().len();
    let trail = raw.len() - raw.trim_end().len();
    let tokens = split_tokens(trimmed);
    if tokens.is_empty() {
        return;
    }
    out.push(SentenceTokens {
        tokens,
        start: start + lead,
        end: end - trail,
    });
}

fn split_tokens(s: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                cur.push(lc);
            }
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}
