//! Shared tokenization.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercase, normalize typographic apostrophes, split on whitespace and strip
/// punctuation. Apostrophes inside a word survive (`i'm`), everything else that
/// is not alphanumeric is dropped. Tokens that end up empty are removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let mut word = String::with_capacity(raw.len());
            for ch in raw.chars() {
                let ch = if ch == '\u{2019}' || ch == '\u{2018}' { '\'' } else { ch };
                if ch.is_alphanumeric() || ch == '\'' {
                    word.extend(ch.to_lowercase());
                }
            }
            let trimmed = word.trim_matches('\'');
            if trimmed.is_empty() {
                None
            } else if trimmed.len() == word.len() {
                Some(word)
            } else {
                Some(String::from(trimmed))
            }
        })
        .collect()
}

/// Function words ignored by the lexical-overlap stubs.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "for", "with", "by",
    "from", "as", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that",
    "these", "those", "their", "they", "them", "themself", "themselves", "he", "she", "his",
    "her", "so", "than", "then", "there", "what", "which", "who", "do", "does", "did", "not",
    "no", "into", "about", "all", "any", "some", "such", "own", "way", "just", "very", "s",
];

/// Tokens that are not stopwords; falls back to all tokens when that would be empty.
pub fn content_tokens(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    let content: Vec<String> = tokens
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .cloned()
        .collect();
    if content.is_empty() {
        tokens
    } else {
        content
    }
}
