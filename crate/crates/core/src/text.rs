//! Small text helpers shared across stages.

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// Canonical form used when deciding whether two translations are "the same":
/// NFC composition, trimmed, internal whitespace runs collapsed to one space.
pub fn normalize_text(text: &str) -> String {
    let composed: String = text.nfc().collect();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rough token count used for context-budget checks.
///
/// ASCII characters count as a quarter token each, everything else (CJK,
/// kana, accented Latin) as one token. This deliberately overestimates for
/// non-Latin scripts.
pub fn estimate_tokens(text: &str) -> u64 {
    let mut quarters: u64 = 0;
    for c in text.chars() {
        quarters += if c.is_ascii() { 1 } else { 4 };
    }
    quarters.div_ceil(4)
}

pub fn sha256_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Replaces every line break with a single space and trims the result.
pub fn flatten_line_breaks(text: &str) -> String {
    let replaced: String = text
        .chars()
        .map(|c| {
            if crate::corpus::is_line_break(c) {
                ' '
            } else {
                c
            }
        })
        .collect();
    replaced.trim().to_string()
}

/// Removes a surrounding Markdown code fence, if the whole text is fenced.
pub(crate) fn strip_code_fence(raw: &str) -> &str {
    let trimmed = raw.trim();
    if !trimmed.starts_with("```") {
        return trimmed;
    }
    let after_open = match trimmed.find('\n') {
        Some(i) => &trimmed[i + 1..],
        None => return trimmed,
    };
    match after_open.rfind("```") {
        Some(i) => after_open[..i].trim(),
        None => after_open.trim(),
    }
}
