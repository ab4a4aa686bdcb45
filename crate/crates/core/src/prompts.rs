//! System prompt templates for both stages and the corrective follow-ups.
//!
//! The hypothesis and refinement templates are fixed texts with a single
//! `{target language}` slot. Do not edit their wording without bumping
//! [`PromptVersion`]: the run fingerprint hashes the rendered prompts.

use serde::{Deserialize, Serialize};

use crate::corpus::Role;

/// Header that starts a corrective block appended to a user message on retry.
pub const CORRECTION_HEADER: &str = "# Correction";

const TARGET_SLOT: &str = "{target language}";

const HYPOTHESIS_TEMPLATE: &str = "\
# Data Description
- This is Japanese text counseling data from role-playing sessions where counselors acted as both counselor and client.
- Each line is separated by a colon (':'). The left side indicates the role name, and the right side is the utterance.

# Translation Instructions
- As a professional translator, translate this data into {target language}.
- For the translation, please use polite and natural expressions that are appropriate for a counseling context.";

const REFINE_HEAD: &str = "\
# Data Description
- This data includes Japanese text counseling data and its {target language} translation candidates.
- Japanese text counseling data was collected through role-playing between counselors acting as counselor and client.

# Input Data Format
- The input is a list of dictionary objects.
## Keys of each dictionary
  - 'role': Role of the speaker ('Counselor' or 'Client')
  - 'source': Japanese original text
  - {hypothesis keys}: {target language} translation candidates

# Evaluation Instructions
- You are a professional translator, evaluate the {target language} translation candidates.
- For each utterance, follow these steps for evaluation:
  1. Analysis of Each Translation Candidate
  - Compare each translation candidate and describe specifically which parts are superior.
  - Describe specifically which parts need improvement.
  2. Construction of an Improved Translation
  - Based on your analysis, synthesize a revised translation by combining the strengths of {combine scope} candidates.
  - Make corrections based on the areas for improvement you identified.
  - Ensure consistent terminology to maintain consistency throughout the translation.";

/// Wording variant of the refinement prompt.
///
/// `Original` keeps "combining the strengths of both candidates" even though
/// three candidates are supplied; `Corrected` says "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVersion {
    #[default]
    Original,
    Corrected,
}

impl PromptVersion {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVersion::Original => "original",
            PromptVersion::Corrected => "corrected",
        }
    }
}

/// Stage 1 system prompt.
pub fn hypothesis_system_prompt(target_language: &str) -> String {
    HYPOTHESIS_TEMPLATE.replace(TARGET_SLOT, target_language)
}

/// `'hypothesis1', 'hypothesis2', ...` for `count` candidates.
pub fn hypothesis_key_list(count: usize) -> String {
    (1..=count)
        .map(|i| format!("'hypothesis{i}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Options controlling the stage 2 system prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefinePromptOptions {
    pub version: PromptVersion,
    pub hypothesis_count: usize,
    pub with_analysis: bool,
}

impl Default for RefinePromptOptions {
    fn default() -> Self {
        RefinePromptOptions {
            version: PromptVersion::Original,
            hypothesis_count: 3,
            with_analysis: true,
        }
    }
}

/// Stage 2 system prompt: the evaluation instructions followed by an output
/// format clause that makes the reply machine-readable.
pub fn refine_system_prompt(target_language: &str, options: RefinePromptOptions) -> String {
    let scope = match options.version {
        PromptVersion::Original => "both",
        PromptVersion::Corrected => "all",
    };
    let head = REFINE_HEAD
        .replace(
            "{hypothesis keys}",
            &hypothesis_key_list(options.hypothesis_count),
        )
        .replace("{combine scope}", scope)
        .replace(TARGET_SLOT, target_language);
    let analysis_line = if options.with_analysis {
        "- Each object has exactly two keys: 'analysis' (your step 1 analysis of the candidates for that utterance) and 'final' (your step 2 improved translation of that utterance).".to_string()
    } else {
        "- Each object has exactly two keys: 'analysis' (an empty string) and 'final' (your improved translation of that utterance).".to_string()
    };
    format!(
        "{head}\n\n# Output Format\n\
         - Return only a JSON array containing exactly one object per input dictionary, in the same order as the input.\n\
         {analysis_line}\n\
         - Write every 'final' value in {target_language} on a single line."
    )
}

/// Corrective block appended to the stage 1 user message after an alignment failure.
pub fn hypothesis_correction(reason: &str, roles: &[Role]) -> String {
    let sequence = roles
        .iter()
        .map(|r| r.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "{CORRECTION_HEADER}\n\
         - Your previous output could not be aligned with the source dialogue: {reason}.\n\
         - Output exactly {n} lines, one per source line and in the same order, each in the form \"Role: translation\".\n\
         - Required role sequence: {sequence}.\n\
         - Do not add any other text.",
        n = roles.len()
    )
}

/// Corrective block appended to the stage 2 user message after a parse failure.
pub fn refine_correction(reason: &str, expected: usize) -> String {
    format!(
        "{CORRECTION_HEADER}\n\
         - Your previous output could not be used: {reason}.\n\
         - Return only a JSON array of exactly {expected} objects with the keys 'analysis' and 'final', one per input dictionary, in input order.\n\
         - Every 'final' value must be non-empty."
    )
}

/// Joins a user message and a correction block.
pub fn with_correction(user_content: &str, correction: &str) -> String {
    format!("{user_content}\n\n{correction}")
}

/// The part of a user message before any correction block.
pub fn strip_correction(user_content: &str) -> &str {
    match user_content.find(&format!("\n\n{CORRECTION_HEADER}\n")) {
        Some(i) => &user_content[..i],
        None => user_content,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypothesis_slot_filled() {
        let p = hypothesis_system_prompt("English");
        assert!(p.contains("translate this data into English."));
        assert!(!p.contains(TARGET_SLOT));
        assert!(hypothesis_system_prompt("Chinese").contains("translate this data into Chinese"));
    }

    #[test]
    fn refine_versions_differ_only_in_scope() {
        let o = refine_system_prompt("English", RefinePromptOptions::default());
        let c = refine_system_prompt(
            "English",
            RefinePromptOptions {
                version: PromptVersion::Corrected,
                ..Default::default()
            },
        );
        assert!(o.contains("strengths of both candidates"));
        assert!(c.contains("strengths of all candidates"));
        assert_eq!(o.replace("both candidates", "all candidates"), c);
    }

    #[test]
    fn hypothesis_keys_follow_count() {
        assert_eq!(
            hypothesis_key_list(3),
            "'hypothesis1', 'hypothesis2', 'hypothesis3'"
        );
        let p = refine_system_prompt(
            "English",
            RefinePromptOptions {
                hypothesis_count: 4,
                ..Default::default()
            },
        );
        assert!(p.contains("'hypothesis4': English translation candidates"));
    }

    #[test]
    fn correction_round_trip() {
        let user = "Counselor: a\nClient: b";
        let full = with_correction(
            user,
            &hypothesis_correction("x", &[Role::Counselor, Role::Client]),
        );
        assert_eq!(strip_correction(&full), user);
        assert_eq!(strip_correction(user), user);
        assert!(full.contains("Required role sequence: Counselor, Client."));
    }
}
