//! Role-annotated dialogue corpora.
//!
//! Two representations exist: the line-oriented `Role: utterance` text used
//! inside prompts, and a JSON-lines container (one dialogue per line) used on
//! disk. Parsing accepts both the ASCII `:` and the fullwidth `：` separator;
//! serialization always emits `Role: text` with an ASCII colon.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty dialogue text")]
    EmptyInput,
    #[error("line {0}: no role separator (':' or '：')")]
    LineWithoutSeparator(usize),
    #[error("line {line}: unknown role {token:?}")]
    UnknownRole { line: usize, token: String },
    #[error("line {0}: empty utterance body")]
    EmptyUtteranceBody(usize),
    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),
    #[error("dialogue {0:?} has no utterances")]
    EmptyDialogue(String),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate dialogue id {0:?}")]
    DuplicateDialogueId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Speaker role of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Counselor,
    Client,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Counselor => "Counselor",
            Role::Client => "Client",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps role tokens (as written in a dialogue line) to [`Role`]s.
///
/// Matching is case-insensitive after trimming. The default lexicon covers
/// English, Japanese and Chinese spellings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleLexicon {
    entries: HashMap<String, Role>,
}

impl Default for RoleLexicon {
    fn default() -> Self {
        let counselor = [
            "Counselor",
            "Counsellor",
            "カウンセラー",
            "相談員",
            "咨询师",
            "心理咨询师",
            "諮詢師",
            "咨询者",
        ];
        let client = [
            "Client",
            "相談者",
            "クライアント",
            "来访者",
            "求助者",
            "客户",
            "來訪者",
        ];
        let mut lexicon = RoleLexicon::empty();
        for token in counselor {
            lexicon.insert(token, Role::Counselor);
        }
        for token in client {
            lexicon.insert(token, Role::Client);
        }
        lexicon
    }
}

impl RoleLexicon {
    pub fn empty() -> Self {
        RoleLexicon {
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: &str, role: Role) {
        self.entries.insert(fold(token), role);
    }

    pub fn lookup(&self, token: &str) -> Option<Role> {
        self.entries.get(&fold(token)).copied()
    }
}

fn fold(token: &str) -> String {
    token.trim().to_lowercase()
}

/// Returns true for every character that would break the one-utterance-per-line form.
pub(crate) fn is_line_break(c: char) -> bool {
    matches!(
        c,
        '\n' | '\r' | '\u{000B}' | '\u{000C}' | '\u{0085}' | '\u{2028}' | '\u{2029}'
    )
}

/// One turn of a dialogue.
///
/// The text is non-empty, has no leading or trailing whitespace and contains no
/// line breaks, so it always survives a serialize/parse round trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Utterance {
    role: Role,
    text: String,
}

impl Utterance {
    pub fn new(role: Role, text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CorpusError::InvalidUtterance("text is empty".into()));
        }
        if text.chars().any(is_line_break) {
            return Err(CorpusError::InvalidUtterance(format!(
                "text contains a line break: {text:?}"
            )));
        }
        if text.trim() != text {
            return Err(CorpusError::InvalidUtterance(format!(
                "text has surrounding whitespace: {text:?}"
            )));
        }
        Ok(Utterance { role, text })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl<'de> Deserialize<'de> for Utterance {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            role: Role,
            text: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        Utterance::new(raw.role, raw.text).map_err(serde::de::Error::custom)
    }
}

/// A dialogue: an ordered, non-empty list of utterances plus opaque metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Dialogue {
    id: String,
    language: String,
    utterances: Vec<Utterance>,
    metadata: BTreeMap<String, String>,
}

impl Dialogue {
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        utterances: Vec<Utterance>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(CorpusError::EmptyDialogue(id));
        }
        Ok(Dialogue {
            id,
            language: language.into(),
            utterances,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.utterances.iter().map(Utterance::role)
    }

    /// Builds a dialogue with this dialogue's id, roles, order and metadata
    /// but new texts in `language`.
    pub fn with_texts<S: AsRef<str>>(
        &self,
        language: impl Into<String>,
        texts: &[S],
    ) -> Result<Dialogue, CorpusError> {
        if texts.len() != self.utterances.len() {
            return Err(CorpusError::InvalidUtterance(format!(
                "expected {} texts, got {}",
                self.utterances.len(),
                texts.len()
            )));
        }
        let utterances = self
            .utterances
            .iter()
            .zip(texts)
            .map(|(u, t)| Utterance::new(u.role, t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dialogue {
            id: self.id.clone(),
            language: language.into(),
            utterances,
            metadata: self.metadata.clone(),
        })
    }
}

impl<'de> Deserialize<'de> for Dialogue {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            id: String,
            language: String,
            utterances: Vec<Utterance>,
            #[serde(default)]
            metadata: BTreeMap<String, String>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Dialogue::new(raw.id, raw.language, raw.utterances)
            .map(|d| d.with_metadata(raw.metadata))
            .map_err(serde::de::Error::custom)
    }
}

/// An ordered collection of dialogues with pairwise distinct ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    source_language: String,
    dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn new(
        source_language: impl Into<String>,
        dialogues: Vec<Dialogue>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateDialogueId(d.id.clone()));
            }
        }
        Ok(Corpus {
            source_language: source_language.into(),
            dialogues,
        })
    }

    pub fn source_language(&self) -> &str {
        &self.source_language
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.dialogues.iter().map(|d| d.id.as_str())
    }

    pub fn into_dialogues(self) -> Vec<Dialogue> {
        self.dialogues
    }
}

/// Splits a line at its first ASCII or fullwidth colon.
fn split_role(line: &str) -> Option<(&str, &str)> {
    let idx = line.find([':', '：'])?;
    let sep_len = line[idx..].chars().next().map_or(1, char::len_utf8);
    Some((&line[..idx], &line[idx + sep_len..]))
}

/// Parses `Role: utterance` lines into a dialogue using the default lexicon.
pub fn parse_dialogue_text(raw: &str, id: &str) -> Result<Dialogue, CorpusError> {
    parse_dialogue_text_with(raw, id, "und", &RoleLexicon::default())
}

/// Parses `Role: utterance` lines. Blank lines are skipped; every other line
/// becomes exactly one utterance.
pub fn parse_dialogue_text_with(
    raw: &str,
    id: &str,
    language: &str,
    lexicon: &RoleLexicon,
) -> Result<Dialogue, CorpusError> {
    let utterances = parse_lines(raw, lexicon)?;
    Dialogue::new(id, language, utterances)
}

pub(crate) fn parse_lines(raw: &str, lexicon: &RoleLexicon) -> Result<Vec<Utterance>, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let mut utterances = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (token, body) = split_role(line).ok_or(CorpusError::LineWithoutSeparator(line_no))?;
        let role = lexicon
            .lookup(token)
            .ok_or_else(|| CorpusError::UnknownRole {
                line: line_no,
                token: token.trim().to_string(),
            })?;
        let body = body.trim();
        if body.is_empty() {
            return Err(CorpusError::EmptyUtteranceBody(line_no));
        }
        utterances.push(Utterance::new(role, body)?);
    }
    Ok(utterances)
}

/// Renders a dialogue as `Role: text` lines joined by `\n` (no trailing newline).
pub fn serialize_dialogue(d: &Dialogue) -> String {
    let mut out = String::new();
    for (i, u) in d.utterances.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(u.role.as_str());
        out.push_str(": ");
        out.push_str(&u.text);
    }
    out
}

/// Reads a JSON-lines corpus container. The corpus language is taken from the
/// first record (`"und"` for an empty file).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut dialogues: Vec<Dialogue> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(dialogue.id.clone()) {
            return Err(CorpusError::DuplicateDialogueId(dialogue.id));
        }
        dialogues.push(dialogue);
    }
    let language = dialogues
        .first()
        .map_or_else(|| "und".to_string(), |d| d.language.clone());
    Ok(Corpus {
        source_language: language,
        dialogues,
    })
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn write_corpus<W: Write>(corpus: &Corpus, writer: &mut W) -> Result<(), CorpusError> {
    for d in &corpus.dialogues {
        let line = serde_json::to_string(d).map_err(std::io::Error::other)?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Container bytes for a corpus, as written by [`save_corpus`].
pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(role: Role, text: &str) -> Utterance {
        Utterance::new(role, text).unwrap()
    }

    #[test]
    fn splits_on_first_colon_only() {
        let d = parse_dialogue_text("Counselor: Hello: how are you?", "d1").unwrap();
        assert_eq!(
            d.utterances(),
            &[utt(Role::Counselor, "Hello: how are you?")]
        );
    }

    #[test]
    fn accepts_fullwidth_separator() {
        let d = parse_dialogue_text("Client：つらいです", "d1").unwrap();
        assert_eq!(d.utterances(), &[utt(Role::Client, "つらいです")]);
    }

    #[test]
    fn japanese_role_names() {
        let d = parse_dialogue_text("カウンセラー：こんにちは\n相談者: はい", "d1").unwrap();
        let roles: Vec<_> = d.roles().collect();
        assert_eq!(roles, vec![Role::Counselor, Role::Client]);
    }

    #[test]
    fn role_match_is_case_insensitive() {
        let d = parse_dialogue_text("  COUNSELOR : hi\nclient:ok", "d").unwrap();
        assert_eq!(d.utterances()[0], utt(Role::Counselor, "hi"));
        assert_eq!(d.utterances()[1], utt(Role::Client, "ok"));
    }

    #[test]
    fn line_without_separator() {
        let err = parse_dialogue_text("Hello there", "d1").unwrap_err();
        assert!(matches!(err, CorpusError::LineWithoutSeparator(1)));
    }

    #[test]
    fn unknown_role_reports_line() {
        let err = parse_dialogue_text("Counselor: hi\n\nTherapist: hello", "d1").unwrap_err();
        match err {
            CorpusError::UnknownRole { line, token } => {
                assert_eq!(line, 3);
                assert_eq!(token, "Therapist");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_body() {
        let err = parse_dialogue_text("Counselor: hi\nClient:   ", "d1").unwrap_err();
        assert!(matches!(err, CorpusError::EmptyUtteranceBody(2)));
    }

    #[test]
    fn blank_lines_are_skipped() {
        let d = parse_dialogue_text("\nCounselor: a\n   \nClient: b\n\n", "d1").unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            parse_dialogue_text(" \n ", "d"),
            Err(CorpusError::EmptyInput)
        ));
    }

    #[test]
    fn serialize_canonical_form() {
        let d = Dialogue::new("d", "en", vec![utt(Role::Counselor, "Hi")]).unwrap();
        assert_eq!(serialize_dialogue(&d), "Counselor: Hi");
    }

    #[test]
    fn fullwidth_colon_in_body_survives_round_trip() {
        let d = Dialogue::new(
            "d",
            "ja",
            vec![
                utt(Role::Client, "理由：わからない"),
                utt(Role::Counselor, "a: b"),
            ],
        )
        .unwrap();
        let back = parse_dialogue_text(&serialize_dialogue(&d), "d").unwrap();
        assert_eq!(back.utterances(), d.utterances());
    }

    #[test]
    fn utterance_rejects_line_breaks_and_padding() {
        assert!(Utterance::new(Role::Client, "a\nb").is_err());
        assert!(Utterance::new(Role::Client, "a\u{2028}b").is_err());
        assert!(Utterance::new(Role::Client, " a").is_err());
        assert!(Utterance::new(Role::Client, "").is_err());
    }

    #[test]
    fn container_round_trip_with_metadata() {
        let mut meta = BTreeMap::new();
        meta.insert("feedback_q1".to_string(), "5".to_string());
        meta.insert("topic".to_string(), "仕事".to_string());
        let corpus = Corpus::new(
            "ja",
            vec![
                Dialogue::new("a", "ja", vec![utt(Role::Counselor, "こんにちは")])
                    .unwrap()
                    .with_metadata(meta),
                Dialogue::new("b", "ja", vec![utt(Role::Client, "はい")]).unwrap(),
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn duplicate_ids_rejected_on_load() {
        let rec = r#"{"id":"x","language":"ja","utterances":[{"role":"Client","text":"a"}],"metadata":{}}"#;
        let input = format!("{rec}\n{rec}\n");
        let err = read_corpus(input.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDialogueId(id) if id == "x"));
    }

    #[test]
    fn malformed_record_reports_line() {
        let input = "{\"id\":\"x\",\"language\":\"ja\",\"utterances\":[{\"role\":\"Client\",\"text\":\"a\"}]}\n{oops\n";
        let err = read_corpus(input.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn record_with_invalid_role_or_text_is_malformed() {
        let bad_role =
            r#"{"id":"x","language":"ja","utterances":[{"role":"Therapist","text":"a"}]}"#;
        assert!(matches!(
            read_corpus(bad_role.as_bytes()),
            Err(CorpusError::MalformedRecord { line: 1, .. })
        ));
        let newline =
            r#"{"id":"x","language":"ja","utterances":[{"role":"Client","text":"a\nb"}]}"#;
        assert!(matches!(
            read_corpus(newline.as_bytes()),
            Err(CorpusError::MalformedRecord { line: 1, .. })
        ));
    }
}
