#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use fusion_core::backends::{
    BackendConfig, BackendKind, ChatBackend, MockRefiner, MockTranslator, RefinerMode,
};
use fusion_core::corpus::{Corpus, Dialogue, Role, Utterance};
use fusion_core::pipeline::RunConfig;
use fusion_core::prompts::PromptVersion;
use fusion_core::refine::FusionMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HYP_IDS: [&str; 3] = ["gpt", "gemini", "grok"];
const WORDS: [&str; 12] = [
    "最近",
    "眠れない",
    "仕事",
    "家族",
    "そうですね",
    "不安",
    "話して",
    "大丈夫",
    "気持ち",
    "毎日",
    "少し",
    "ありがとう",
];

/// `n` dialogues whose lengths average exactly `mean_len` when `n` is even
/// (lengths come in pairs `mean ± o`, `o` up to 30).
pub fn synthetic_corpus(n: usize, mean_len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = (mean_len - 1).min(30);
    let mut lengths = Vec::with_capacity(n);
    while lengths.len() < n {
        let o = rng.random_range(0..=spread);
        lengths.push(mean_len + o);
        lengths.push(mean_len - o);
    }
    lengths.truncate(n);
    let dialogues = lengths
        .into_iter()
        .enumerate()
        .map(|(i, len)| {
            let mut role = Role::Counselor;
            let utterances = (0..len)
                .map(|j| {
                    let words: Vec<&str> = (0..rng.random_range(1..6))
                        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                        .collect();
                    let text = format!("{} d{i}u{j}", words.join(" "));
                    let u = Utterance::new(role, text).unwrap();
                    if rng.random_bool(0.8) {
                        role = match role {
                            Role::Counselor => Role::Client,
                            Role::Client => Role::Counselor,
                        };
                    }
                    u
                })
                .collect();
            Dialogue::new(format!("dlg-{i:03}"), "ja", utterances).unwrap()
        })
        .collect();
    Corpus::new("ja", dialogues).unwrap()
}

pub fn mock_config(checkpoint_dir: &Path, refiner: BackendKind) -> RunConfig {
    RunConfig {
        target_language: "English".into(),
        hypothesis_backends: HYP_IDS
            .iter()
            .map(|id| BackendConfig::mock(*id, BackendKind::MockTranslator))
            .collect(),
        refiner: BackendConfig::mock("refiner", refiner),
        concurrency_limit: 4,
        hypothesis_retry_budget: 2,
        refine_retry_budget: 2,
        checkpoint_dir: checkpoint_dir.to_path_buf(),
        seed: 11,
        prompt_version: PromptVersion::Original,
        fusion: FusionMode::Refine,
        analysis: true,
    }
}

pub fn translators() -> Vec<Arc<MockTranslator>> {
    HYP_IDS
        .iter()
        .map(|id| Arc::new(MockTranslator::new(*id)))
        .collect()
}

pub fn as_backends<T: ChatBackend + 'static>(v: &[Arc<T>]) -> Vec<Arc<dyn ChatBackend>> {
    v.iter()
        .map(|b| b.clone() as Arc<dyn ChatBackend>)
        .collect()
}

pub fn fuse_refiner() -> Arc<MockRefiner> {
    Arc::new(MockRefiner::new("refiner", RefinerMode::Fuse))
}

/// All output files of a run, as (relative path, bytes), excluding timings.
pub fn output_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        let rel = entry
            .strip_prefix(dir)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        if rel == "timings.json" {
            continue;
        }
        files.push((rel, std::fs::read(&entry).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}
