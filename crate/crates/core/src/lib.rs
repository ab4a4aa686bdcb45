//! Dialogue-level ensemble translation for role-annotated counseling corpora.
//!
//! Stage 1 ([`hypothesis`]) asks several chat backends to translate a whole
//! dialogue; stage 2 ([`refine`]) hands the source and every candidate to a
//! refiner that analyzes the candidates utterance by utterance and writes a
//! final translation. [`pipeline`] runs both stages over a corpus with
//! checkpointing. [`autoeval`] and [`humeval`] hold the evaluation tooling.

pub mod autoeval;
pub mod backends;
pub mod corpus;
pub mod humeval;
pub mod hypothesis;
pub mod outcome;
pub mod pipeline;
pub mod prompts;
pub mod refine;
pub mod text;
