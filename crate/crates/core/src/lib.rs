//! Building blocks for extracting multi-label condition codes from
//! semi-structured pathology-style reports with generative models.
//!
//! The pipeline runs in stages:
//!
//! 1. [`corpus`] ingests case records and normalizes their codes.
//! 2. [`curation`] filters, tiers and splits the corpus; [`emit`] writes the
//!    instruction (JSONL) and hot-encoded (CSV) training formats.
//! 3. [`protocol`] defines the canonical code-list output and parses model
//!    generations back into code sets, flagging format deviations.
//! 4. [`metrics`] scores predictions with strict exact-match accuracy and
//!    macro-averaged AUC, precision, recall and F1.
//! 5. [`analysis`] renders multi-run result tables and factor analyses.

pub mod analysis;
pub mod corpus;
pub mod curation;
pub mod emit;
pub mod metrics;
pub mod protocol;
pub mod synth;

use sha2::{Digest, Sha256};

pub use corpus::{CodeVocabulary, ConditionCode, Corpus, PathologyCase};
pub use curation::{CuratedCase, CuratedDataset, CurationConfig};
pub use metrics::{EvalRecord, MetricsReport};
pub use protocol::{ParsedPrediction, PromptTemplate};

/// Derives a child seed from `seed` and a label. Stable across platforms
/// and releases (first 8 bytes of SHA-256, little endian).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
