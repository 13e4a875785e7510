//! Dataset emission in the two training formats: conversation-style
//! instruction JSONL for generative models and hot-encoded CSV for
//! classifier models, plus the label map and run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CodeVocabulary, ConditionCode, Provenance};
use crate::curation::{CuratedCase, CuratedDataset, CurationConfig, CurationError, TierCounts};
use crate::protocol::{parse_generation, serialize_codes};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub conversations: Vec<Turn>,
}

impl InstructionRecord {
    pub fn from_case(index: usize, case: &CuratedCase) -> Self {
        InstructionRecord {
            id: format!("identity_{index}"),
            conversations: vec![
                Turn {
                    from: "human".into(),
                    value: case.input_text.clone(),
                },
                Turn {
                    from: "gpt".into(),
                    value: serialize_codes(&case.codes),
                },
            ],
        }
    }

    fn turn(&self, from: &str) -> Option<&str> {
        self.conversations
            .iter()
            .find(|t| t.from == from)
            .map(|t| t.value.as_str())
    }

    pub fn human_text(&self) -> Option<&str> {
        self.turn("human")
    }

    pub fn gpt_text(&self) -> Option<&str> {
        self.turn("gpt")
    }

    /// Rebuilds the case from the record; the gpt turn must be a clean code
    /// list over `vocab`.
    pub fn to_case(&self, vocab: &CodeVocabulary) -> Result<CuratedCase, String> {
        let text = self.human_text().ok_or_else(|| format!("{}: no human turn", self.id))?;
        let target = self.gpt_text().ok_or_else(|| format!("{}: no gpt turn", self.id))?;
        let parsed = parse_generation(target, vocab);
        if !parsed.is_clean() {
            let flags: Vec<&str> = parsed.flags.iter().map(|f| f.as_str()).collect();
            return Err(format!("{}: gpt turn is not a clean code list ({})", self.id, flags.join(",")));
        }
        Ok(CuratedCase {
            case_id: self.id.clone(),
            input_text: text.to_string(),
            codes: parsed.codes,
        })
    }
}

/// Lines written per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitCounts {
    pub train: usize,
    pub test: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CurationError> {
    fs::write(path, bytes).map_err(|source| CurationError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One compact JSON object per line, LF terminated. Ids restart at
/// `identity_0` in each file.
pub fn instruction_jsonl(cases: &[CuratedCase]) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        serde_json::to_writer(&mut out, &InstructionRecord::from_case(i, case)).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn instruction_paths(out_dir: &Path, tier: &str) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{tier}.train.jsonl")),
        out_dir.join(format!("{tier}.test.jsonl")),
    )
}

pub fn hotencoded_paths(out_dir: &Path, tier: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join(format!("{tier}.train.csv")),
        out_dir.join(format!("{tier}.test.csv")),
        out_dir.join(format!("{tier}.labels.json")),
    )
}

/// Writes `<tier>.train.jsonl` and `<tier>.test.jsonl` into `out_dir`.
pub fn emit_instruction_dataset(dataset: &CuratedDataset, out_dir: &Path) -> Result<EmitCounts, CurationError> {
    let (train_path, test_path) = instruction_paths(out_dir, &dataset.tier);
    write_file(&train_path, &instruction_jsonl(&dataset.train))?;
    write_file(&test_path, &instruction_jsonl(&dataset.test))?;
    Ok(EmitCounts {
        train: dataset.train.len(),
        test: dataset.test.len(),
    })
}

pub fn read_instruction_file(path: &Path) -> Result<Vec<InstructionRecord>, CurationError> {
    let read_err = |message: String| CurationError::Read {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| read_err(format!("line {}: {e}", i + 1))))
        .collect()
}

/// `input_text` followed by one 0/1 column per vocabulary code, named
/// `code_<index>`. Fields are quoted only when needed (RFC 4180 style).
pub fn hotencoded_csv(cases: &[CuratedCase], vocab: &CodeVocabulary) -> Result<Vec<u8>, CurationError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    let mut header = vec!["input_text".to_string()];
    header.extend((0..vocab.len()).map(|i| format!("code_{i}")));
    writer.write_record(&header)?;

    let mut row: Vec<&str> = Vec::with_capacity(vocab.len() + 1);
    for case in cases {
        let mut indicators = vec!["0"; vocab.len()];
        for code in &case.codes {
            if let Some(i) = vocab.index_of(code) {
                indicators[i] = "1";
            }
        }
        row.clear();
        row.push(&case.input_text);
        row.extend(indicators);
        writer.write_record(&row)?;
    }
    Ok(writer.into_inner().expect("in-memory writer flushes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: usize,
    pub column: String,
    pub code: ConditionCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub tier: String,
    pub labels: Vec<LabelEntry>,
}

impl LabelMap {
    pub fn new(tier: &str, vocab: &CodeVocabulary) -> Self {
        LabelMap {
            tier: tier.to_string(),
            labels: vocab
                .iter()
                .enumerate()
                .map(|(index, code)| LabelEntry {
                    index,
                    column: format!("code_{index}"),
                    code: code.clone(),
                })
                .collect(),
        }
    }

    pub fn vocabulary(&self) -> CodeVocabulary {
        CodeVocabulary::from_codes(self.labels.iter().map(|l| l.code.clone()))
    }

    pub fn read(path: &Path) -> Result<Self, CurationError> {
        let read_err = |message: String| CurationError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let map: LabelMap = serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        if map.labels.iter().enumerate().any(|(i, l)| l.index != i) {
            return Err(read_err("label indices are not 0..n in order".into()));
        }
        Ok(map)
    }
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Writes `<tier>.train.csv`, `<tier>.test.csv` and `<tier>.labels.json`.
/// Fails before touching the filesystem when the vocabulary is empty.
pub fn emit_hotencoded_dataset(dataset: &CuratedDataset, out_dir: &Path) -> Result<EmitCounts, CurationError> {
    if dataset.vocabulary.is_empty() {
        return Err(CurationError::EmptyVocabulary(dataset.tier.clone()));
    }
    let train = hotencoded_csv(&dataset.train, &dataset.vocabulary)?;
    let test = hotencoded_csv(&dataset.test, &dataset.vocabulary)?;
    let (train_path, test_path, labels_path) = hotencoded_paths(out_dir, &dataset.tier);
    write_file(&train_path, &train)?;
    write_file(&test_path, &test)?;
    write_file(&labels_path, &pretty_json(&LabelMap::new(&dataset.tier, &dataset.vocabulary)))?;
    Ok(EmitCounts {
        train: dataset.train.len(),
        test: dataset.test.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierManifest {
    pub seed: u64,
    pub counts: TierCounts,
    pub vocabulary_size: usize,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub config: CurationConfig,
    pub tiers: BTreeMap<String, TierManifest>,
}

/// Emits both formats for every tier and writes `manifest.json`.
pub fn emit_all(
    datasets: &BTreeMap<String, CuratedDataset>,
    provenance: &Provenance,
    config: &CurationConfig,
    out_dir: &Path,
) -> Result<Manifest, CurationError> {
    fs::create_dir_all(out_dir).map_err(|source| CurationError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut tiers = BTreeMap::new();
    for (name, dataset) in datasets {
        emit_instruction_dataset(dataset, out_dir)?;
        emit_hotencoded_dataset(dataset, out_dir)?;
        let (train_jsonl, test_jsonl) = instruction_paths(Path::new(""), name);
        let (train_csv, test_csv, labels) = hotencoded_paths(Path::new(""), name);
        let files = [train_jsonl, test_jsonl, train_csv, test_csv, labels]
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        tiers.insert(
            name.clone(),
            TierManifest {
                seed: dataset.seed,
                counts: dataset.counts,
                vocabulary_size: dataset.vocabulary.len(),
                files,
                warnings: dataset.warnings.clone(),
            },
        );
    }
    let manifest = Manifest {
        provenance: provenance.clone(),
        config: config.clone(),
        tiers,
    };
    write_file(&out_dir.join("manifest.json"), &pretty_json(&manifest))?;
    Ok(manifest)
}
