//! Case ingestion: delimited or line-delimited JSON records into validated
//! [`PathologyCase`]s with normalized condition codes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Letter, two digits, optional dotted subcode (`C12`, `C77.1`, `D03.52`).
pub const DEFAULT_CODE_PATTERN: &str = r"^[A-Z][0-9]{2}(\.[0-9A-Z]{1,4})?$";

static DEFAULT_PATTERN: LazyLock<CodePattern> =
    LazyLock::new(|| CodePattern::new(DEFAULT_CODE_PATTERN).expect("default pattern compiles"));

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("header row has no column named {0:?}")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Record { row: usize, message: String },
    #[error("duplicate case id {0:?}")]
    DuplicateCase(String),
    #[error("invalid code pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("invalid code range {0:?}")]
    Range(String),
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{raw:?} is not a valid condition code")]
pub struct CodeError {
    pub raw: String,
}

/// Compiled code pattern, matched against normalized code strings.
#[derive(Debug, Clone)]
pub struct CodePattern(Regex);

impl CodePattern {
    pub fn new(pattern: &str) -> Result<Self, CorpusError> {
        Regex::new(pattern)
            .map(CodePattern)
            .map_err(|source| CorpusError::Pattern {
                pattern: pattern.to_string(),
                source,
            })
    }

    pub fn is_match(&self, normalized: &str) -> bool {
        self.0.is_match(normalized)
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }
}

impl Default for CodePattern {
    fn default() -> Self {
        DEFAULT_PATTERN.clone()
    }
}

/// Uppercases and removes all whitespace. Dots are kept.
pub fn normalize_code(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

/// A normalized condition code. Ordering is lexicographic on the string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConditionCode(String);

impl ConditionCode {
    /// Normalizes `raw` and validates it against the default pattern.
    pub fn parse(raw: &str) -> Result<Self, CodeError> {
        Self::parse_with(raw, &DEFAULT_PATTERN)
    }

    pub fn parse_with(raw: &str, pattern: &CodePattern) -> Result<Self, CodeError> {
        let normalized = normalize_code(raw);
        if normalized.is_empty() || !pattern.is_match(&normalized) {
            return Err(CodeError {
                raw: raw.to_string(),
            });
        }
        Ok(ConditionCode(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The part before any dotted subcode (`C77.1` -> `C77`).
    pub fn category(&self) -> &str {
        self.0.split('.').next().unwrap_or(&self.0)
    }
}

impl fmt::Display for ConditionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ConditionCode {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditionCode::parse(s)
    }
}

impl TryFrom<String> for ConditionCode {
    type Error = CodeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ConditionCode::parse(&value)
    }
}

impl From<ConditionCode> for String {
    fn from(code: ConditionCode) -> Self {
        code.0
    }
}

/// Parses a list of code strings, panicking on invalid input. Intended for
/// fixtures and tests.
pub fn codes<'a>(raw: impl IntoIterator<Item = &'a str>) -> BTreeSet<ConditionCode> {
    raw.into_iter()
        .map(|c| ConditionCode::parse(c).unwrap_or_else(|e| panic!("{e}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyCase {
    pub case_id: String,
    pub gross_texts: Vec<String>,
    pub final_texts: Vec<String>,
    pub codes: BTreeSet<ConditionCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Hex SHA-256 over the raw source bytes followed by the canonical schema JSON.
    pub hash: String,
}

/// An immutable, ordered collection of cases with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    cases: Vec<PathologyCase>,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(cases: Vec<PathologyCase>, provenance: Provenance) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for case in &cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(CorpusError::DuplicateCase(case.case_id.clone()));
            }
        }
        Ok(Corpus { cases, provenance })
    }

    pub fn cases(&self) -> &[PathologyCase] {
        &self.cases
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    // Filters never create duplicate ids, so no re-validation is needed.
    pub(crate) fn with_cases(&self, cases: Vec<PathologyCase>) -> Corpus {
        Corpus {
            cases,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the normalized corpus as one JSON object per line. The file can
    /// be re-read with [`CorpusSchema::normalized_cache`].
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let write_err = |source| CorpusError::Write {
            path: path.to_path_buf(),
            source,
        };
        let mut out = Vec::new();
        for case in &self.cases {
            serde_json::to_writer(&mut out, case).expect("case serializes");
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(write_err)?;
        file.write_all(&out).map_err(write_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Csv,
    Jsonl,
}

/// Field mapping for ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSchema {
    pub format: InputFormat,
    /// Field delimiter for delimited input.
    pub delimiter: char,
    pub id_field: String,
    pub gross_field: String,
    pub final_field: String,
    pub codes_field: String,
    /// Separator between codes inside the codes field.
    pub code_delimiter: char,
    pub code_pattern: String,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        CorpusSchema {
            format: InputFormat::Csv,
            delimiter: ',',
            id_field: "case_id".into(),
            gross_field: "gross".into(),
            final_field: "final".into(),
            codes_field: "codes".into(),
            code_delimiter: ';',
            code_pattern: DEFAULT_CODE_PATTERN.into(),
        }
    }
}

impl CorpusSchema {
    /// Schema matching the output of [`Corpus::write_jsonl`].
    pub fn normalized_cache() -> Self {
        CorpusSchema {
            format: InputFormat::Jsonl,
            id_field: "case_id".into(),
            gross_field: "gross_texts".into(),
            final_field: "final_texts".into(),
            codes_field: "codes".into(),
            ..CorpusSchema::default()
        }
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }
}

/// A row that could not be ingested. `row` is the 1-based line number in the
/// source (the header of delimited input is line 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub rejects: Vec<RecordError>,
}

struct RawRow {
    line: usize,
    id: String,
    gross: Vec<String>,
    finals: Vec<String>,
    codes: Vec<String>,
}

/// Reads and ingests `path`. See [`load_corpus_bytes`].
pub fn load_corpus(path: &Path, schema: &CorpusSchema, strict: bool) -> Result<Ingested, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_corpus_bytes(&bytes, &path.display().to_string(), schema, strict)
}

/// Ingests raw source bytes. Rows sharing a case id are merged: texts are
/// appended in source order and code sets are unioned. Bad rows are collected
/// in [`Ingested::rejects`], or abort ingestion when `strict` is set.
pub fn load_corpus_bytes(
    bytes: &[u8],
    source: &str,
    schema: &CorpusSchema,
    strict: bool,
) -> Result<Ingested, CorpusError> {
    let pattern = CodePattern::new(&schema.code_pattern)?;

    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.update(schema.canonical_json().as_bytes());
    let provenance = Provenance {
        source: source.to_string(),
        hash: hex::encode(hasher.finalize()),
    };

    let rows = match schema.format {
        InputFormat::Csv => read_delimited(bytes, schema)?,
        InputFormat::Jsonl => read_json_lines(bytes, schema),
    };

    let mut rejects = Vec::new();
    let mut cases: Vec<PathologyCase> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();

    for row in rows {
        let row = match row.and_then(|r| validate_row(r, &pattern)) {
            Ok(row) => row,
            Err(err) => {
                if strict {
                    return Err(CorpusError::Record {
                        row: err.row,
                        message: err.message,
                    });
                }
                rejects.push(err);
                continue;
            }
        };
        let (id, gross, finals, codes) = row;
        let idx = *position.entry(id.clone()).or_insert_with(|| {
            cases.push(PathologyCase {
                case_id: id,
                gross_texts: Vec::new(),
                final_texts: Vec::new(),
                codes: BTreeSet::new(),
            });
            cases.len() - 1
        });
        let case = &mut cases[idx];
        case.gross_texts.extend(gross);
        case.final_texts.extend(finals);
        case.codes.extend(codes);
    }

    Ok(Ingested {
        corpus: Corpus { cases, provenance },
        rejects,
    })
}

type ValidRow = (String, Vec<String>, Vec<String>, BTreeSet<ConditionCode>);

fn validate_row(row: RawRow, pattern: &CodePattern) -> Result<ValidRow, RecordError> {
    let id = row.id.trim().to_string();
    if id.is_empty() {
        return Err(RecordError {
            row: row.line,
            message: "empty case id".into(),
        });
    }
    let mut codes = BTreeSet::new();
    for raw in row.codes {
        let code = ConditionCode::parse_with(&raw, pattern).map_err(|e| RecordError {
            row: row.line,
            message: e.to_string(),
        })?;
        codes.insert(code);
    }
    let keep = |texts: Vec<String>| -> Vec<String> {
        texts.into_iter().filter(|t| !t.trim().is_empty()).collect()
    };
    Ok((id, keep(row.gross), keep(row.finals), codes))
}

fn split_codes(field: &str, delimiter: char) -> Vec<String> {
    field
        .split(delimiter)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn read_delimited(
    bytes: &[u8],
    schema: &CorpusSchema,
) -> Result<Vec<Result<RawRow, RecordError>>, CorpusError> {
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| CorpusError::Range(format!("delimiter {:?} is not ASCII", schema.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
    };
    let id_col = column(&schema.id_field)?;
    let gross_col = column(&schema.gross_field)?;
    let final_col = column(&schema.final_field)?;
    let codes_col = column(&schema.codes_field)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |col: usize, name: &str| {
            record.get(col).map(str::to_string).ok_or_else(|| RecordError {
                row: line,
                message: format!("missing field {name:?}"),
            })
        };
        let row = (|| {
            Ok(RawRow {
                line,
                id: field(id_col, &schema.id_field)?,
                gross: vec![field(gross_col, &schema.gross_field)?],
                finals: vec![field(final_col, &schema.final_field)?],
                codes: split_codes(&field(codes_col, &schema.codes_field)?, schema.code_delimiter),
            })
        })();
        rows.push(row);
    }
    Ok(rows)
}

fn read_json_lines(bytes: &[u8], schema: &CorpusSchema) -> Vec<Result<RawRow, RecordError>> {
    let text = String::from_utf8_lossy(bytes);
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_json_row(i + 1, l, schema))
        .collect()
}

fn parse_json_row(line: usize, text: &str, schema: &CorpusSchema) -> Result<RawRow, RecordError> {
    let err = |message: String| RecordError { row: line, message };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| err(format!("invalid JSON: {e}")))?;
    let object = value
        .as_object()
        .ok_or_else(|| err("record is not a JSON object".into()))?;

    // Text fields may be a string or an array of strings.
    let strings = |name: &str| -> Result<Vec<String>, RecordError> {
        match object.get(name) {
            None => Err(err(format!("missing field {name:?}"))),
            Some(serde_json::Value::Null) => Ok(Vec::new()),
            Some(serde_json::Value::String(s)) => Ok(vec![s.clone()]),
            Some(serde_json::Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| err(format!("field {name:?} has a non-string element")))
                })
                .collect(),
            Some(_) => Err(err(format!("field {name:?} is not a string or list"))),
        }
    };

    let id = match object.get(&schema.id_field) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err(err(format!("field {:?} is not a string", schema.id_field))),
        None => return Err(err(format!("missing field {:?}", schema.id_field))),
    };
    let codes = match object.get(&schema.codes_field) {
        Some(serde_json::Value::String(s)) => split_codes(s, schema.code_delimiter),
        _ => strings(&schema.codes_field)?,
    };
    Ok(RawRow {
        line,
        id,
        gross: strings(&schema.gross_field)?,
        finals: strings(&schema.final_field)?,
        codes,
    })
}

/// The closed label space: sorted, deduplicated codes with 0-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeVocabulary {
    codes: Vec<ConditionCode>,
    index: HashMap<ConditionCode, usize>,
}

impl CodeVocabulary {
    pub fn from_codes(codes: impl IntoIterator<Item = ConditionCode>) -> Self {
        let sorted: BTreeSet<ConditionCode> = codes.into_iter().collect();
        let codes: Vec<ConditionCode> = sorted.into_iter().collect();
        let index = codes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        CodeVocabulary { codes, index }
    }

    pub fn codes(&self) -> &[ConditionCode] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &ConditionCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn contains(&self, code: &ConditionCode) -> bool {
        self.index.contains_key(code)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ConditionCode> {
        self.codes.iter()
    }
}

impl Serialize for CodeVocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.codes.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CodeVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Vec::<ConditionCode>::deserialize(deserializer).map(CodeVocabulary::from_codes)
    }
}

pub fn code_vocabulary(corpus: &Corpus) -> CodeVocabulary {
    CodeVocabulary::from_codes(corpus.cases().iter().flat_map(|c| c.codes.iter().cloned()))
}

/// Inclusive ranges over code categories, e.g. `C00-D49` or `C00-D49,Z85`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeRange {
    ranges: Vec<(String, String)>,
}

impl CodeRange {
    pub fn matches(&self, code: &ConditionCode) -> bool {
        let category = code.category();
        self.ranges
            .iter()
            .any(|(lo, hi)| lo.as_str() <= category && category <= hi.as_str())
    }
}

/// The neoplasm chapter, C00 through D49.
impl Default for CodeRange {
    fn default() -> Self {
        CodeRange {
            ranges: vec![("C00".into(), "D49".into())],
        }
    }
}

impl FromStr for CodeRange {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut ranges = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = match part.split_once('-') {
                Some((lo, hi)) => (normalize_code(lo), normalize_code(hi)),
                None => (normalize_code(part), normalize_code(part)),
            };
            if lo.is_empty() || hi.is_empty() || lo > hi {
                return Err(CorpusError::Range(s.to_string()));
            }
            ranges.push((lo, hi));
        }
        if ranges.is_empty() {
            return Err(CorpusError::Range(s.to_string()));
        }
        Ok(CodeRange { ranges })
    }
}

impl fmt::Display for CodeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .ranges
            .iter()
            .map(|(lo, hi)| if lo == hi { lo.clone() } else { format!("{lo}-{hi}") })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for CodeRange {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CodeRange {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Intersects every case's code set with `range`. Cases left without codes are
/// kept; removing them is the job of curation.
pub fn filter_code_range(corpus: &Corpus, range: &CodeRange) -> Corpus {
    let cases = corpus
        .cases()
        .iter()
        .map(|case| PathologyCase {
            codes: case.codes.iter().filter(|c| range.matches(c)).cloned().collect(),
            ..case.clone()
        })
        .collect();
    corpus.with_cases(cases)
}
