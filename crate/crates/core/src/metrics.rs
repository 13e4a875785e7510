//! Strict multi-label evaluation: exact-match accuracy, per-class confusion
//! counts, hard-label AUC and macro-averaged precision, recall and F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeVocabulary, ConditionCode};
use crate::protocol::ParsedPrediction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no evaluation records")]
    NoRecords,
    #[error("no class has gold support")]
    NoSupportedClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub gold: BTreeSet<ConditionCode>,
    pub prediction: ParsedPrediction,
    /// Wall-clock seconds for the request, when one was made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
    /// Length of the input text in characters.
    #[serde(default)]
    pub input_chars: usize,
}

impl EvalRecord {
    /// Exact set equality with no out-of-vocabulary output.
    pub fn is_exact_match(&self) -> bool {
        self.prediction.oov_codes.is_empty() && self.prediction.codes == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassConfusion {
    pub code: ConditionCode,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class counts accumulated over records. Tallies from disjoint shards
/// can be merged in any order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTally {
    vocab: CodeVocabulary,
    records: u64,
    // [tp, fp, fn] per vocabulary index; tn is derived.
    counts: Vec<[u64; 3]>,
}

impl ConfusionTally {
    pub fn new(vocab: &CodeVocabulary) -> Self {
        ConfusionTally {
            vocab: vocab.clone(),
            records: 0,
            counts: vec![[0; 3]; vocab.len()],
        }
    }

    pub fn add(&mut self, gold: &BTreeSet<ConditionCode>, predicted: &BTreeSet<ConditionCode>) {
        self.records += 1;
        for code in gold.union(predicted) {
            let Some(i) = self.vocab.index_of(code) else {
                continue;
            };
            match (gold.contains(code), predicted.contains(code)) {
                (true, true) => self.counts[i][0] += 1,
                (false, true) => self.counts[i][1] += 1,
                (true, false) => self.counts[i][2] += 1,
                (false, false) => unreachable!(),
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionTally) {
        assert_eq!(self.vocab, other.vocab, "tallies over different vocabularies");
        self.records += other.records;
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for k in 0..3 {
                mine[k] += theirs[k];
            }
        }
    }

    pub fn confusions(&self) -> Vec<ClassConfusion> {
        self.vocab
            .iter()
            .zip(&self.counts)
            .map(|(code, &[tp, fp, fn_])| ClassConfusion {
                code: code.clone(),
                tp,
                fp,
                fn_,
                tn: self.records - tp - fp - fn_,
            })
            .collect()
    }
}

pub fn exact_match_accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let hits = records.iter().filter(|r| r.is_exact_match()).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Confusion counts for every vocabulary code. Out-of-vocabulary codes in
/// either set are ignored.
pub fn per_class_confusions(records: &[EvalRecord], vocab: &CodeVocabulary) -> Vec<ClassConfusion> {
    let mut tally = ConfusionTally::new(vocab);
    for r in records {
        tally.add(&r.gold, &r.prediction.codes);
    }
    tally.confusions()
}

/// Hard-label ROC AUC, `(TPR + TNR) / 2`. `None` when the class has no gold
/// positives or no gold negatives.
pub fn binary_class_auc(conf: &ClassConfusion) -> Option<f64> {
    let positives = conf.tp + conf.fn_;
    let negatives = conf.tn + conf.fp;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let tpr = conf.tp as f64 / positives as f64;
    let tnr = conf.tn as f64 / negatives as f64;
    Some((tpr + tnr) / 2.0)
}

/// Which classes enter the macro precision, recall and F1 means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroSupport {
    /// Only classes with at least one gold positive.
    #[default]
    Exclude,
    /// Every vocabulary class; unsupported ones score zero recall and F1.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    /// `None` when no class has a defined AUC.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Classes skipped in the AUC mean because their AUC is undefined.
    pub auc_undefined_classes: usize,
    /// Classes averaged for precision, recall and F1.
    pub scored_classes: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn macro_scores(confusions: &[ClassConfusion], zero_support: ZeroSupport) -> Result<MacroScores, MetricsError> {
    if !confusions.iter().any(|c| c.support() > 0) {
        return Err(MetricsError::NoSupportedClass);
    }
    let scored: Vec<&ClassConfusion> = match zero_support {
        ZeroSupport::Exclude => confusions.iter().filter(|c| c.support() > 0).collect(),
        ZeroSupport::Zero => confusions.iter().collect(),
    };
    let aucs: Vec<f64> = confusions.iter().filter_map(binary_class_auc).collect();
    Ok(MacroScores {
        auc: mean(aucs.iter().copied()),
        precision: mean(scored.iter().map(|c| c.precision())).unwrap_or(0.0),
        recall: mean(scored.iter().map(|c| c.recall())).unwrap_or(0.0),
        f1: mean(scored.iter().map(|c| c.f1())).unwrap_or(0.0),
        auc_undefined_classes: confusions.len() - aucs.len(),
        scored_classes: scored.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles. `None` for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let idx = (p * sorted.len() as f64).ceil() as usize;
            sorted[idx.clamp(1, sorted.len()) - 1]
        };
        Some(LatencyStats {
            n: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.50),
            p95: rank(0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(flatten)]
    pub confusion: ClassConfusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub zero_support: ZeroSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_cases: usize,
    pub accuracy: f64,
    /// `None` when every class lacks either gold positives or gold negatives.
    pub macro_auc: Option<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub zero_support: ZeroSupport,
    pub auc_undefined_classes: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Records carrying each flag, keyed by flag name.
    pub flag_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

pub fn evaluate(
    records: &[EvalRecord],
    vocab: &CodeVocabulary,
    options: MetricsOptions,
) -> Result<MetricsReport, MetricsError> {
    let accuracy = exact_match_accuracy(records)?;
    let confusions = per_class_confusions(records, vocab);
    let scores = macro_scores(&confusions, options.zero_support)?;

    let mut flag_counts = BTreeMap::new();
    for r in records {
        for flag in &r.prediction.flags {
            *flag_counts.entry(flag.as_str().to_string()).or_insert(0) += 1;
        }
    }
    let latencies: Vec<f64> = records.iter().filter_map(|r| r.latency).collect();

    let per_class = confusions
        .into_iter()
        .map(|c| ClassMetrics {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            auc: binary_class_auc(&c),
            confusion: c,
        })
        .collect();

    Ok(MetricsReport {
        n_cases: records.len(),
        accuracy,
        macro_auc: scores.auc,
        macro_precision: scores.precision,
        macro_recall: scores.recall,
        macro_f1: scores.f1,
        zero_support: options.zero_support,
        auc_undefined_classes: scores.auc_undefined_classes,
        per_class,
        flag_counts,
        latency: LatencyStats::from_samples(&latencies),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One-row table, columns in the order Accuracy, AUC, Precision, Recall, F1.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Accuracy | AUC   | Precision | Recall | F1    |");
        let _ = writeln!(out, "|----------|-------|-----------|--------|-------|");
        let auc = self.macro_auc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "| {:<8.3} | {:<5} | {:<9.3} | {:<6.3} | {:<5.3} |",
            self.accuracy, auc, self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(out, "cases: {}", self.n_cases);
        if !self.flag_counts.is_empty() {
            let flags: Vec<String> = self.flag_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "flags: {}", flags.join(" "));
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                out,
                "latency: mean {:.4}s p50 {:.4}s p95 {:.4}s (n={})",
                l.mean, l.p50, l.p95, l.n
            );
        }
        out
    }
}
