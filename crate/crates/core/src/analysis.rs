//! Factor analysis over evaluation records and rendering of multi-run result
//! tables (overall, model x epochs, model x tier).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CodeVocabulary;
use crate::metrics::{per_class_confusions, EvalRecord, MetricsReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("no runs to report")]
    NoRuns,
    #[error("duplicate run for model {model:?}, tier {tier:?}, epochs {epochs:?}")]
    DuplicateRun {
        model: String,
        tier: String,
        epochs: Option<u32>,
    },
}

/// Point-biserial correlation between input length (characters) and the
/// exact-match indicator. `None` with fewer than three records or when
/// either variable is constant.
pub fn length_correlation(records: &[EvalRecord]) -> Option<f64> {
    if records.len() < 3 {
        return None;
    }
    let n = records.len() as f64;
    let xs: Vec<f64> = records.iter().map(|r| r.input_chars as f64).collect();
    let ys: Vec<f64> = records
        .iter()
        .map(|r| if r.is_exact_match() { 1.0 } else { 0.0 })
        .collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    /// 1 holds the rarest codes, 10 the most frequent.
    pub decile: u8,
    pub codes: usize,
    pub min_gold_count: u64,
    pub max_gold_count: u64,
    pub mean_recall: f64,
}

/// Codes with gold support, ranked by gold occurrence count (ties by code)
/// and cut into rank deciles; each bucket reports its mean per-class recall.
/// Empty deciles are omitted.
pub fn frequency_vs_correctness(records: &[EvalRecord], vocab: &CodeVocabulary) -> Vec<FrequencyBucket> {
    let mut ranked: Vec<(u64, f64)> = per_class_confusions(records, vocab)
        .iter()
        .filter(|c| c.support() > 0)
        .map(|c| (c.support(), c.recall()))
        .collect();
    // per_class_confusions is in code order, so a stable sort breaks ties by code.
    ranked.sort_by_key(|&(support, _)| support);

    let n = ranked.len();
    let mut buckets: BTreeMap<u8, Vec<(u64, f64)>> = BTreeMap::new();
    for (i, entry) in ranked.into_iter().enumerate() {
        let decile = (i * 10 / n) as u8 + 1;
        buckets.entry(decile).or_default().push(entry);
    }
    buckets
        .into_iter()
        .map(|(decile, entries)| FrequencyBucket {
            decile,
            codes: entries.len(),
            min_gold_count: entries.iter().map(|e| e.0).min().unwrap_or(0),
            max_gold_count: entries.iter().map(|e| e.0).max().unwrap_or(0),
            mean_recall: entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAnalysis {
    pub length_correlation: Option<f64>,
    pub frequency_buckets: Vec<FrequencyBucket>,
}

pub fn factor_analysis(records: &[EvalRecord], vocab: &CodeVocabulary) -> FactorAnalysis {
    FactorAnalysis {
        length_correlation: length_correlation(records),
        frequency_buckets: frequency_vs_correctness(records, vocab),
    }
}

/// One evaluated configuration: a model at a tier and (optionally) an epoch
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model_label: String,
    pub tier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    pub report: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<FactorAnalysis>,
}

fn tier_rank(tier: &str) -> (u8, &str) {
    match tier {
        "tiny" => (0, tier),
        "small" => (1, tier),
        "large" => (2, tier),
        _ => (3, tier),
    }
}

fn sorted_runs(runs: &[RunRecord]) -> Result<Vec<&RunRecord>, AnalysisError> {
    if runs.is_empty() {
        return Err(AnalysisError::NoRuns);
    }
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.model_label, tier_rank(&a.tier), a.epochs, &a.run_id)
            .cmp(&(&b.model_label, tier_rank(&b.tier), b.epochs, &b.run_id))
    });
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.model_label == b.model_label && a.tier == b.tier && a.epochs == b.epochs {
            return Err(AnalysisError::DuplicateRun {
                model: a.model_label.clone(),
                tier: a.tier.clone(),
                epochs: a.epochs,
            });
        }
    }
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverallRow {
    pub model_label: String,
    pub runs: usize,
    pub accuracy: f64,
    /// Mean over the runs whose AUC is defined.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted mean of each metric over a model's runs, models in label order.
pub fn overall_rows(runs: &[RunRecord]) -> Result<Vec<OverallRow>, AnalysisError> {
    let sorted = sorted_runs(runs)?;
    let mut by_model: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for run in sorted {
        by_model.entry(&run.model_label).or_default().push(&run.report);
    }
    Ok(by_model
        .into_iter()
        .map(|(model, reports)| {
            let n = reports.len() as f64;
            let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
            OverallRow {
                model_label: model.to_string(),
                runs: reports.len(),
                accuracy: avg(|r| r.accuracy),
                auc: {
                    let defined: Vec<f64> = reports.iter().filter_map(|r| r.macro_auc).collect();
                    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
                },
                precision: avg(|r| r.macro_precision),
                recall: avg(|r| r.macro_recall),
                f1: avg(|r| r.macro_f1),
            }
        })
        .collect())
}

/// Mean F1 per (model, column), where the column is chosen by `key`.
/// Runs for which `key` is `None` are left out.
fn f1_grid<K: Ord + Clone>(
    runs: &[&RunRecord],
    key: impl Fn(&RunRecord) -> Option<K>,
) -> (Vec<K>, BTreeMap<String, BTreeMap<K, f64>>) {
    let mut sums: BTreeMap<String, BTreeMap<K, (f64, usize)>> = BTreeMap::new();
    let mut columns = BTreeSet::new();
    for run in runs {
        let Some(k) = key(run) else { continue };
        columns.insert(k.clone());
        let cell = sums.entry(run.model_label.clone()).or_default().entry(k).or_insert((0.0, 0));
        cell.0 += run.report.macro_f1;
        cell.1 += 1;
    }
    let grid = sums
        .into_iter()
        .map(|(model, cells)| (model, cells.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
        .collect();
    (columns.into_iter().collect(), grid)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    /// Markdown-style plain-text document.
    pub document: String,
    /// Long-format table: `table,row,column,value`.
    pub csv: String,
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the overall table, the epoch and tier F1 grids, and a factor
/// section for runs that carry a [`FactorAnalysis`]. Output depends only on
/// the set of runs, not their order.
pub fn render_tables(runs: &[RunRecord]) -> Result<RenderedReport, AnalysisError> {
    let sorted = sorted_runs(runs)?;
    let overall = overall_rows(runs)?;
    let mut doc = String::new();
    let mut csv = String::from("table,row,column,value\n");
    let mut csv_row = |table: &str, row: &str, column: &str, value: String| {
        let _ = writeln!(csv, "{table},{},{},{value}", csv_field(row), csv_field(column));
    };

    let _ = writeln!(doc, "# Evaluation report\n");
    let _ = writeln!(doc, "## Overall performance (mean over runs)\n");
    let header: Vec<String> = ["Model", "Accuracy", "AUC", "Precision", "Recall", "F1", "Runs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = overall
        .iter()
        .map(|r| {
            vec![
                r.model_label.clone(),
                fmt3(r.accuracy),
                r.auc.map(fmt3).unwrap_or_else(|| "n/a".into()),
                fmt3(r.precision),
                fmt3(r.recall),
                fmt3(r.f1),
                r.runs.to_string(),
            ]
        })
        .collect();
    markdown_table(&mut doc, &header, &rows);
    for r in &overall {
        for (column, value) in [
            ("accuracy", Some(r.accuracy)),
            ("auc", r.auc),
            ("precision", Some(r.precision)),
            ("recall", Some(r.recall)),
            ("f1", Some(r.f1)),
        ] {
            csv_row("overall", &r.model_label, column, value.map(|v| format!("{v:.6}")).unwrap_or_default());
        }
    }

    let (epochs, grid) = f1_grid(&sorted, |r| r.epochs);
    let _ = writeln!(doc, "\n## F1 by epochs\n");
    if epochs.is_empty() {
        let _ = writeln!(doc, "No runs record an epoch count.");
    } else {
        let mut header = vec!["Model".to_string()];
        header.extend(epochs.iter().map(u32::to_string));
        let rows: Vec<Vec<String>> = grid
            .iter()
            .map(|(model, cells)| {
                let mut row = vec![model.clone()];
                row.extend(epochs.iter().map(|e| cells.get(e).map(|v| fmt3(*v)).unwrap_or_default()));
                row
            })
            .collect();
        markdown_table(&mut doc, &header, &rows);
        for (model, cells) in &grid {
            for (e, v) in cells {
                csv_row("epochs", model, &e.to_string(), format!("{v:.6}"));
            }
        }
    }

    let (tiers, grid) = f1_grid(&sorted, |r| Some((tier_rank(&r.tier).0, r.tier.clone())));
    let _ = writeln!(doc, "\n## F1 by dataset tier\n");
    let mut header = vec!["Model".to_string()];
    header.extend(tiers.iter().map(|(_, t)| t.clone()));
    let rows: Vec<Vec<String>> = grid
        .iter()
        .map(|(model, cells)| {
            let mut row = vec![model.clone()];
            row.extend(tiers.iter().map(|t| cells.get(t).map(|v| fmt3(*v)).unwrap_or_default()));
            row
        })
        .collect();
    markdown_table(&mut doc, &header, &rows);
    for (model, cells) in &grid {
        for ((_, tier), v) in cells {
            csv_row("tiers", model, tier, format!("{v:.6}"));
        }
    }

    let with_factors: Vec<(&RunRecord, &FactorAnalysis)> =
        sorted.iter().filter_map(|r| r.factors.as_ref().map(|f| (*r, f))).collect();
    if !with_factors.is_empty() {
        let _ = writeln!(doc, "\n## Result factors\n");
        for (run, factors) in with_factors {
            let epochs = run.epochs.map(|e| format!(", epochs {e}")).unwrap_or_default();
            let _ = writeln!(doc, "### {} ({}, {}{})\n", run.run_id, run.model_label, run.tier, epochs);
            let r = match factors.length_correlation {
                Some(r) => fmt3(r),
                None => "undefined".to_string(),
            };
            let _ = writeln!(doc, "Input length vs. exact match (point-biserial r): {r}\n");
            csv_row(
                "length_correlation",
                &run.run_id,
                "r",
                factors.length_correlation.map(|r| format!("{r:.6}")).unwrap_or_default(),
            );
            let header: Vec<String> = ["Decile", "Codes", "Gold count", "Mean recall"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rows: Vec<Vec<String>> = factors
                .frequency_buckets
                .iter()
                .map(|b| {
                    vec![
                        b.decile.to_string(),
                        b.codes.to_string(),
                        format!("{}-{}", b.min_gold_count, b.max_gold_count),
                        fmt3(b.mean_recall),
                    ]
                })
                .collect();
            markdown_table(&mut doc, &header, &rows);
            doc.push('\n');
            for b in &factors.frequency_buckets {
                csv_row(
                    "frequency_recall",
                    &run.run_id,
                    &b.decile.to_string(),
                    format!("{:.6}", b.mean_recall),
                );
            }
        }
    }

    Ok(RenderedReport { document: doc, csv })
}
