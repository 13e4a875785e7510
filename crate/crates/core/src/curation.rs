//! Curation: turns a raw corpus into tiered, combination-filtered,
//! stratified train/test datasets.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{filter_code_range, CodeRange, CodeVocabulary, ConditionCode, Corpus, PathologyCase};
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("tier {0:?} is empty after combination filtering")]
    EmptyTier(String),
    #[error("dataset for tier {0:?} has an empty vocabulary")]
    EmptyVocabulary(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to read {path}: {message}")]
    Read { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub min_combo_count: usize,
    pub test_fraction: f64,
    pub tier_fractions: BTreeMap<String, f64>,
    pub seed: u64,
    pub code_range: CodeRange,
    /// Joins report sections into one input text.
    pub separator: String,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_combo_count: 10,
            test_fraction: 0.10,
            tier_fractions: [("large", 1.0), ("small", 0.10), ("tiny", 0.01)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            seed: 0,
            code_range: CodeRange::default(),
            separator: "\n".into(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: String| Err(CurationError::InvalidConfig(m));
        if self.min_combo_count < 1 {
            return bad("min_combo_count must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} is outside (0, 1)", self.test_fraction));
        }
        if self.tier_fractions.is_empty() {
            return bad("no tiers configured".into());
        }
        for (tier, f) in &self.tier_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return bad(format!("tier {tier:?} fraction {f} is outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Keeps only the named tiers.
    pub fn restrict_tiers(&mut self, names: &[String]) -> Result<(), CurationError> {
        for name in names {
            if !self.tier_fractions.contains_key(name) {
                return Err(CurationError::InvalidConfig(format!("unknown tier {name:?}")));
            }
        }
        self.tier_fractions.retain(|k, _| names.contains(k));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedCase {
    pub case_id: String,
    pub input_text: String,
    pub codes: BTreeSet<ConditionCode>,
}

impl CuratedCase {
    /// The exact code combination, as a sorted tuple.
    pub fn combination(&self) -> Vec<ConditionCode> {
        self.codes.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierCounts {
    /// Complete cases available before sampling.
    pub pool: usize,
    pub sampled: usize,
    pub after_combo_filter: usize,
    pub combinations: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuratedDataset {
    pub tier: String,
    pub seed: u64,
    pub train: Vec<CuratedCase>,
    pub test: Vec<CuratedCase>,
    pub vocabulary: CodeVocabulary,
    pub config: CurationConfig,
    pub counts: TierCounts,
    pub warnings: Vec<String>,
}

/// Gross texts in order, then final texts in order.
pub fn concatenate_reports(case: &PathologyCase, separator: &str) -> String {
    case.gross_texts
        .iter()
        .chain(case.final_texts.iter())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(separator)
}

/// Removes cases with no codes or no final report.
pub fn drop_incomplete(corpus: &Corpus) -> Corpus {
    let cases = corpus
        .cases()
        .iter()
        .filter(|c| !c.codes.is_empty() && !c.final_texts.is_empty())
        .cloned()
        .collect();
    corpus.with_cases(cases)
}

/// Single pass: a case survives iff its exact code combination occurs at least
/// `min_count` times in `cases`.
pub fn filter_rare_combinations(cases: &[CuratedCase], min_count: usize) -> Vec<CuratedCase> {
    let mut counts: BTreeMap<&BTreeSet<ConditionCode>, usize> = BTreeMap::new();
    for case in cases {
        *counts.entry(&case.codes).or_default() += 1;
    }
    cases
        .iter()
        .filter(|c| counts[&c.codes] >= min_count)
        .cloned()
        .collect()
}

/// `fraction * n` rounded half away from zero. Products within 1e-9 of a
/// half are treated as exact halves so `0.1 * 25` and `0.5 * 5` agree.
pub fn rounded_share(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let floor = x.floor();
    if (x - floor - 0.5).abs() < 1e-9 {
        floor as usize + 1
    } else {
        x.round() as usize
    }
}

/// Uniform sample without replacement of `rounded_share(fraction, n)` cases.
/// Survivors keep their input order.
pub fn subsample_tier(cases: &[CuratedCase], fraction: f64, seed: u64) -> Vec<CuratedCase> {
    if fraction >= 1.0 {
        return cases.to_vec();
    }
    let k = rounded_share(fraction, cases.len()).min(cases.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, cases.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cases[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<CuratedCase>,
    pub test: Vec<CuratedCase>,
    pub warnings: Vec<String>,
}

/// Test-set size for one combination group.
pub fn group_test_count(group_size: usize, test_fraction: f64, min_combo_count: usize) -> usize {
    if group_size <= 1 {
        return 0;
    }
    let mut k = rounded_share(test_fraction, group_size);
    if k == 0 && group_size >= min_combo_count {
        k = 1;
    }
    k.min(group_size - 1)
}

/// Per-combination split: each group of identical code sets contributes
/// [`group_test_count`] randomly chosen cases to test. Both sides keep input
/// order.
pub fn stratified_split(cases: &[CuratedCase], test_fraction: f64, min_combo_count: usize, seed: u64) -> Split {
    let mut groups: BTreeMap<&BTreeSet<ConditionCode>, Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        groups.entry(&case.codes).or_default().push(i);
    }

    let mut warnings = Vec::new();
    let mut in_test = vec![false; cases.len()];
    for (combo, members) in &groups {
        let label = crate::protocol::serialize_codes(combo.iter()).replace('\n', "+");
        if members.len() == 1 {
            warnings.push(format!(
                "combination {label} has a single case ({}); assigned to train",
                cases[members[0]].case_id
            ));
        }
        let k = group_test_count(members.len(), test_fraction, min_combo_count);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &label));
        for j in index::sample(&mut rng, members.len(), k) {
            in_test[members[j]] = true;
        }
    }

    let mut split = Split {
        warnings,
        ..Split::default()
    };
    for (case, test) in cases.iter().zip(in_test) {
        if test {
            split.test.push(case.clone());
        } else {
            split.train.push(case.clone());
        }
    }
    split
}

/// Full pipeline: code-range filter, incomplete-case removal, report
/// concatenation, then per tier: subsample, combination filter, split.
/// Tiers are sampled independently from the same complete-case pool.
pub fn curate(corpus: &Corpus, config: &CurationConfig) -> Result<BTreeMap<String, CuratedDataset>, CurationError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(CurationError::EmptyCorpus);
    }
    let complete = drop_incomplete(&filter_code_range(corpus, &config.code_range));
    let pool: Vec<CuratedCase> = complete
        .cases()
        .iter()
        .map(|c| CuratedCase {
            case_id: c.case_id.clone(),
            input_text: concatenate_reports(c, &config.separator),
            codes: c.codes.clone(),
        })
        .collect();

    let mut tiers = BTreeMap::new();
    for (tier, &fraction) in &config.tier_fractions {
        let seed = derive_seed(config.seed, tier);
        let sampled = subsample_tier(&pool, fraction, seed);
        let kept = filter_rare_combinations(&sampled, config.min_combo_count);
        if kept.is_empty() {
            return Err(CurationError::EmptyTier(tier.clone()));
        }
        let combinations = kept.iter().map(|c| &c.codes).collect::<BTreeSet<_>>().len();
        let split = stratified_split(
            &kept,
            config.test_fraction,
            config.min_combo_count,
            derive_seed(seed, "split"),
        );
        let vocabulary = CodeVocabulary::from_codes(kept.iter().flat_map(|c| c.codes.iter().cloned()));
        let counts = TierCounts {
            pool: pool.len(),
            sampled: sampled.len(),
            after_combo_filter: kept.len(),
            combinations,
            train: split.train.len(),
            test: split.test.len(),
        };
        tiers.insert(
            tier.clone(),
            CuratedDataset {
                tier: tier.clone(),
                seed,
                train: split.train,
                test: split.test,
                vocabulary,
                config: config.clone(),
                counts,
                warnings: split.warnings,
            },
        );
    }
    Ok(tiers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{codes, Provenance};

    fn case(id: &str, list: &[&str]) -> CuratedCase {
        CuratedCase {
            case_id: id.into(),
            input_text: format!("text {id}"),
            codes: codes(list.iter().copied()),
        }
    }

    fn many(prefix: &str, n: usize, list: &[&str]) -> Vec<CuratedCase> {
        (0..n).map(|i| case(&format!("{prefix}{i}"), list)).collect()
    }

    fn pathology(gross: &[&str], finals: &[&str], list: &[&str]) -> PathologyCase {
        PathologyCase {
            case_id: "X".into(),
            gross_texts: gross.iter().map(|s| s.to_string()).collect(),
            final_texts: finals.iter().map(|s| s.to_string()).collect(),
            codes: codes(list.iter().copied()),
        }
    }

    #[test]
    fn concatenation() {
        assert_eq!(concatenate_reports(&pathology(&["g1"], &["f1"], &[]), "\n"), "g1\nf1");
        assert_eq!(concatenate_reports(&pathology(&[], &["f1"], &[]), "\n"), "f1");
        assert_eq!(concatenate_reports(&pathology(&["g1", "g2"], &["f1"], &[]), "\n"), "g1\ng2\nf1");
    }

    #[test]
    fn incomplete_cases_are_dropped() {
        let mk = |id: &str, finals: &[&str], list: &[&str]| PathologyCase {
            case_id: id.into(),
            ..pathology(&["g"], finals, list)
        };
        let corpus = Corpus::new(
            vec![mk("A", &["f"], &[]), mk("B", &[], &["C50"]), mk("C", &["f"], &["C50"])],
            Provenance {
                source: "t".into(),
                hash: String::new(),
            },
        )
        .unwrap();
        let kept = drop_incomplete(&corpus);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.cases()[0], corpus.cases()[2]);
    }

    #[test]
    fn rare_combinations() {
        let mut cases = many("a", 10, &["C12", "C77"]);
        cases.extend(many("b", 9, &["C50"]));
        let kept = filter_rare_combinations(&cases, 10);
        assert_eq!(kept.len(), 10);
        assert!(kept.iter().all(|c| c.codes == codes(["C12", "C77"])));
        assert_eq!(filter_rare_combinations(&cases, 1), cases);
    }

    #[test]
    fn combination_is_exact_set_not_subset() {
        let mut cases = many("a", 10, &["C12"]);
        cases.extend(many("b", 5, &["C12", "C77"]));
        let kept = filter_rare_combinations(&cases, 10);
        assert_eq!(kept.len(), 10);
    }

    #[test]
    fn rounding() {
        assert_eq!(rounded_share(0.10, 1000), 100);
        assert_eq!(rounded_share(0.01, 117), 1);
        assert_eq!(rounded_share(0.10, 25), 3);
        assert_eq!(rounded_share(0.5, 5), 3);
        assert_eq!(rounded_share(0.01, 49), 0);
        assert_eq!(rounded_share(0.01, 50), 1);
    }

    #[test]
    fn subsample_is_seeded() {
        let cases = many("c", 1000, &["C50"]);
        let a = subsample_tier(&cases, 0.10, 7);
        let b = subsample_tier(&cases, 0.10, 7);
        let c = subsample_tier(&cases, 0.10, 8);
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(subsample_tier(&cases, 1.0, 7), cases);
        assert_eq!(subsample_tier(&many("c", 117, &["C50"]), 0.01, 3).len(), 1);
    }

    #[test]
    fn split_minimum_group() {
        let split = stratified_split(&many("a", 10, &["C12"]), 0.10, 10, 1);
        assert_eq!((split.train.len(), split.test.len()), (9, 1));
    }

    #[test]
    fn split_two_groups() {
        let mut cases = many("a", 20, &["C12"]);
        cases.extend(many("b", 20, &["C50", "C77"]));
        let split = stratified_split(&cases, 0.10, 10, 1);
        assert_eq!(split.test.len(), 4);
        assert_eq!(split.test.iter().filter(|c| c.codes == codes(["C12"])).count(), 2);
        let again = stratified_split(&cases, 0.10, 10, 1);
        assert_eq!(split, again);
        let train_ids: BTreeSet<_> = split.train.iter().map(|c| &c.case_id).collect();
        assert!(split.test.iter().all(|c| !train_ids.contains(&c.case_id)));
    }

    #[test]
    fn singleton_group_goes_to_train_with_warning() {
        let split = stratified_split(&[case("only", &["C12"])], 0.5, 1, 1);
        assert_eq!(split.train.len(), 1);
        assert!(split.test.is_empty());
        assert_eq!(split.warnings.len(), 1);
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_test_count(10, 0.1, 10), 1);
        assert_eq!(group_test_count(14, 0.1, 10), 1);
        assert_eq!(group_test_count(15, 0.1, 10), 2);
        assert_eq!(group_test_count(4, 0.1, 10), 0);
        assert_eq!(group_test_count(4, 0.1, 3), 1);
        assert_eq!(group_test_count(2, 0.9, 1), 1);
    }

    #[test]
    fn config_validation() {
        assert!(CurationConfig::default().validate().is_ok());
        let bad = CurationConfig {
            test_fraction: 1.0,
            ..CurationConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut tiers = CurationConfig::default();
        tiers.tier_fractions.insert("zero".into(), 0.0);
        assert!(tiers.validate().is_err());
        let mut restricted = CurationConfig::default();
        restricted.restrict_tiers(&["large".into()]).unwrap();
        assert_eq!(restricted.tier_fractions.len(), 1);
        assert!(restricted.restrict_tiers(&["huge".into()]).is_err());
    }
}
