//! Brute-force metric checker over a dense 0/1 label matrix. Each metric is
//! transcribed directly from its definition, sharing no code with the crate's
//! metrics module. Included by path from several test targets.

#![allow(dead_code)]

use std::collections::BTreeSet;

use pathcodes_core::corpus::{codes, CodeVocabulary, ConditionCode};
use pathcodes_core::metrics::{evaluate, EvalRecord, MetricsOptions, ZeroSupport};
use pathcodes_core::protocol::{parse_generation, serialize_codes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASS_NAMES: [&str; 5] = ["C12", "C18", "C44", "C50", "C77"];

/// Dense instance: gold[i][j], pred[i][j], oov[i].
#[derive(Debug, Clone)]
pub struct Instance {
    pub classes: usize,
    pub gold: Vec<Vec<bool>>,
    pub pred: Vec<Vec<bool>>,
    pub oov: Vec<bool>,
}

#[derive(Debug)]
pub struct OracleScores {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn oracle(inst: &Instance, zero_support: ZeroSupport) -> OracleScores {
    let n = inst.gold.len();
    let mut correct = 0usize;
    for i in 0..n {
        let same = (0..inst.classes).all(|j| inst.gold[i][j] == inst.pred[i][j]);
        if same && !inst.oov[i] {
            correct += 1;
        }
    }

    let mut aucs = Vec::new();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..inst.classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        let mut tn = 0.0;
        for i in 0..n {
            match (inst.gold[i][j], inst.pred[i][j]) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        if tp + fn_ > 0.0 && tn + fp > 0.0 {
            aucs.push((tp / (tp + fn_) + tn / (tn + fp)) / 2.0);
        }
        if tp + fn_ == 0.0 && zero_support == ZeroSupport::Exclude {
            continue;
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        ps.push(p);
        rs.push(r);
        fs.push(f);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    OracleScores {
        accuracy: correct as f64 / n as f64,
        auc: (!aucs.is_empty()).then(|| avg(&aucs)),
        precision: avg(&ps),
        recall: avg(&rs),
        f1: avg(&fs),
    }
}

pub fn to_records(inst: &Instance) -> (Vec<EvalRecord>, CodeVocabulary) {
    let names = &CLASS_NAMES[..inst.classes];
    let vocab = CodeVocabulary::from_codes(codes(names.iter().copied()));
    let set = |row: &[bool]| -> BTreeSet<ConditionCode> {
        codes(names.iter().zip(row).filter(|(_, &b)| b).map(|(c, _)| *c))
    };
    let records = (0..inst.gold.len())
        .map(|i| {
            let mut text = serialize_codes(&set(&inst.pred[i]));
            if inst.oov[i] {
                text.push_str("\nZ99");
            }
            EvalRecord {
                case_id: format!("r{i:02}"),
                gold: set(&inst.gold[i]),
                prediction: parse_generation(&text, &vocab),
                latency: None,
                input_chars: 0,
            }
        })
        .collect();
    (records, vocab)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let classes = rng.random_range(1..=5);
    let n = rng.random_range(1..=20);
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut oov = Vec::new();
    for _ in 0..n {
        let mut g: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.4)).collect();
        if !g.iter().any(|&b| b) {
            let k = rng.random_range(0..classes);
            g[k] = true;
        }
        // Half the time copy gold and perturb, otherwise draw independently.
        let p: Vec<bool> = if rng.random_bool(0.5) {
            g.iter().map(|&b| if rng.random_bool(0.15) { !b } else { b }).collect()
        } else {
            (0..classes).map(|_| rng.random_bool(0.4)).collect()
        };
        gold.push(g);
        pred.push(p);
        oov.push(rng.random_bool(0.05));
    }
    Instance {
        classes,
        gold,
        pred,
        oov,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Compares `evaluate` with the checker on `trials` seeded random instances
/// under both zero-support policies, to 1e-12.
pub fn check_equivalence(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let inst = random_instance(&mut rng);
        let (records, vocab) = to_records(&inst);
        for policy in [ZeroSupport::Exclude, ZeroSupport::Zero] {
            let got = evaluate(&records, &vocab, MetricsOptions { zero_support: policy })
                .map_err(|e| format!("trial {trial}: {e}"))?;
            let want = oracle(&inst, policy);
            let auc_ok = match (got.macro_auc, want.auc) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            let ok = auc_ok
                && close(got.accuracy, want.accuracy)
                && close(got.macro_precision, want.precision)
                && close(got.macro_recall, want.recall)
                && close(got.macro_f1, want.f1);
            if !ok {
                return Err(format!("trial {trial} ({policy:?}): got {got:?}, checker {want:?}"));
            }
        }
    }
    Ok(())
}
