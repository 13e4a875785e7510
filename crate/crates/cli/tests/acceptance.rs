//! Acceptance checks. Each check prints one PASS/FAIL line; the process
//! exits non-zero if any check fails or overruns its time budget.

mod common;
#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fixture, ok, pathcodes, prepare_large, read_json, MockProcess};
use pathcodes_core::corpus::{codes, load_corpus_bytes, CodeVocabulary, ConditionCode, CorpusSchema};
use pathcodes_core::curation::{curate, rounded_share, CuratedCase, CurationConfig};
use pathcodes_core::emit::{hotencoded_csv, instruction_jsonl};
use pathcodes_core::metrics::{evaluate, exact_match_accuracy, EvalRecord, MetricsOptions};
use pathcodes_core::protocol::{parse_generation, serialize_codes, PromptTemplate};
use pathcodes_core::synth::{synth_csv, SynthConfig};
use pathcodes_net::{run_evaluation, serve, ChatClient, EndpointConfig, GoldStore, OracleConfig, OracleMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime builds")
}

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn synth_cases(n_cases: usize, seed: u64) -> (Vec<CuratedCase>, CodeVocabulary) {
    let bytes = synth_csv(&SynthConfig {
        n_cases,
        seed,
        noise: 0.0,
    });
    let corpus = load_corpus_bytes(&bytes, "synth", &CorpusSchema::default(), true)
        .unwrap()
        .corpus;
    let mut config = CurationConfig::default();
    config.restrict_tiers(&["large".to_string()]).unwrap();
    let large = curate(&corpus, &config).unwrap().remove("large").unwrap();
    let mut cases = large.train;
    cases.extend(large.test);
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    (cases, large.vocabulary)
}

fn strict_accuracy_golden() -> Result<String, String> {
    let vocab = CodeVocabulary::from_codes(codes(["C12", "C77"]));
    let partial = EvalRecord {
        case_id: "partial".into(),
        gold: codes(["C12", "C77"]),
        prediction: parse_generation("C12", &vocab),
        latency: None,
        input_chars: 0,
    };
    let alone = exact_match_accuracy(std::slice::from_ref(&partial)).map_err(|e| e.to_string())?;
    ensure(alone == 0.0, || format!("accuracy {alone}, expected 0"))?;
    let exact = EvalRecord {
        case_id: "exact".into(),
        prediction: parse_generation("C12\nC77", &vocab),
        ..partial.clone()
    };
    let mixed = exact_match_accuracy(&[partial, exact]).map_err(|e| e.to_string())?;
    ensure(mixed == 0.5, || format!("mixed accuracy {mixed}, expected 0.5"))?;
    Ok("partial match contributes 0; alongside an exact match accuracy is 0.5".into())
}

fn metric_oracle_equivalence() -> Result<String, String> {
    oracle::check_equivalence(1000, 7)?;
    Ok("1000 instances agree to 1e-12 under both zero-support policies".into())
}

fn perfect_oracle_end_to_end() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let summary = ok(pathcodes(out, &["ingest", fixture().to_str().unwrap()]));
    ensure(summary.contains("cases: 200"), || format!("ingest summary: {summary}"))?;
    // Default tier fractions leave 20 and 2 cases in small and tiny, below
    // the minimum combination count; the large tier carries the run.
    ok(pathcodes(out, &["curate", "--tiers", "large"]));
    let gold = out.join("datasets/large.test.jsonl");
    let mock = MockProcess::start(out, &["--gold", gold.to_str().unwrap(), "--mode", "perfect"]);
    ok(pathcodes(
        out,
        &["evaluate", "--tier", "large", "--base-url", &mock.base_url, "--model-label", "perfect", "--run-id", "perfect"],
    ));
    mock.stop();
    ok(pathcodes(out, &["report", "--id", "acceptance"]));

    let report = &read_json(&out.join("runs/perfect.metrics.json"))["report"];
    for key in ["accuracy", "macro_auc", "macro_precision", "macro_recall", "macro_f1"] {
        ensure(report[key].as_f64() == Some(1.0), || format!("{key} = {}", report[key]))?;
    }
    let csv = fs::read_to_string(out.join("report.acceptance.csv")).map_err(|e| e.to_string())?;
    for column in ["accuracy", "auc", "precision", "recall", "f1"] {
        let line = format!("overall,perfect,{column},1.000000");
        ensure(csv.contains(&line), || format!("report lacks {line:?}"))?;
    }
    Ok(format!("{} test cases, all five metrics exactly 1.0", report["n_cases"]))
}

fn degenerate_auc() -> Result<String, String> {
    let vocab = CodeVocabulary::from_codes(codes(["C12", "C44", "C77"]));
    let golds: [&[&str]; 6] = [&["C12", "C77"], &["C44"], &["C77"], &["C12"], &["C44", "C77"], &["C44"]];
    // The oracle answers gold minus C77, so C77 is never predicted.
    let records: Vec<EvalRecord> = golds
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let gold = codes(g.iter().copied());
            let answer: Vec<&ConditionCode> = gold.iter().filter(|c| c.as_str() != "C77").collect();
            EvalRecord {
                case_id: i.to_string(),
                prediction: parse_generation(&serialize_codes(answer), &vocab),
                gold,
                latency: None,
                input_chars: 0,
            }
        })
        .collect();
    let report = evaluate(&records, &vocab, MetricsOptions::default()).map_err(|e| e.to_string())?;
    let c77 = report
        .per_class
        .iter()
        .find(|c| c.confusion.code.as_str() == "C77")
        .ok_or("no C77 row")?;
    ensure(c77.auc == Some(0.5), || format!("C77 AUC {:?}", c77.auc))?;
    Ok("never-predicted class has AUC exactly 0.5".into())
}

fn random_prediction_auc() -> Result<String, String> {
    let classes = 64;
    let names: Vec<String> = (0..classes).map(|j| format!("C{j:02}")).collect();
    let vocab = CodeVocabulary::from_codes(names.iter().map(|n| n.parse().unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let records: Vec<EvalRecord> = (0..2000)
        .map(|i| {
            let mut gold: BTreeSet<ConditionCode> =
                names.iter().filter(|_| rng.random_bool(0.05)).map(|n| n.parse().unwrap()).collect();
            if gold.is_empty() {
                gold.insert(names[rng.random_range(0..classes)].parse().unwrap());
            }
            let answer: Vec<&str> = names.iter().filter(|_| rng.random_bool(0.1)).map(String::as_str).collect();
            EvalRecord {
                case_id: format!("{i:04}"),
                gold,
                prediction: parse_generation(&answer.join("\n"), &vocab),
                latency: None,
                input_chars: 0,
            }
        })
        .collect();
    let auc = evaluate(&records, &vocab, MetricsOptions::default())
        .map_err(|e| e.to_string())?
        .macro_auc
        .ok_or("macro AUC undefined")?;
    ensure((auc - 0.5).abs() <= 0.03, || format!("macro AUC {auc}"))?;
    Ok(format!("macro AUC {auc:.4}"))
}

fn curation_invariants() -> Result<String, String> {
    let bytes = synth_csv(&SynthConfig {
        n_cases: 10_000,
        seed: 31,
        noise: 0.04,
    });
    let corpus = load_corpus_bytes(&bytes, "synth", &CorpusSchema::default(), false)
        .map_err(|e| e.to_string())?
        .corpus;
    let config = CurationConfig::default();
    let tiers = curate(&corpus, &config).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for (name, ds) in &tiers {
        let mut total: BTreeMap<&BTreeSet<ConditionCode>, usize> = BTreeMap::new();
        let mut test: BTreeMap<&BTreeSet<ConditionCode>, usize> = BTreeMap::new();
        for c in &ds.train {
            *total.entry(&c.codes).or_default() += 1;
        }
        for c in &ds.test {
            *total.entry(&c.codes).or_default() += 1;
            *test.entry(&c.codes).or_default() += 1;
        }
        for (combo, &n) in &total {
            ensure(n >= config.min_combo_count, || format!("{name}: {combo:?} has {n} cases"))?;
            let share = *test.get(combo).unwrap_or(&0) as f64;
            let target = config.test_fraction * n as f64;
            ensure((share - target).abs() <= 1.0, || format!("{name}: {combo:?} test {share} vs {target}"))?;
        }
        let train_ids: BTreeSet<&str> = ds.train.iter().map(|c| c.case_id.as_str()).collect();
        ensure(ds.test.iter().all(|c| !train_ids.contains(c.case_id.as_str())), || {
            format!("{name}: train and test overlap")
        })?;
        let fraction = config.tier_fractions[name];
        let expected = rounded_share(fraction, ds.counts.pool);
        let exact = fraction * ds.counts.pool as f64;
        ensure(ds.counts.sampled == expected && (expected as f64 - exact).abs() <= 0.5, || {
            format!("{name}: sampled {} of {}", ds.counts.sampled, ds.counts.pool)
        })?;
        sizes.push(format!("{name} {}", ds.counts.sampled));
    }
    ensure(tiers.len() == 3, || format!("{} tiers", tiers.len()))?;
    Ok(format!("pool {}; sampled {}", tiers["large"].counts.pool, sizes.join(", ")))
}

fn format_fidelity() -> Result<String, String> {
    let listing = CuratedCase {
        case_id: "listing".into(),
        input_text: "right base of tongue invasive squamous cell carcinoma".into(),
        codes: codes(["C77", "C12"]),
    };
    let line = String::from_utf8(instruction_jsonl(&[listing])).map_err(|e| e.to_string())?;
    let expected = concat!(
        r#"{"id":"identity_0","conversations":["#,
        r#"{"from":"human","value":"right base of tongue invasive squamous cell carcinoma"},"#,
        r#"{"from":"gpt","value":"C12\nC77"}]}"#,
        "\n"
    );
    ensure(line == expected, || format!("instruction line {line:?}"))?;

    let vocab = CodeVocabulary::from_codes(codes(["C43", "C44", "C78"]));
    let rows = [
        ("biopsy basal cell carcinoma type tumor...", vec!["C44"]),
        ("lateral lesion and consists of tan soft tissue...", vec!["C43"]),
        ("omentum omentectomy metastatic high grade carcinoma...", vec!["C78"]),
        ("skin, back, with nodal metastasis, tumor...", vec!["C43", "C78"]),
    ];
    let cases: Vec<CuratedCase> = rows
        .iter()
        .enumerate()
        .map(|(i, (text, cs))| CuratedCase {
            case_id: i.to_string(),
            input_text: text.to_string(),
            codes: codes(cs.iter().copied()),
        })
        .collect();
    let csv = hotencoded_csv(&cases, &vocab).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    let header: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    ensure(header == ["input_text", "code_0", "code_1", "code_2"], || format!("header {header:?}"))?;
    let expected_bits = [[0, 1, 0], [1, 0, 0], [0, 0, 1], [1, 0, 1]];
    for ((record, case), bits) in reader.records().zip(&cases).zip(expected_bits) {
        let record = record.map_err(|e| e.to_string())?;
        ensure(record[0] == case.input_text, || format!("text column {:?}", &record[0]))?;
        let got: Vec<u8> = record.iter().skip(1).map(|v| v.parse().unwrap_or(9)).collect();
        ensure(got == bits, || format!("row {} bits {got:?}", case.case_id))?;
        let sum: usize = got.iter().map(|&b| b as usize).sum();
        ensure(sum == case.codes.len(), || format!("row {} sums to {sum}", case.case_id))?;
    }
    Ok("instruction line byte-exact; hot-encoded rows match, row sums equal code counts".into())
}

fn protocol_round_trip() -> Result<String, String> {
    let names: Vec<String> = (0..40)
        .map(|j| format!("C{j:02}"))
        .chain((0..20).map(|j| format!("D{j:02}.{}", j % 10)))
        .collect();
    let vocab = CodeVocabulary::from_codes(names.iter().map(|n| n.parse().unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10_000 {
        let size = rng.random_range(1..=8);
        let subset: BTreeSet<ConditionCode> = rand::seq::index::sample(&mut rng, vocab.len(), size)
            .iter()
            .map(|i| vocab.codes()[i].clone())
            .collect();
        let parsed = parse_generation(&serialize_codes(&subset), &vocab);
        ensure(parsed.codes == subset && parsed.flags.is_empty(), || {
            format!("trial {trial}: {subset:?} -> {parsed:?}")
        })?;
    }
    Ok("10000 subsets round-trip with zero flags".into())
}

fn concurrency_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = dir.path();
    prepare_large(base);
    let datasets = base.join("datasets");
    let gold = datasets.join("large.test.jsonl");
    let mock = MockProcess::start(
        base,
        &["--gold", gold.to_str().unwrap(), "--mode", "dropout", "--dropout-p", "0.3", "--latency-ms", "20"],
    );

    let mut metrics = Vec::new();
    let mut high_water = Vec::new();
    for (k, label) in [(1, "serial"), (8, "parallel")] {
        let out = base.join(label);
        ok(pathcodes(
            &out,
            &[
                "evaluate",
                "--datasets",
                datasets.to_str().unwrap(),
                "--base-url",
                &mock.base_url,
                "--max-in-flight",
                &k.to_string(),
                "--run-id",
                "run",
            ],
        ));
        metrics.push(fs::read(out.join("runs/run.metrics.json")).map_err(|e| e.to_string())?);
        let hw = mock.stats()["concurrent_high_water"].as_u64().ok_or("no stats")?;
        high_water.push(hw);
        ensure(hw <= k, || format!("high water {hw} exceeds max_in_flight {k}"))?;
    }
    mock.stop();
    ensure(metrics[0] == metrics[1], || "metrics JSON differs between 1 and 8 in flight".into())?;
    Ok(format!("identical metrics JSON; high water {} then {}", high_water[0], high_water[1]))
}

fn latency_accounting() -> Result<String, String> {
    let (mut cases, vocab) = synth_cases(1_000, 3);
    cases.truncate(200);
    let template = PromptTemplate::default();
    runtime().block_on(async {
        let config = OracleConfig {
            latency_ms: 50,
            ..OracleConfig::default()
        };
        let server = serve(config, GoldStore::from_cases(&cases, &template), loopback())
            .await
            .map_err(|e| e.to_string())?;
        let client = ChatClient::new(EndpointConfig {
            base_url: server.base_url(),
            ..EndpointConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let run = run_evaluation(&cases, &vocab, &client, &template)
            .await
            .map_err(|e| e.to_string())?;
        server.shutdown().await.map_err(|e| e.to_string())?;

        let report = evaluate(&run.records, &vocab, MetricsOptions::default()).map_err(|e| e.to_string())?;
        let stats = report.latency.ok_or("no latency stats")?;
        let direct = run.records.iter().filter_map(|r| r.latency).sum::<f64>() / run.records.len() as f64;
        ensure(stats.n == 200, || format!("{} latencies", stats.n))?;
        ensure((stats.mean - direct).abs() < 1e-12, || format!("reported mean {} vs {direct}", stats.mean))?;
        ensure((0.050..=0.070).contains(&stats.mean), || format!("mean latency {:.4}s", stats.mean))?;
        Ok(format!("mean {:.4}s over {} requests", stats.mean, stats.n))
    })
}

fn dropout_recall() -> Result<String, String> {
    let (mut cases, vocab) = synth_cases(10_000, 4);
    cases.truncate(4_500);
    let occurrences: usize = cases.iter().map(|c| c.codes.len()).sum();
    ensure(occurrences >= 5_000, || format!("only {occurrences} gold-code occurrences"))?;
    let template = PromptTemplate::default();
    let records = runtime().block_on(async {
        let config = OracleConfig {
            mode: OracleMode::Dropout,
            dropout_p: 0.3,
            seed: 1,
            ..OracleConfig::default()
        };
        let server = serve(config, GoldStore::from_cases(&cases, &template), loopback())
            .await
            .map_err(|e| e.to_string())?;
        let client = ChatClient::new(EndpointConfig {
            base_url: server.base_url(),
            max_in_flight: 16,
            ..EndpointConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let run = run_evaluation(&cases, &vocab, &client, &template)
            .await
            .map_err(|e| e.to_string())?;
        server.shutdown().await.map_err(|e| e.to_string())?;
        Ok::<_, String>(run.records)
    })?;

    let report = evaluate(&records, &vocab, MetricsOptions::default()).map_err(|e| e.to_string())?;
    let recall = report.macro_recall;
    ensure((recall - 0.70).abs() <= 0.05, || format!("macro recall {recall:.4}"))?;
    let (mut predicted, mut correct) = (0usize, 0usize);
    for r in records.iter().filter(|r| !r.prediction.codes.is_empty()) {
        predicted += r.prediction.codes.len();
        correct += r.prediction.codes.intersection(&r.gold).count();
    }
    ensure(predicted > 0 && predicted == correct, || format!("precision {correct}/{predicted}"))?;
    ensure(
        report.per_class.iter().all(|c| c.confusion.tp + c.confusion.fp == 0 || c.precision == 1.0),
        || "a class has precision below 1".into(),
    )?;
    Ok(format!(
        "{occurrences} gold codes; macro recall {recall:.4}; precision {correct}/{predicted}"
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, Check, u64); 11] = [
        ("strict-accuracy golden case", strict_accuracy_golden, 1),
        ("metric oracle equivalence", metric_oracle_equivalence, 10),
        ("perfect-oracle end to end", perfect_oracle_end_to_end, 60),
        ("degenerate AUC", degenerate_auc, 1),
        ("random-prediction AUC", random_prediction_auc, 30),
        ("curation invariants (10k cases)", curation_invariants, 30),
        ("format fidelity", format_fidelity, 1),
        ("protocol round trip", protocol_round_trip, 5),
        ("concurrency determinism", concurrency_determinism, 60),
        ("latency accounting", latency_accounting, 30),
        ("dropout recall", dropout_recall, 60),
    ];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(*budget) => {
                Err(format!("{detail}; took {:.2}s, budget {budget}s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name} ({:.2}s): {detail}", i + 1, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name} ({:.2}s): {detail}", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} acceptance criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
