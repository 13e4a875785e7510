use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pathcodes_core::analysis::{factor_analysis, render_tables, RunRecord};
use pathcodes_core::corpus::{code_vocabulary, load_corpus, ConditionCode, CorpusError, CorpusSchema};
use pathcodes_core::curation::{curate as curate_corpus, CuratedCase};
use pathcodes_core::emit::{emit_all, hotencoded_paths, instruction_paths, read_instruction_file, LabelMap};
use pathcodes_core::metrics::{evaluate as score, EvalRecord, LatencyStats, MetricsOptions};
use pathcodes_net::mocksrv::MockError;
use pathcodes_net::{run_evaluation, serve, ChatClient, EvalError, GoldStore};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::{CurateArgs, EvaluateArgs, Failure, IngestArgs, ReportArgs, ServeMockArgs};

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::usage(format!("cannot start async runtime: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::data(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

/// Names used inside output file names.
fn check_name(kind: &str, name: &str) -> Result<(), Failure> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Failure::usage(format!("{kind} {name:?} may only hold letters, digits, '-', '_' and '.'")))
    }
}

pub fn ingest(config: PipelineConfig, args: IngestArgs) -> Result<(), Failure> {
    config.validate()?;
    let input = args
        .input
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| Failure::usage("no corpus given on the command line or in the config"))?;
    let ingested = load_corpus(&input, &config.schema, args.strict).map_err(|e| match e {
        CorpusError::Io { .. } => Failure::data(e.to_string()),
        CorpusError::Pattern { .. } | CorpusError::Range(_) => Failure::usage(e.to_string()),
        _ => Failure::data(format!("{}: {e}", input.display())),
    })?;
    for reject in &ingested.rejects {
        eprintln!("warning: {} row {}: {}", input.display(), reject.row, reject.message);
    }

    let corpus = &ingested.corpus;
    let cache = config.corpus_cache();
    fs::create_dir_all(&config.out)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", config.out.display())))?;
    corpus.write_jsonl(&cache).map_err(|e| Failure::data(e.to_string()))?;

    println!("source: {}", input.display());
    println!("provenance: {}", corpus.provenance().hash);
    println!("cases: {}", corpus.len());
    println!("distinct codes: {}", code_vocabulary(corpus).len());
    println!("rejected rows: {}", ingested.rejects.len());
    println!("cache: {}", cache.display());
    Ok(())
}

pub fn curate(mut config: PipelineConfig, args: CurateArgs) -> Result<(), Failure> {
    if let Some(n) = args.min_combo_count {
        config.curation.min_combo_count = n;
    }
    if let Some(f) = args.test_fraction {
        config.curation.test_fraction = f;
    }
    if !args.tiers.is_empty() {
        config
            .curation
            .restrict_tiers(&args.tiers)
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    config.validate()?;

    let path = args.corpus.unwrap_or_else(|| config.corpus_cache());
    let corpus = load_corpus(&path, &CorpusSchema::normalized_cache(), true)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?
        .corpus;
    let datasets = curate_corpus(&corpus, &config.curation).map_err(|e| Failure::data(e.to_string()))?;
    let dir = config.datasets_dir();
    let manifest =
        emit_all(&datasets, corpus.provenance(), &config.curation, &dir).map_err(|e| Failure::data(e.to_string()))?;

    for (tier, entry) in &manifest.tiers {
        let c = &entry.counts;
        println!(
            "{tier}: sampled {} of {}, kept {} in {} combinations, train {}, test {}, {} codes",
            c.sampled, c.pool, c.after_combo_filter, c.combinations, c.train, c.test, entry.vocabulary_size
        );
        for w in &entry.warnings {
            eprintln!("warning: {tier}: {w}");
        }
    }
    println!("manifest: {}", dir.join("manifest.json").display());
    Ok(())
}

pub fn serve_mock(mut config: PipelineConfig, args: ServeMockArgs) -> Result<(), Failure> {
    let mock = &mut config.mock;
    if let Some(mode) = args.mode {
        mock.mode = mode;
    }
    if let Some(p) = args.dropout_p {
        mock.dropout_p = p;
    }
    if let Some(p) = args.hallucinate_p {
        mock.hallucinate_p = p;
    }
    if let Some(ms) = args.latency_ms {
        mock.latency_ms = ms;
    }
    if !args.extra_codes.is_empty() {
        mock.extra_vocab = args
            .extra_codes
            .iter()
            .map(|c| ConditionCode::parse(c))
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    config.validate()?;
    let template = config.prompt_template()?;
    let gold = GoldStore::from_instruction_file(&args.gold, &template).map_err(|e| Failure::data(e.to_string()))?;

    runtime()?.block_on(async {
        let server = serve(config.mock.clone(), gold, args.bind).await.map_err(|e| match e {
            MockError::Bind { .. } => Failure::endpoint(e.to_string()),
            MockError::InvalidConfig(_) => Failure::usage(e.to_string()),
            MockError::Gold(_) => Failure::data(e.to_string()),
        })?;
        println!("listening on {}", server.base_url());
        let _ = std::io::stdout().flush();

        let trigger = server.shutdown_trigger();
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                trigger.trigger();
            }
        });
        let addr = server.addr();
        let stats = server
            .wait()
            .await
            .map_err(|e| Failure::endpoint(format!("server on {addr} failed: {e}")))?;
        println!(
            "stopped after {} requests (concurrent high water {}, gold misses {})",
            stats.request_count, stats.concurrent_high_water, stats.gold_misses
        );
        Ok(())
    })
}

fn load_test_split(dir: &Path, tier: &str) -> Result<(Vec<CuratedCase>, pathcodes_core::CodeVocabulary), Failure> {
    let (_, test_path) = instruction_paths(dir, tier);
    let (_, _, labels_path) = hotencoded_paths(dir, tier);
    let vocab = LabelMap::read(&labels_path)
        .map_err(|e| Failure::data(e.to_string()))?
        .vocabulary();
    let cases = read_instruction_file(&test_path)
        .map_err(|e| Failure::data(e.to_string()))?
        .iter()
        .map(|r| r.to_case(&vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::data(format!("{}: {e}", test_path.display())))?;
    Ok((cases, vocab))
}

#[derive(Serialize)]
struct CaseLatency<'a> {
    case_id: &'a str,
    latency: f64,
}

#[derive(Serialize)]
struct LatencyLog<'a> {
    run_id: &'a str,
    #[serde(flatten)]
    stats: Option<LatencyStats>,
    transport_failures: usize,
    cases: Vec<CaseLatency<'a>>,
}

fn records_jsonl(records: &[EvalRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let stripped = EvalRecord {
            latency: None,
            ..r.clone()
        };
        serde_json::to_writer(&mut out, &stripped).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn evaluate(mut config: PipelineConfig, args: EvaluateArgs) -> Result<(), Failure> {
    let endpoint = &mut config.endpoint;
    if let Some(url) = args.base_url {
        endpoint.base_url = url;
    }
    if let Some(name) = args.model_name {
        endpoint.model_name = name;
    }
    if let Some(n) = args.max_in_flight {
        endpoint.max_in_flight = n;
    }
    if let Some(n) = args.retries {
        endpoint.retries = n;
    }
    if let Some(t) = args.timeout_secs {
        endpoint.timeout_secs = t;
    }
    config.validate()?;
    let template = config.prompt_template()?;
    let label = args.model_label.unwrap_or_else(|| config.endpoint.model_name.clone());
    let run_id = args.run_id.unwrap_or_else(|| match args.epochs {
        Some(e) => format!("{label}-{}-e{e}", args.tier),
        None => format!("{label}-{}", args.tier),
    });
    check_name("run id", &run_id)?;

    let datasets = args.datasets.unwrap_or_else(|| config.datasets_dir());
    let (cases, vocab) = load_test_split(&datasets, &args.tier)?;
    let runs_dir = config.runs_dir();
    fs::create_dir_all(&runs_dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", runs_dir.display())))?;
    let records_path = runs_dir.join(format!("{run_id}.records.jsonl"));

    let mut client = ChatClient::new(config.endpoint.clone()).map_err(|e| Failure::usage(e.to_string()))?;
    if args.transcript {
        client = client
            .with_transcript(&runs_dir.join(format!("{run_id}.transcript.jsonl")))
            .map_err(|e| Failure::data(e.to_string()))?;
    }
    let outcome = runtime()?.block_on(run_evaluation(&cases, &vocab, &client, &template));
    let run = match outcome {
        Ok(run) => run,
        Err(EvalError::Aborted { failures, total, partial }) => {
            write_file(&records_path, &records_jsonl(&partial))?;
            return Err(Failure::endpoint(format!(
                "aborted: {failures} of {total} requests to {} failed; partial records in {}",
                config.endpoint.base_url,
                records_path.display()
            )));
        }
        Err(EvalError::EmptyTestSplit) => return Err(Failure::data(format!("tier {} has an empty test split", args.tier))),
        Err(e @ EvalError::Template(_)) => return Err(Failure::usage(e.to_string())),
    };

    let mut report = score(
        &run.records,
        &vocab,
        MetricsOptions {
            zero_support: config.metrics.zero_support,
        },
    )
    .map_err(|e| Failure::data(e.to_string()))?;
    let latency = report.latency.take();
    let record = RunRecord {
        run_id: run_id.clone(),
        model_label: label,
        tier: args.tier.clone(),
        epochs: args.epochs,
        report,
        factors: Some(factor_analysis(&run.records, &vocab)),
    };
    let log = LatencyLog {
        run_id: &run_id,
        stats: latency,
        transport_failures: run.transport_failures,
        cases: run
            .records
            .iter()
            .filter_map(|r| r.latency.map(|latency| CaseLatency { case_id: &r.case_id, latency }))
            .collect(),
    };

    write_file(&records_path, &records_jsonl(&run.records))?;
    let metrics_path = runs_dir.join(format!("{run_id}.metrics.json"));
    write_file(&metrics_path, &pretty_json(&record))?;
    write_file(&runs_dir.join(format!("{run_id}.latency.json")), &pretty_json(&log))?;

    print!("{}", record.report.to_table());
    if let Some(l) = latency {
        println!("latency: mean {:.4}s p50 {:.4}s p95 {:.4}s (n={})", l.mean, l.p50, l.p95, l.n);
    }
    if run.transport_failures > 0 {
        eprintln!("warning: {} of {} requests failed", run.transport_failures, cases.len());
    }
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".metrics.json")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn report(config: PipelineConfig, args: ReportArgs) -> Result<(), Failure> {
    check_name("report id", &args.id)?;
    let dir = args.runs.unwrap_or_else(|| config.runs_dir());
    let files = metrics_files(&dir)?;
    if files.is_empty() {
        return Err(Failure::data(format!("no *.metrics.json files in {}", dir.display())));
    }
    let runs = files
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<RunRecord>(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rendered = render_tables(&runs).map_err(|e| Failure::data(e.to_string()))?;

    let md = config.out.join(format!("report.{}.md", args.id));
    let csv = config.out.join(format!("report.{}.csv", args.id));
    write_file(&md, rendered.document.as_bytes())?;
    write_file(&csv, rendered.csv.as_bytes())?;
    print!("{}", rendered.document);
    eprintln!("wrote {} and {}", md.display(), csv.display());
    Ok(())
}
