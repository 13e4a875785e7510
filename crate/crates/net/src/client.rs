//! Client for OpenAI-compatible chat-completions endpoints and the bounded
//! evaluation loop over a test split.

use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use pathcodes_core::corpus::CodeVocabulary;
use pathcodes_core::curation::CuratedCase;
use pathcodes_core::metrics::EvalRecord;
use pathcodes_core::protocol::{build_messages, parse_generation, ChatMessage, ParsedPrediction, PromptTemplate, TemplateError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{ChatRequest, ChatResponse};

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "default".into(),
            api_key: None,
            temperature: 0.0,
            max_tokens: 256,
            timeout_secs: 120.0,
            max_in_flight: 8,
            retries: 2,
            backoff_ms: 250,
        }
    }
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("temperature", &self.temperature)
            .field("max_tokens", &self.max_tokens)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_in_flight", &self.max_in_flight)
            .field("retries", &self.retries)
            .field("backoff_ms", &self.backoff_ms)
            .finish()
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_in_flight == 0 {
            return Err(ClientError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ClientError::InvalidConfig("timeout must be positive".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ClientError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("cannot build HTTP client: {0}")]
    Build(#[from] reqwest::Error),
    #[error("cannot open transcript {path}: {source}")]
    Transcript {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub case_id: String,
    /// Empty whenever `transport_error` is set.
    pub generation_text: String,
    /// Wall-clock seconds across all attempts, including backoff.
    pub latency: f64,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<String>,
}

#[derive(Serialize)]
struct TranscriptEntry<'a> {
    case_id: &'a str,
    attempt: u32,
    request: &'a ChatRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

pub struct ChatClient {
    http: reqwest::Client,
    endpoint: EndpointConfig,
    transcript: Option<Mutex<LineWriter<File>>>,
}

impl ChatClient {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()?;
        Ok(ChatClient {
            http,
            endpoint,
            transcript: None,
        })
    }

    /// Logs every request/response pair as one JSON line to `path`.
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, ClientError> {
        let file = File::create(path).map_err(|source| ClientError::Transcript {
            path: path.display().to_string(),
            source,
        })?;
        self.transcript = Some(Mutex::new(LineWriter::new(file)));
        Ok(self)
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn log(&self, entry: &TranscriptEntry<'_>) {
        let Some(transcript) = &self.transcript else {
            return;
        };
        let Ok(line) = serde_json::to_string(entry) else {
            return;
        };
        let mut writer = transcript.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(writer, "{line}") {
            tracing::warn!("transcript write failed: {e}");
        }
    }

    async fn attempt(&self, case_id: &str, attempt: u32, request: &ChatRequest) -> Attempt {
        let mut builder = self.http.post(self.endpoint.completions_url()).json(request);
        if let Some(key) = &self.endpoint.api_key {
            builder = builder.bearer_auth(key);
        }
        let entry = |status, response, error| TranscriptEntry {
            case_id,
            attempt,
            request,
            status,
            response,
            error,
        };

        let response = match builder.send().await {
            Ok(r) => r,
            Err(e) => {
                let message = format!("request failed: {e}");
                self.log(&entry(None, None, Some(&message)));
                return Attempt::Retry(message);
            }
        };
        let status = response.status();
        let body = match response.text().await {
            Ok(b) => b,
            Err(e) => {
                let message = format!("reading body failed: {e}");
                self.log(&entry(Some(status.as_u16()), None, Some(&message)));
                return Attempt::Retry(message);
            }
        };
        self.log(&entry(Some(status.as_u16()), Some(&body), None));

        if status.is_client_error() {
            return Attempt::Fatal(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        match serde_json::from_str::<ChatResponse>(&body) {
            Ok(parsed) => match parsed.first_content() {
                Some(content) => Attempt::Done(content.to_string()),
                None => Attempt::Retry("response has no choices".into()),
            },
            Err(e) => Attempt::Retry(format!("malformed response: {e}")),
        }
    }

    /// Sends one chat request, retrying transport failures and 5xx answers
    /// with exponential backoff. A 4xx answer ends the case at once.
    pub async fn complete(&self, case_id: &str, messages: Vec<ChatMessage>) -> CompletionResult {
        let request = ChatRequest {
            model: self.endpoint.model_name.clone(),
            messages,
            temperature: self.endpoint.temperature,
            max_tokens: Some(self.endpoint.max_tokens),
        };
        let started = Instant::now();
        let mut attempts = 0;
        let mut backoff = Duration::from_millis(self.endpoint.backoff_ms);
        let error = loop {
            attempts += 1;
            match self.attempt(case_id, attempts, &request).await {
                Attempt::Done(text) => {
                    return CompletionResult {
                        case_id: case_id.to_string(),
                        generation_text: text,
                        latency: started.elapsed().as_secs_f64(),
                        attempt_count: attempts,
                        transport_error: None,
                    };
                }
                Attempt::Fatal(e) => break e,
                Attempt::Retry(e) if attempts > self.endpoint.retries => break e,
                Attempt::Retry(e) => {
                    tracing::debug!(case_id, attempts, "retrying after {e}");
                    tokio::time::sleep(backoff).await;
                    backoff *= 2;
                }
            }
        };
        CompletionResult {
            case_id: case_id.to_string(),
            generation_text: String::new(),
            latency: started.elapsed().as_secs_f64(),
            attempt_count: attempts,
            transport_error: Some(error),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("aborted: {failures} transport failures among {total} cases")]
    Aborted {
        failures: usize,
        total: usize,
        /// Records completed before the abort, ordered by case id.
        partial: Vec<EvalRecord>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    /// Ordered by case id.
    pub records: Vec<EvalRecord>,
    pub transport_failures: usize,
}

fn to_record(case: &CuratedCase, result: CompletionResult, vocab: &CodeVocabulary) -> EvalRecord {
    let prediction = match &result.transport_error {
        Some(_) => ParsedPrediction::transport_failure(),
        None => parse_generation(&result.generation_text, vocab),
    };
    EvalRecord {
        case_id: case.case_id.clone(),
        gold: case.codes.clone(),
        prediction,
        latency: Some(result.latency),
        input_chars: case.input_text.chars().count(),
    }
}

/// Queries the endpoint for every test case with at most `max_in_flight`
/// requests outstanding. Stops early once more than half of all cases have
/// failed at the transport level.
pub async fn run_evaluation(
    cases: &[CuratedCase],
    vocab: &CodeVocabulary,
    client: &ChatClient,
    template: &PromptTemplate,
) -> Result<EvalRun, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let prepared = cases
        .iter()
        .map(|case| Ok((case, build_messages(&case.input_text, template)?)))
        .collect::<Result<Vec<_>, TemplateError>>()?;

    let total = cases.len();
    let mut records = Vec::with_capacity(total);
    let mut failures = 0;
    let mut pending = stream::iter(prepared)
        .map(|(case, messages)| async move { (case, client.complete(&case.case_id, messages).await) })
        .buffer_unordered(client.endpoint().max_in_flight);
    while let Some((case, result)) = pending.next().await {
        if result.transport_error.is_some() {
            failures += 1;
        }
        records.push(to_record(case, result, vocab));
        if failures * 2 > total {
            break;
        }
    }
    drop(pending);
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    if failures * 2 > total {
        return Err(EvalError::Aborted {
            failures,
            total,
            partial: records,
        });
    }
    Ok(EvalRun {
        records,
        transport_failures: failures,
    })
}
