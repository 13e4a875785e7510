//! Embedded chat-completions server that answers from known gold codes
//! according to a configurable oracle behaviour.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{ConnectInfo, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pathcodes_core::corpus::ConditionCode;
use pathcodes_core::curation::CuratedCase;
use pathcodes_core::derive_seed;
use pathcodes_core::emit::read_instruction_file;
use pathcodes_core::protocol::{serialize_codes, PromptTemplate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::wire::{ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OracleMode {
    #[default]
    Perfect,
    Dropout,
    Hallucinate,
    CorruptFormat,
    Empty,
}

impl std::str::FromStr for OracleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PERFECT" => Ok(OracleMode::Perfect),
            "DROPOUT" => Ok(OracleMode::Dropout),
            "HALLUCINATE" => Ok(OracleMode::Hallucinate),
            "CORRUPT_FORMAT" => Ok(OracleMode::CorruptFormat),
            "EMPTY" => Ok(OracleMode::Empty),
            _ => Err(format!("unknown oracle mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub dropout_p: f64,
    pub hallucinate_p: f64,
    pub extra_vocab: Vec<ConditionCode>,
    pub latency_ms: u64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Perfect,
            dropout_p: 0.0,
            hallucinate_p: 0.0,
            extra_vocab: Vec::new(),
            latency_ms: 0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), MockError> {
        for (name, p) in [("dropout_p", self.dropout_p), ("hallucinate_p", self.hallucinate_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MockError::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("cannot load gold codes: {0}")]
    Gold(String),
}

/// Hex SHA-256 of a user message, the key under which gold codes are stored.
pub fn case_key(user_content: &str) -> String {
    hex::encode(Sha256::digest(user_content.as_bytes()))
}

/// Gold code sets keyed by the hash of the user message that carries the case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldStore {
    entries: HashMap<String, BTreeSet<ConditionCode>>,
}

impl GoldStore {
    pub fn insert(&mut self, user_content: &str, codes: BTreeSet<ConditionCode>) {
        self.entries.insert(case_key(user_content), codes);
    }

    pub fn from_cases(cases: &[CuratedCase], template: &PromptTemplate) -> Self {
        let mut store = GoldStore::default();
        for case in cases {
            store.insert(&template.user_content(&case.input_text), case.codes.clone());
        }
        store
    }

    /// Reads an instruction-format file; the human turn is the input text and
    /// the gpt turn the newline-separated gold codes.
    pub fn from_instruction_file(path: &Path, template: &PromptTemplate) -> Result<Self, MockError> {
        let records = read_instruction_file(path).map_err(|e| MockError::Gold(e.to_string()))?;
        let mut store = GoldStore::default();
        for record in records {
            let (Some(human), Some(gpt)) = (record.human_text(), record.gpt_text()) else {
                return Err(MockError::Gold(format!("{} lacks a human or gpt turn", record.id)));
            };
            let codes = gpt
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(ConditionCode::parse)
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|e| MockError::Gold(format!("{}: {e}", record.id)))?;
            store.insert(&template.user_content(human), codes);
        }
        Ok(store)
    }

    pub fn get(&self, key: &str) -> Option<&BTreeSet<ConditionCode>> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The generation the oracle gives for one case. Randomness comes only from
/// `(config.seed, case_key)`, so answers do not depend on request order.
pub fn oracle_respond(case_key: &str, gold: &BTreeSet<ConditionCode>, config: &OracleConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, case_key));
    match config.mode {
        OracleMode::Perfect => serialize_codes(gold),
        OracleMode::Dropout => {
            let kept: Vec<&ConditionCode> = gold
                .iter()
                .filter(|_| !rng.random_bool(config.dropout_p))
                .collect();
            serialize_codes(kept)
        }
        OracleMode::Hallucinate => {
            let mut codes = gold.clone();
            if !config.extra_vocab.is_empty() && rng.random_bool(config.hallucinate_p) {
                let pick = rng.random_range(0..config.extra_vocab.len());
                codes.insert(config.extra_vocab[pick].clone());
            }
            serialize_codes(&codes)
        }
        OracleMode::CorruptFormat => {
            let joined: Vec<&str> = gold.iter().map(ConditionCode::as_str).collect();
            format!("Codes: {}", joined.join(", "))
        }
        OracleMode::Empty => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockStats {
    pub request_count: u64,
    pub concurrent_high_water: u64,
    pub gold_misses: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    in_flight: AtomicU64,
    high_water: AtomicU64,
    misses: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> MockStats {
        MockStats {
            request_count: self.requests.load(Ordering::SeqCst),
            concurrent_high_water: self.high_water.load(Ordering::SeqCst),
            gold_misses: self.misses.load(Ordering::SeqCst),
        }
    }
}

struct InFlight<'a>(&'a Counters);

impl<'a> InFlight<'a> {
    fn enter(counters: &'a Counters) -> Self {
        let now = counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        counters.high_water.fetch_max(now, Ordering::SeqCst);
        InFlight(counters)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct AppState {
    config: OracleConfig,
    gold: GoldStore,
    counters: Arc<Counters>,
    stop: Arc<Notify>,
}

async fn chat_completions(State(state): State<Arc<AppState>>, Json(request): Json<ChatRequest>) -> Json<ChatResponse> {
    let _guard = InFlight::enter(&state.counters);
    state.counters.requests.fetch_add(1, Ordering::SeqCst);

    let key = case_key(request.user_content().unwrap_or(""));
    let content = match state.gold.get(&key) {
        Some(gold) => oracle_respond(&key, gold, &state.config),
        None => {
            state.counters.misses.fetch_add(1, Ordering::SeqCst);
            String::new()
        }
    };
    if state.config.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.config.latency_ms)).await;
    }
    Json(ChatResponse::assistant(&request.model, content))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<MockStats> {
    Json(state.counters.snapshot())
}

async fn shutdown(State(state): State<Arc<AppState>>, ConnectInfo(peer): ConnectInfo<SocketAddr>) -> Response {
    if !peer.ip().is_loopback() {
        return StatusCode::FORBIDDEN.into_response();
    }
    state.stop.notify_one();
    StatusCode::ACCEPTED.into_response()
}

#[derive(Clone)]
pub struct ShutdownTrigger(Arc<Notify>);

impl ShutdownTrigger {
    pub fn trigger(&self) {
        self.0.notify_one();
    }
}

/// Handle to a running mock server.
pub struct MockServer {
    addr: SocketAddr,
    counters: Arc<Counters>,
    stop: Arc<Notify>,
    task: JoinHandle<std::io::Result<()>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.counters.snapshot()
    }

    /// A cloneable handle that stops the server from elsewhere.
    pub fn shutdown_trigger(&self) -> ShutdownTrigger {
        ShutdownTrigger(self.stop.clone())
    }

    /// Stops accepting connections and waits for open requests to finish.
    pub async fn shutdown(self) -> std::io::Result<MockStats> {
        self.stop.notify_one();
        self.wait().await
    }

    /// Runs until a shutdown request arrives; returns the final counters.
    pub async fn wait(self) -> std::io::Result<MockStats> {
        match self.task.await {
            Ok(result) => result.map(|()| self.counters.snapshot()),
            Err(e) => Err(std::io::Error::other(e)),
        }
    }
}

pub async fn serve(config: OracleConfig, gold: GoldStore, bind_addr: SocketAddr) -> Result<MockServer, MockError> {
    config.validate()?;
    let listener = TcpListener::bind(bind_addr)
        .await
        .map_err(|source| MockError::Bind { addr: bind_addr, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| MockError::Bind { addr: bind_addr, source })?;

    let counters = Arc::new(Counters::default());
    let stop = Arc::new(Notify::new());
    let state = Arc::new(AppState {
        config,
        gold,
        counters: counters.clone(),
        stop: stop.clone(),
    });
    let app = Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/__mock/stats", get(stats))
        .route("/__mock/shutdown", post(shutdown))
        .with_state(state);

    let signal = stop.clone();
    let task = tokio::spawn(async move {
        axum::serve(listener, app.into_make_service_with_connect_info::<SocketAddr>())
            .with_graceful_shutdown(async move { signal.notified().await })
            .await
    });
    tracing::info!("mock server listening on {addr}");
    Ok(MockServer {
        addr,
        counters,
        stop,
        task,
    })
}
