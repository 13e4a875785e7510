//! Network side of the pipeline: a client for OpenAI-compatible
//! chat-completions endpoints and an embedded mock server that answers from
//! gold labels.

pub mod client;
pub mod mocksrv;
pub mod wire;

pub use client::{run_evaluation, ChatClient, CompletionResult, EndpointConfig, EvalError, EvalRun};
pub use mocksrv::{serve, GoldStore, MockServer, MockStats, OracleConfig, OracleMode, ShutdownTrigger};
