//! Uniform access to text-generation and embedding endpoints.
//!
//! A [`Gateway`] wraps any [`Backend`] with bounded concurrency (FIFO
//! admission), transparent retry of transient transport failures, per-role
//! call accounting, and a shutdown gate. Backends are pluggable: an
//! OpenAI-compatible HTTP client ([`HttpBackend`]) for real endpoints and a
//! deterministic [`MockBackend`] so the whole pipeline runs offline.

mod http;
mod mock;

pub use http::{HttpBackend, HttpSettings, RoleModels};
pub use mock::{MockBackend, MockSettings};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

/// Which model role a completion request is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Instructor,
    Coder,
    Judge,
    Decontaminator,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Instructor, Role::Coder, Role::Judge, Role::Decontaminator];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Instructor => "instructor",
            Role::Coder => "coder",
            Role::Judge => "judge",
            Role::Decontaminator => "decontaminator",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One text-generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub role: Role,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub stop_sequences: Vec<String>,
}

/// Why the backend stopped generating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Token counts as reported by the backend, when it reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One text-generation response.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

/// A fixed-length embedding with the identity of whatever produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_tag: String,
}

/// Identity of a backend, recorded in run manifests. Secrets never go here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub mode: String,
    pub completion_models: HashMap<String, String>,
    pub embedding_model: String,
    /// Endpoint location with any userinfo/query stripped.
    pub base_url: Option<String>,
}

/// Errors a backend itself can raise. The gateway decides retry policy.
#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    /// Transient: connection refused, timeout, 429/5xx. Retryable.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The endpoint refused the request (context overflow, bad model name).
    /// Not retryable.
    #[error("request rejected: {0}")]
    Rejected(String),
    /// The endpoint answered but the body made no sense. Not retryable.
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    /// Only transport failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Any text-generation + embedding source.
#[async_trait::async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
    fn describe(&self) -> BackendInfo;
}

/// Errors surfaced to gateway callers.
#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("{role} backend unreachable after {attempts} attempts: {message}")]
    BackendUnreachable {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("{role} request rejected (attempt {attempts}): {message}")]
    RequestRejected {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("{role} response malformed (attempt {attempts}): {message}")]
    ResponseMalformed {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("invalid request: {reason}")]
    InvalidRequest { reason: String },
    #[error("gateway is shutting down")]
    ShutdownInProgress,
    #[error("embedding backend unreachable after {attempts} attempts: {message}")]
    EmbeddingUnreachable { attempts: u32, message: String },
    #[error("embedding dimension changed mid-run: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embed called with no texts")]
    EmptyEmbedInput,
}

impl GatewayError {
    /// True for errors that mean the endpoint is gone rather than one call
    /// going wrong; pipelines stop on these.
    pub fn is_fatal_outage(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnreachable { .. }
                | GatewayError::EmbeddingUnreachable { .. }
                | GatewayError::ShutdownInProgress
        )
    }
}

/// Retry policy for transient transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Additional attempts after the first (so total attempts = limit + 1).
    pub retry_limit: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retry_limit: 3,
            initial_backoff_ms: 1_000,
            backoff_multiplier: 2.0,
        }
    }
}

/// Gateway tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Completions/embeddings allowed in flight at once.
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Issued/settled tallies for one call kind, plus token usage where the
/// backend reports it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CallCounts {
    pub issued: u64,
    pub ok: u64,
    pub err: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl CallCounts {
    /// No-loss check: everything issued has settled exactly once.
    pub fn balanced(&self) -> bool {
        self.issued == self.ok + self.err
    }
}

/// Snapshot of per-role completion accounting plus embedding calls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingSnapshot {
    pub instructor: CallCounts,
    pub coder: CallCounts,
    pub judge: CallCounts,
    pub decontaminator: CallCounts,
    pub embed: CallCounts,
}

impl AccountingSnapshot {
    /// No-loss check across every call kind.
    pub fn balanced(&self) -> bool {
        self.instructor.balanced()
            && self.coder.balanced()
            && self.judge.balanced()
            && self.decontaminator.balanced()
            && self.embed.balanced()
    }

    pub fn role(&self, role: Role) -> &CallCounts {
        match role {
            Role::Instructor => &self.instructor,
            Role::Coder => &self.coder,
            Role::Judge => &self.judge,
            Role::Decontaminator => &self.decontaminator,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut CallCounts {
        match role {
            Role::Instructor => &mut self.instructor,
            Role::Coder => &mut self.coder,
            Role::Judge => &mut self.judge,
            Role::Decontaminator => &mut self.decontaminator,
        }
    }
}

/// Permission to run one call; concurrency slot is released on drop.
pub struct SlotGuard {
    _permit: OwnedSemaphorePermit,
}

/// Bounded, retrying, accounted front door to a backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    semaphore: Arc<Semaphore>,
    retry: RetryPolicy,
    accounting: Mutex<AccountingSnapshot>,
    /// 0 until the first successful embed fixes the dimension.
    embed_dim: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight_seen: AtomicUsize,
    shutdown: AtomicBool,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Arc<Self> {
        Arc::new(Gateway {
            backend,
            semaphore: Arc::new(Semaphore::new(config.max_in_flight.max(1))),
            retry: config.retry,
            accounting: Mutex::new(AccountingSnapshot::default()),
            embed_dim: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight_seen: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
        })
    }

    /// Waits for a concurrency slot (FIFO). Errors once shutdown has begun,
    /// including for callers already waiting.
    pub async fn acquire_slot(&self) -> Result<SlotGuard, GatewayError> {
        if self.shutdown.load(Ordering::SeqCst) {
            return Err(GatewayError::ShutdownInProgress);
        }
        let permit = Arc::clone(&self.semaphore)
            .acquire_owned()
            .await
            .map_err(|_| GatewayError::ShutdownInProgress)?;
        Ok(SlotGuard { _permit: permit })
    }

    /// Stops admitting new work and wakes all waiting callers with
    /// [`GatewayError::ShutdownInProgress`].
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.semaphore.close();
    }

    pub fn accounting(&self) -> AccountingSnapshot {
        self.accounting.lock().expect("accounting lock").clone()
    }

    /// Highest concurrent in-flight call count observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.max_in_flight_seen.load(Ordering::SeqCst)
    }

    pub fn backend_info(&self) -> BackendInfo {
        self.backend.describe()
    }

    fn track_enter(&self) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight_seen.fetch_max(now, Ordering::SeqCst);
    }

    fn track_exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    async fn backoff(&self, attempt: u32) {
        let factor = self.retry.backoff_multiplier.max(1.0).powi(attempt as i32);
        let ms = (self.retry.initial_backoff_ms as f64 * factor) as u64;
        tokio::time::sleep(Duration::from_millis(ms)).await;
    }

    /// Sends one completion, retrying transport failures with exponential
    /// backoff. Well-formed responses are never retried.
    pub async fn complete(
        &self,
        request: CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        if request.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest {
                reason: "prompt is empty".to_string(),
            });
        }
        if request.max_new_tokens < 1 {
            return Err(GatewayError::InvalidRequest {
                reason: "max_new_tokens must be ≥ 1".to_string(),
            });
        }
        let role = request.role;
        let _slot = self.acquire_slot().await?;
        self.accounting
            .lock()
            .expect("accounting lock")
            .role_mut(role)
            .issued += 1;
        self.track_enter();
        let result = self.complete_with_retry(&request).await;
        self.track_exit();
        let mut accounting = self.accounting.lock().expect("accounting lock");
        let counts = accounting.role_mut(role);
        match &result {
            Ok(response) => {
                counts.ok += 1;
                if let Some(usage) = &response.usage {
                    counts.prompt_tokens += usage.prompt_tokens;
                    counts.completion_tokens += usage.completion_tokens;
                }
            }
            Err(_) => counts.err += 1,
        }
        result
    }

    async fn complete_with_retry(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, GatewayError> {
        let role = request.role;
        let total_attempts = self.retry.retry_limit + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(request).await {
                Ok(response) if response.finish_reason == FinishReason::Error => {
                    return Err(GatewayError::ResponseMalformed {
                        role,
                        attempts: attempt,
                        message: "backend signalled finish_reason=error".to_string(),
                    });
                }
                Ok(response) => return Ok(response),
                Err(BackendError::Transport(message)) => {
                    if attempt >= total_attempts {
                        return Err(GatewayError::BackendUnreachable {
                            role,
                            attempts: attempt,
                            message,
                        });
                    }
                    self.backoff(attempt - 1).await;
                }
                Err(BackendError::Rejected(message)) => {
                    return Err(GatewayError::RequestRejected {
                        role,
                        attempts: attempt,
                        message,
                    });
                }
                Err(BackendError::Malformed(message)) => {
                    return Err(GatewayError::ResponseMalformed {
                        role,
                        attempts: attempt,
                        message,
                    });
                }
            }
        }
    }

    /// Embeds a batch of texts, one vector per text in input order.
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyEmbedInput);
        }
        let _slot = self.acquire_slot().await?;
        self.accounting.lock().expect("accounting lock").embed.issued += 1;
        self.track_enter();
        let result = self.embed_with_retry(texts).await;
        self.track_exit();
        let mut accounting = self.accounting.lock().expect("accounting lock");
        match &result {
            Ok(_) => accounting.embed.ok += 1,
            Err(_) => accounting.embed.err += 1,
        }
        result
    }

    async fn embed_with_retry(
        &self,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let total_attempts = self.retry.retry_limit + 1;
        let mut attempt = 0;
        let vectors = loop {
            attempt += 1;
            match self.backend.embed(texts).await {
                Ok(vectors) => break vectors,
                Err(BackendError::Transport(message)) => {
                    if attempt >= total_attempts {
                        return Err(GatewayError::EmbeddingUnreachable {
                            attempts: attempt,
                            message,
                        });
                    }
                    self.backoff(attempt - 1).await;
                }
                Err(other) => {
                    return Err(GatewayError::EmbeddingUnreachable {
                        attempts: attempt,
                        message: other.to_string(),
                    });
                }
            }
        };
        if vectors.len() != texts.len() {
            return Err(GatewayError::EmbeddingUnreachable {
                attempts: attempt,
                message: format!("expected {} vectors, got {}", texts.len(), vectors.len()),
            });
        }
        for vector in &vectors {
            let got = vector.values.len();
            let known = self.embed_dim.load(Ordering::SeqCst);
            if known == 0 {
                self.embed_dim.store(got, Ordering::SeqCst);
            } else if got != known {
                return Err(GatewayError::DimensionMismatch {
                    expected: known,
                    got,
                });
            }
        }
        Ok(vectors)
    }
}

/// Cosine similarity of two vectors (0 when either has zero norm).
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += f64::from(*x) * f64::from(*y);
        norm_a += f64::from(*x) * f64::from(*x);
        norm_b += f64::from(*y) * f64::from(*y);
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (norm_a.sqrt() * norm_b.sqrt())
}
