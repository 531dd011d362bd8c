//! The model as a remote, label-only classification service, and the client
//! side that queries it during extraction.

use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fstitch_core::{model_digest, ClassificationOracle, Model, OracleError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

pub const DEFAULT_MAX_BATCH: usize = 64;
pub const BIND_ENV: &str = "FSTITCH_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("max_batch must be at least 1")]
    MaxBatch,
    #[error("failed to start runtime")]
    Runtime(#[source] std::io::Error),
}

struct AppState {
    model: Arc<Model>,
    digest: String,
    max_batch: usize,
    served: Arc<AtomicU64>,
}

fn reject(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ClassifyRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let n = req.inputs.len();
    if n == 0 {
        return reject(StatusCode::BAD_REQUEST, "inputs must hold at least one vector");
    }
    if n > state.max_batch {
        return reject(
            StatusCode::BAD_REQUEST,
            format!("batch of {n} exceeds max_batch {}", state.max_batch),
        );
    }
    let d = state.model.input_dim();
    if let Some((i, v)) = req.inputs.iter().enumerate().find(|(_, v)| v.len() != d) {
        return reject(
            StatusCode::BAD_REQUEST,
            format!("input {i} has length {}, expected {d}", v.len()),
        );
    }
    let flat: Vec<f64> = req.inputs.into_iter().flatten().collect();
    let model = Arc::clone(&state.model);
    let result = tokio::task::spawn_blocking(move || {
        let batch = Tensor::new(vec![n, d], flat).map_err(|e| e.to_string())?;
        model.predict_batch(&batch).map_err(|e| e.to_string())
    })
    .await;
    match result {
        Ok(Ok(labels)) => {
            state.served.fetch_add(1, Ordering::Relaxed);
            Json(ClassifyResponse { labels }).into_response()
        }
        Ok(Err(e)) => reject(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        digest: state.digest.clone(),
    })
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/classify", post(classify))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// A running service. Dropping the handle stops the server.
pub struct ServiceHandle {
    addr: SocketAddr,
    served: Arc<AtomicU64>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of `/classify` requests answered successfully.
    pub fn requests_served(&self) -> u64 {
        self.served.load(Ordering::Relaxed)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the server exits on its own (Ctrl-C, when enabled).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub max_batch: usize,
    /// Also shut down on SIGINT.
    pub ctrl_c: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            max_batch: DEFAULT_MAX_BATCH,
            ctrl_c: false,
        }
    }
}

/// Starts serving `model` on `bind` (port 0 picks a free port) in a
/// background thread with its own runtime.
pub fn serve(model: Model, bind: &str, opts: &ServeOptions) -> Result<ServiceHandle, ServeError> {
    if opts.max_batch == 0 {
        return Err(ServeError::MaxBatch);
    }
    let bind_err = |source| ServeError::Bind {
        addr: bind.to_string(),
        source,
    };
    let listener = TcpListener::bind(bind).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    let served = Arc::new(AtomicU64::new(0));
    let state = Arc::new(AppState {
        digest: model_digest(&model).short(),
        model: Arc::new(model),
        max_batch: opts.max_batch,
        served: Arc::clone(&served),
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(ServeError::Runtime)?;
    let (tx, rx) = oneshot::channel::<()>();
    let ctrl_c = opts.ctrl_c;
    // Convert inside the runtime so the listener registers with its reactor.
    let listener = runtime
        .block_on(async { tokio::net::TcpListener::from_std(listener) })
        .map_err(bind_err)?;
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let stop = async move {
                if ctrl_c {
                    tokio::select! {
                        _ = rx => {}
                        _ = tokio::signal::ctrl_c() => log::info!("interrupted, shutting down"),
                    }
                } else {
                    let _ = rx.await;
                }
            };
            if let Err(e) = axum::serve(listener, router(state)).with_graceful_shutdown(stop).await {
                log::error!("server error: {e}");
            }
        });
    });
    log::info!("serving on http://{addr}");
    Ok(ServiceHandle {
        addr,
        served,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// A [`ClassificationOracle`] backed by a remote `/classify` endpoint.
pub struct RemoteOracle {
    agent: ureq::Agent,
    url: String,
    max_batch: usize,
    queries: u64,
}

impl RemoteOracle {
    /// `endpoint` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(endpoint: &str, timeout: Duration, max_batch: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/classify", endpoint.trim_end_matches('/')),
            max_batch: max_batch.max(1),
            queries: 0,
        }
    }

    fn post_chunk(&self, rows: &[&[f64]]) -> Result<Vec<usize>, OracleError> {
        let req = ClassifyRequest {
            inputs: rows.iter().map(|r| r.to_vec()).collect(),
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        if status.is_client_error() {
            let msg = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
            return Err(OracleError::Rejected(format!("HTTP {status}: {msg}")));
        }
        if !status.is_success() {
            return Err(OracleError::Transport(format!("HTTP {status}: {text}")));
        }
        let body: ClassifyResponse =
            serde_json::from_str(&text).map_err(|e| OracleError::Malformed(e.to_string()))?;
        if body.labels.len() != rows.len() {
            return Err(OracleError::Malformed(format!(
                "{} labels for {} inputs",
                body.labels.len(),
                rows.len()
            )));
        }
        Ok(body.labels)
    }
}

impl ClassificationOracle for RemoteOracle {
    fn classify(&mut self, inputs: &Tensor) -> Result<Vec<usize>, OracleError> {
        let rows: Vec<&[f64]> = inputs.row_iter().collect();
        let mut labels = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(self.max_batch) {
            labels.extend(self.post_chunk(chunk)?);
            self.queries += chunk.len() as u64;
        }
        Ok(labels)
    }

    fn queries_used(&self) -> u64 {
        self.queries
    }
}

/// Fetches `/healthz`.
pub fn health(endpoint: &str, timeout: Duration) -> Result<Health, OracleError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let url = format!("{}/healthz", endpoint.trim_end_matches('/'));
    let text = agent
        .get(&url)
        .call()
        .map_err(|e| OracleError::Transport(e.to_string()))?
        .body_mut()
        .read_to_string()
        .map_err(|e| OracleError::Transport(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| OracleError::Malformed(e.to_string()))
}

/// Price of classification requests, per thousand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub price_per_1000: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { price_per_1000: 0.10 }
    }
}

pub fn cost_estimate(n_queries: u64, cost: &CostModel) -> f64 {
    n_queries as f64 * cost.price_per_1000 / 1000.0
}
