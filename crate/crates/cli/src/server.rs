//! HTTP front end of the ingestion service.
//!
//! - `POST /v1/batches`: one JSON `UplinkBatch`; `X-Api-Key` required.
//! - `GET /v1/records?device_id=&from=&to=`: inclusive range, epoch ms.
//! - `GET /v1/devices`: device ids with stored records.
//! - `GET /v1/health`: liveness probe, no key needed.
//!
//! All writes go through one `RwLock`, so batches from the same device are
//! serialized and readers only ever see whole batches.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use impact_core::ingest::{IngestError, IngestOutcome, IngestService, QueryError, RecordStore, StoreError};
use impact_core::UplinkBatch;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub const API_KEY_HEADER: &str = "x-api-key";

pub type SharedService = Arc<RwLock<IngestService>>;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AckBody {
    pub status: String,
    pub duplicate: bool,
    pub new_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Deserialize)]
pub struct RecordQuery {
    pub device_id: String,
    pub from: i64,
    pub to: i64,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn api_key(headers: &HeaderMap) -> &str {
    headers.get(API_KEY_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("")
}

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/batches", post(ingest))
        .route("/v1/records", get(records))
        .route("/v1/devices", get(devices))
        .with_state(service)
}

async fn health() -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn ingest(State(svc): State<SharedService>, headers: HeaderMap, body: Bytes) -> Response {
    let key = api_key(&headers).to_string();
    if !svc.read().expect("service lock").authorized(&key) {
        return error(StatusCode::UNAUTHORIZED, "unauthorized");
    }
    let batch: UplinkBatch = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed batch: {e}")),
    };
    let result = tokio::task::spawn_blocking(move || svc.write().expect("service lock").ingest_batch(&batch, &key)).await;
    match result {
        Ok(Ok(IngestOutcome::Stored { new_records })) => {
            Json(AckBody { status: "ack".into(), duplicate: false, new_records }).into_response()
        }
        Ok(Ok(IngestOutcome::Duplicate)) => {
            Json(AckBody { status: "ack".into(), duplicate: true, new_records: 0 }).into_response()
        }
        Ok(Err(IngestError::Unauthorized)) => error(StatusCode::UNAUTHORIZED, "unauthorized"),
        Ok(Err(e @ IngestError::Malformed(_))) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e @ IngestError::Io(_))) => {
            log::error!("{e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn records(
    State(svc): State<SharedService>,
    headers: HeaderMap,
    query: Result<Query<RecordQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let svc = svc.read().expect("service lock");
    if !svc.authorized(api_key(&headers)) {
        return error(StatusCode::UNAUTHORIZED, "unauthorized");
    }
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match svc.query_records(&q.device_id, q.from, q.to, api_key(&headers)) {
        Ok(recs) => Json(recs).into_response(),
        Err(QueryError::Unauthorized) => error(StatusCode::UNAUTHORIZED, "unauthorized"),
        Err(e @ QueryError::Range { .. }) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn devices(State(svc): State<SharedService>, headers: HeaderMap) -> Response {
    let svc = svc.read().expect("service lock");
    if !svc.authorized(api_key(&headers)) {
        return error(StatusCode::UNAUTHORIZED, "unauthorized");
    }
    Json(svc.store().devices()).into_response()
}

/// Opens the store in `data_dir` (or memory) behind the given keys.
pub fn open_service(data_dir: Option<&Path>, keys: &[String]) -> Result<SharedService, StoreError> {
    let store = match data_dir {
        Some(dir) => RecordStore::open(dir)?,
        None => RecordStore::in_memory(),
    };
    Ok(Arc::new(RwLock::new(IngestService::new(keys.iter().cloned(), store))))
}

/// Serves until `shutdown` resolves, then syncs the log.
pub async fn serve(
    listener: TcpListener,
    service: SharedService,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(service.clone());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    service.write().expect("service lock").store_mut().sync()
}

/// A server running on a background thread, for tests and embedding.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub data_dir: Option<PathBuf>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests, waits for in-flight ones and syncs the log.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpawnError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
}

/// Starts a server on `127.0.0.1:port` (0 picks a free port).
pub fn spawn_server(data_dir: Option<&Path>, keys: &[String], port: u16) -> Result<ServerHandle, SpawnError> {
    let service = open_service(data_dir, keys)?;
    let std_listener = std::net::TcpListener::bind(("127.0.0.1", port)).map_err(SpawnError::Bind)?;
    std_listener.set_nonblocking(true).map_err(SpawnError::Bind)?;
    let addr = std_listener.local_addr().map_err(SpawnError::Bind)?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = TcpListener::from_std(std_listener)?;
            serve(listener, service, async move {
                let _ = rx.await;
            })
            .await
        })
    });
    Ok(ServerHandle { addr, data_dir: data_dir.map(Path::to_path_buf), shutdown: Some(tx), thread: Some(thread) })
}
