//! HTTP service: case submission, live case event streams, the human review
//! queue and the metrics report. Everything lives under `/v1`; JSON bodies
//! carry `schema_version` and every response has an `x-schema-version`
//! header.
//!
//! Cases run on their own threads, so a slow backend never holds up
//! handlers for other cases.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::fs;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;
use tracing::{info, warn};

use chronoreason::backends::Backend;
use chronoreason::knowledge::Corpus;
use chronoreason::metrics::{build_report, GroupField, MetricsError};
use chronoreason::orchestrator::{
    AgentSpec, AlwaysApprove, Approver, AutoApprover, CaseConfig, CaseEvent, CaseInput, CaseLog,
    CaseRecord, HumanApprover, Orchestrator, QueueError, ReviewQueue, Verdict,
};
use chronoreason::store::RunStore;

use crate::config::ApproverKind;

pub const SCHEMA_VERSION: u32 = 1;

/// How long one blocking read of a case log waits before the stream loops.
const FLUSH_INTERVAL: Duration = Duration::from_millis(250);

pub struct ServiceOptions {
    pub case_config: CaseConfig,
    pub roster: Vec<AgentSpec>,
    pub approver: ApproverKind,
    pub review_timeout: Duration,
    pub token: Option<String>,
}

pub struct AppState {
    backend: Box<dyn Backend>,
    corpus: Corpus,
    store: RunStore,
    queue: ReviewQueue,
    cases: Mutex<BTreeMap<String, Arc<CaseLog>>>,
    next_id: AtomicU64,
    options: ServiceOptions,
}

impl AppState {
    pub fn new(backend: Box<dyn Backend>, corpus: Corpus, store: RunStore, mut options: ServiceOptions) -> Self {
        // subscribers should see expert steps as they happen
        options.case_config.live_events = true;
        Self {
            backend,
            corpus,
            store,
            queue: ReviewQueue::new(),
            cases: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            options,
        }
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    fn orchestrator(&self) -> Orchestrator<'_> {
        Orchestrator::new(
            self.options.case_config.clone(),
            self.backend.as_ref(),
            &self.corpus,
            self.options.roster.clone(),
        )
        .with_store(&self.store)
    }

    /// The live log of a case, or one rebuilt from the store for cases run
    /// by an earlier process.
    fn find_log(&self, case_id: &str) -> Option<Arc<CaseLog>> {
        if let Some(log) = self.cases.lock().expect("case map lock").get(case_id) {
            return Some(Arc::clone(log));
        }
        if !valid_id(case_id) {
            return None;
        }
        let record: CaseRecord = self.store.load_case(case_id).ok()?;
        let log = CaseLog::new(case_id);
        let path = self.store.root().join("cases").join(format!("{case_id}.events.jsonl"));
        for line in fs::read_to_string(path).unwrap_or_default().lines() {
            match serde_json::from_str::<CaseEvent>(line) {
                Ok(e) => {
                    log.append(e.kind);
                }
                Err(e) => warn!(case = case_id, error = %e, "skipping unreadable case event"),
            }
        }
        log.set_record(record);
        log.close();
        Some(Arc::new(log))
    }

    fn case_state(&self, case_id: &str, log: &CaseLog) -> &'static str {
        // the record is snapshotted while the case runs; only a closed log
        // means the case is over
        if log.is_closed() {
            "decided"
        } else if self.queue.pending().iter().any(|i| i.case_id == case_id) {
            "pending_review"
        } else {
            "running"
        }
    }

    fn fresh_id(&self, taken: &BTreeMap<String, Arc<CaseLog>>) -> String {
        loop {
            let n = self.next_id.fetch_add(1, Ordering::Relaxed);
            let id = format!("case-{n:04}");
            let on_disk = self.store.root().join("cases").join(format!("{id}.json")).exists();
            if !taken.contains_key(&id) && !on_disk {
                return id;
            }
        }
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

/// Adds `schema_version` to a JSON object.
fn versioned(mut v: Value) -> Json<Value> {
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    Json(v)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: BTreeMap<String, String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: BTreeMap::new(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }

    fn bad_fields(fields: BTreeMap<String, String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: "malformed request body".into(),
            fields,
        }
    }

    fn bad_field(field: &str, message: impl Into<String>) -> Self {
        Self::bad_fields(BTreeMap::from([(field.to_string(), message.into())]))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = versioned(json!({ "error": self.message, "fields": self.fields }));
        (self.status, body).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn parse_object(body: &Bytes) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_field("<body>", "expected a JSON object")),
        Err(e) => Err(ApiError::bad_field("<body>", format!("invalid JSON: {e}"))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/cases", post(submit_case))
        .route("/v1/cases/{id}", get(get_case))
        .route("/v1/cases/{id}/graphs/{agent}", get(get_graph))
        .route("/v1/cases/{id}/events", get(case_events))
        .route("/v1/review/pending", get(pending_reviews))
        .route("/v1/review/{case}/decision", post(post_decision))
        .route("/v1/metrics/report", get(metrics_report))
        .layer(middleware::from_fn_with_state(Arc::clone(&state), authorize))
        .layer(middleware::map_response(stamp_version))
        .with_state(state)
}

async fn stamp_version(mut res: Response) -> Response {
    res.headers_mut().insert("x-schema-version", HeaderValue::from(SCHEMA_VERSION));
    res
}

#[derive(Deserialize)]
struct TokenQuery {
    access_token: Option<String>,
}

/// Checks the static bearer token when one is configured. Browsers cannot
/// set headers on event streams, so `?access_token=` works too.
async fn authorize(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(token) = state.options.token.as_deref() else {
        return next.run(req).await;
    };
    let from_header = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let from_query = Query::<TokenQuery>::try_from_uri(req.uri()).ok().and_then(|q| q.0.access_token);
    if from_header == Some(token) || from_query.as_deref() == Some(token) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response()
    }
}

async fn submit_case(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let mut obj = parse_object(&body)?;
    let mut fields = BTreeMap::new();
    match obj.get("query") {
        Some(Value::String(q)) if !q.trim().is_empty() => {}
        Some(Value::String(_)) => {
            fields.insert("query".into(), "must not be empty".into());
        }
        Some(_) => {
            fields.insert("query".into(), "must be a string".into());
        }
        None => {
            fields.insert("query".into(), "required".into());
        }
    }
    match obj.get("case_id") {
        None | Some(Value::Null) => {}
        Some(Value::String(id)) if valid_id(id) => {}
        Some(_) => {
            fields.insert("case_id".into(), "letters, digits, '-', '_' and '.' only".into());
        }
    }
    if !fields.is_empty() {
        return Err(ApiError::bad_fields(fields));
    }

    let mut cases = state.cases.lock().expect("case map lock");
    let case_id = match obj.get("case_id").and_then(Value::as_str) {
        Some(id) => id.to_string(),
        None => state.fresh_id(&cases),
    };
    obj.insert("case_id".into(), Value::String(case_id.clone()));
    let case: CaseInput = serde_path_to_error::deserialize(Value::Object(obj)).map_err(|e| {
        let path = e.path().to_string();
        ApiError::bad_field(&path, e.into_inner().to_string())
    })?;
    if cases.contains_key(&case_id) || state.store.root().join("cases").join(format!("{case_id}.json")).exists() {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("case {case_id:?} already exists")));
    }
    let log = Arc::new(state.orchestrator().open_log(&case_id));
    cases.insert(case_id.clone(), Arc::clone(&log));
    drop(cases);

    let worker = Arc::clone(&state);
    thread::Builder::new()
        .name(format!("case-{case_id}"))
        .spawn(move || {
            let queue_approver;
            let approver: &dyn Approver = match worker.options.approver {
                ApproverKind::Human => {
                    queue_approver = HumanApprover::new(&worker.queue, worker.options.review_timeout);
                    &queue_approver
                }
                ApproverKind::Auto => &AutoApprover,
                ApproverKind::Always => &AlwaysApprove,
            };
            let rec = worker.orchestrator().run_case(&case, approver, &log);
            info!(case = %rec.case_id, status = ?rec.decision.as_ref().map(|d| d.status), "case finished");
        })
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot start case: {e}")))?;

    info!(case = %case_id, "case submitted");
    Ok((
        StatusCode::ACCEPTED,
        versioned(json!({
            "case_id": case_id,
            "state": "running",
            "events": format!("/v1/cases/{case_id}/events"),
        })),
    )
        .into_response())
}

async fn get_case(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let log = state.find_log(&id).ok_or_else(|| ApiError::not_found("case", &id))?;
    let review = state.queue.history(&id).pop();
    Ok(versioned(json!({
        "case_id": id,
        "state": state.case_state(&id, &log),
        "event_count": log.len(),
        "graphs": log.graph_ids(),
        "review": review,
        "record": log.record(),
    }))
    .into_response())
}

async fn get_graph(State(state): State<Arc<AppState>>, Path((id, agent)): Path<(String, String)>) -> ApiResult {
    let log = state.find_log(&id).ok_or_else(|| ApiError::not_found("case", &id))?;
    let graph_id = format!("{id}.{agent}");
    let graph = match log.graph(&agent) {
        Some(g) => g,
        None if valid_id(&agent) => state
            .store
            .load_graph(&graph_id)
            .map_err(|_| ApiError::not_found("agent", &agent))?,
        None => return Err(ApiError::not_found("agent", &agent)),
    };
    Ok(versioned(json!({
        "case_id": id,
        "agent_id": agent,
        "graph_id": graph_id,
        "graph": graph.to_json_value(),
    }))
    .into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    offset: Option<u64>,
}

async fn case_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let log = state.find_log(&id).ok_or_else(|| ApiError::not_found("case", &id))?;
    // a reconnecting EventSource resumes after the last id it saw
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1);
    let offset = q.offset.or(resume).unwrap_or(0);
    Ok(Sse::new(event_stream(log, offset)).keep_alive(KeepAlive::default()))
}

/// Replays the log from `offset`, follows it live and ends once the log is
/// closed and drained.
fn event_stream(log: Arc<CaseLog>, offset: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(Some(offset), move |cursor| {
        let log = Arc::clone(&log);
        async move {
            let offset = cursor?;
            let reader = Arc::clone(&log);
            let (batch, closed) = tokio::task::spawn_blocking(move || reader.wait_from(offset, FLUSH_INTERVAL))
                .await
                .unwrap_or((Vec::new(), true));
            let next = offset + batch.len() as u64;
            // wait_from hands back everything that exists once it sees the
            // log closed, so nothing can follow
            let cursor = (!closed).then_some(next);
            if batch.is_empty() && closed {
                return None;
            }
            let events: Vec<Result<Event, Infallible>> = batch
                .iter()
                .map(|e| {
                    Ok(Event::default()
                        .id(e.offset.to_string())
                        .event("case_event")
                        .data(serde_json::to_string(e).expect("event serializes")))
                })
                .collect();
            Some((stream::iter(events), cursor))
        }
    })
    .flatten()
}

async fn pending_reviews(State(state): State<Arc<AppState>>) -> ApiResult {
    Ok(versioned(json!({ "items": state.queue.pending() })).into_response())
}

async fn post_decision(State(state): State<Arc<AppState>>, Path(case_id): Path<String>, body: Bytes) -> ApiResult {
    if !state.queue.knows(&case_id) && state.find_log(&case_id).is_none() {
        return Err(ApiError::not_found("case", &case_id));
    }
    let obj = parse_object(&body)?;
    let mut fields = BTreeMap::new();
    let feedback = match obj.get("feedback") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            fields.insert("feedback".into(), "must be a string".into());
            String::new()
        }
    };
    let verdict = match obj.get("verdict").and_then(Value::as_str) {
        Some("approve") => Some(Verdict::Approve { feedback: feedback.clone() }),
        Some("reject") if feedback.trim().is_empty() => {
            fields.entry("feedback".into()).or_insert_with(|| "required when rejecting".into());
            None
        }
        Some("reject") => Some(Verdict::Reject { feedback: feedback.clone() }),
        Some(_) => {
            fields.insert("verdict".into(), "must be \"approve\" or \"reject\"".into());
            None
        }
        None => {
            fields.insert("verdict".into(), "required".into());
            None
        }
    };
    let verdict = match verdict {
        Some(v) if fields.is_empty() => v,
        _ => return Err(ApiError::bad_fields(fields)),
    };
    match state.queue.decide(&case_id, verdict) {
        Ok(item) => Ok(versioned(json!({ "item": item })).into_response()),
        Err(QueueError::UnknownCase(_)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("case {case_id:?} is not awaiting review"),
        )),
        Err(QueueError::AlreadyDecided(_)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("review of case {case_id:?} is already decided"),
        )),
    }
}

#[derive(Deserialize)]
struct ReportQuery {
    period: Option<String>,
    group_by: Option<String>,
}

async fn metrics_report(State(state): State<Arc<AppState>>, Query(q): Query<ReportQuery>) -> ApiResult {
    let group_by = match q.group_by.as_deref() {
        Some(s) => GroupField::parse_list(s).map_err(|e| ApiError::bad_field("group_by", e.to_string()))?,
        None => Vec::new(),
    };
    let period = q.period.as_deref().filter(|p| !p.is_empty());
    let runs = state
        .store
        .load_runs()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match build_report(&runs, period, &group_by) {
        Ok(report) => Ok(versioned(json!({ "report": report })).into_response()),
        Err(MetricsError::EmptySelection) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no runs for period {:?}", period.unwrap_or("*")),
        )),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, e.to_string())),
    }
}

/// A service running on its own runtime thread.
pub struct ServiceHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
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
        self.shutdown_now();
    }
}

/// Binds `bind` (port 0 picks a free port) and serves in the background.
pub fn spawn(state: AppState, bind: &str) -> std::io::Result<ServiceHandle> {
    let state = Arc::new(state);
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::clone(&state));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let thread = thread::Builder::new().name("service".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    warn!(error = %e, "cannot adopt listener");
                    return;
                }
            };
            let served = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = served.await {
                warn!(error = %e, "service stopped with an error");
            }
        });
        // open event streams would otherwise keep the runtime alive
        runtime.shutdown_timeout(Duration::from_millis(100));
    })?;
    Ok(ServiceHandle {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until Ctrl-C.
pub fn serve_forever(state: AppState, bind: &str) -> anyhow::Result<()> {
    let state = Arc::new(state);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
