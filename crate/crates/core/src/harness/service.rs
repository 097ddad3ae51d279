//! HTTP+JSON service for collecting human votes.
//!
//! Votes are appended to a JSON-lines log and synced before the response is
//! sent; the log is replayed on startup.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::humaneval::{votes_csv, Decision, HumanEvalPlan, HumanVote, PlanItem};
use crate::error::{Error, Result};

struct VoteLog {
    file: File,
    votes: Vec<HumanVote>,
    seen: HashSet<(String, String)>,
}

pub struct ServiceState {
    plan: HumanEvalPlan,
    /// Pair ids per rater, in presentation order.
    queues: HashMap<String, Vec<String>>,
    items: HashMap<String, PlanItem>,
    log: Mutex<VoteLog>,
}

impl ServiceState {
    /// Opens (or creates) the vote log and replays it. A torn final line from
    /// an interrupted append is ignored; it was never acknowledged.
    pub fn open(plan: HumanEvalPlan, log_path: &Path) -> Result<Self> {
        plan.check()?;
        let mut votes = Vec::new();
        let mut seen = HashSet::new();
        if log_path.exists() {
            let reader = BufReader::new(File::open(log_path).map_err(|e| Error::io(log_path, e))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(log_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<HumanVote>(&line) {
                    Ok(v) => {
                        if seen.insert((v.rater_id.clone(), v.pair_id.clone())) {
                            votes.push(v);
                        }
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable vote: {e}", log_path.display(), i + 1),
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        // terminate a torn line so the next append starts cleanly
        let len = file.metadata().map_err(|e| Error::io(log_path, e))?.len();
        if len > 0 && !std::fs::read(log_path).map_err(|e| Error::io(log_path, e))?.ends_with(b"\n") {
            file.write_all(b"\n").map_err(|e| Error::io(log_path, e))?;
        }
        let queues = plan
            .rater_ids
            .iter()
            .map(|r| {
                let ids = plan.pairs_for(r).unwrap_or_default().into_iter().map(|i| i.pair_id.clone()).collect();
                (r.clone(), ids)
            })
            .collect();
        let items = plan.items.iter().map(|i| (i.pair_id.clone(), i.clone())).collect();
        Ok(Self {
            plan,
            queues,
            items,
            log: Mutex::new(VoteLog { file, votes, seen }),
        })
    }

    pub fn votes(&self) -> Vec<HumanVote> {
        self.log.lock().expect("vote log lock").votes.clone()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NextPair {
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ref_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_image: Option<String>,
    pub votes_cast: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteRequest {
    pub pair_id: String,
    pub decision: Decision,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RaterProgress {
    pub votes_cast: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Progress {
    pub votes_cast: usize,
    pub votes_expected: usize,
    pub raters: BTreeMap<String, RaterProgress>,
}

fn problem(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn cast_by(log: &VoteLog, rater: &str, queue: &[String]) -> usize {
    queue
        .iter()
        .filter(|p| log.seen.contains(&(rater.to_string(), (*p).clone())))
        .count()
}

async fn next_pair(State(s): State<Arc<ServiceState>>, UrlPath(rater): UrlPath<String>) -> Response {
    let Some(queue) = s.queues.get(&rater) else {
        return problem(StatusCode::NOT_FOUND, format!("unknown rater '{rater}'"));
    };
    let log = s.log.lock().expect("vote log lock");
    let cast = cast_by(&log, &rater, queue);
    let next = queue.iter().find(|p| !log.seen.contains(&(rater.clone(), (*p).clone())));
    let body = match next {
        None => NextPair {
            complete: true,
            pair_id: None,
            ref_image: None,
            target_image: None,
            votes_cast: cast,
            total: queue.len(),
        },
        Some(p) => NextPair {
            complete: false,
            pair_id: Some(p.clone()),
            ref_image: Some(format!("/images/{p}/ref")),
            target_image: Some(format!("/images/{p}/target")),
            votes_cast: cast,
            total: queue.len(),
        },
    };
    Json(body).into_response()
}

async fn vote(
    State(s): State<Arc<ServiceState>>,
    UrlPath(rater): UrlPath<String>,
    Json(req): Json<VoteRequest>,
) -> Response {
    let Some(queue) = s.queues.get(&rater) else {
        return problem(StatusCode::NOT_FOUND, format!("unknown rater '{rater}'"));
    };
    if !queue.contains(&req.pair_id) {
        return problem(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("pair '{}' is not assigned to {rater}", req.pair_id),
        );
    }
    let mut log = s.log.lock().expect("vote log lock");
    let key = (rater.clone(), req.pair_id.clone());
    if log.seen.contains(&key) {
        return problem(StatusCode::CONFLICT, format!("{rater} already voted on {}", req.pair_id));
    }
    let v = HumanVote {
        rater_id: rater.clone(),
        pair_id: req.pair_id,
        decision: req.decision,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
    };
    let mut line = serde_json::to_string(&v).expect("vote serializes");
    line.push('\n');
    if let Err(e) = log.file.write_all(line.as_bytes()).and_then(|_| log.file.sync_data()) {
        return problem(StatusCode::INTERNAL_SERVER_ERROR, format!("vote not persisted: {e}"));
    }
    log.seen.insert(key);
    log.votes.push(v);
    let cast = cast_by(&log, &rater, queue);
    Json(json!({ "recorded": true, "votes_cast": cast, "total": queue.len() })).into_response()
}

async fn progress(State(s): State<Arc<ServiceState>>) -> Json<Progress> {
    let log = s.log.lock().expect("vote log lock");
    let raters = s
        .queues
        .iter()
        .map(|(r, q)| {
            (
                r.clone(),
                RaterProgress {
                    votes_cast: cast_by(&log, r, q),
                    total: q.len(),
                },
            )
        })
        .collect();
    Json(Progress {
        votes_cast: log.votes.len(),
        votes_expected: s.plan.expected_votes(),
        raters,
    })
}

async fn export(State(s): State<Arc<ServiceState>>) -> Response {
    let votes = s.votes();
    match votes_csv(&votes) {
        Ok(body) => ([(header::CONTENT_TYPE, "text/csv")], body).into_response(),
        Err(e) => problem(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn image(State(s): State<Arc<ServiceState>>, UrlPath((pair, side)): UrlPath<(String, String)>) -> Response {
    let Some(item) = s.items.get(&pair) else {
        return problem(StatusCode::NOT_FOUND, format!("unknown pair '{pair}'"));
    };
    let path = match side.as_str() {
        "ref" => &item.ref_path,
        "target" => &item.target_path,
        _ => return problem(StatusCode::NOT_FOUND, "side must be 'ref' or 'target'"),
    };
    let path = PathBuf::from(path);
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) => return problem(StatusCode::NOT_FOUND, format!("image unavailable: {e}")),
    };
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    };
    ([(header::CONTENT_TYPE, mime)], bytes).into_response()
}

pub fn router(state: Arc<ServiceState>, static_dir: Option<&Path>) -> Router {
    let r = Router::new()
        .route("/session/{rater}/next", get(next_pair))
        .route("/session/{rater}/vote", post(vote))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .route("/images/{pair}/{side}", get(image))
        .with_state(state);
    match static_dir {
        Some(dir) => r.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => r,
    }
}

/// Binds and serves until the process is stopped. Returns the bound
/// address through `on_bind` first, which makes port 0 usable.
pub async fn serve_humaneval(
    plan: HumanEvalPlan,
    log_path: &Path,
    addr: SocketAddr,
    static_dir: Option<&Path>,
    on_bind: impl FnOnce(SocketAddr),
) -> Result<()> {
    let state = Arc::new(ServiceState::open(plan, log_path)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::validation(format!("cannot bind {addr}: {e}")))?;
    let bound = listener
        .local_addr()
        .map_err(|e| Error::validation(format!("no local address: {e}")))?;
    on_bind(bound);
    axum::serve(listener, router(state, static_dir))
        .await
        .map_err(|e| Error::validation(format!("server error: {e}")))
}
