//! HTTP session service for interactive and remotely driven sessions.
//!
//! Routes, all under `/v1`:
//!
//! | method | path                          | purpose                           |
//! |--------|-------------------------------|-----------------------------------|
//! | POST   | /sessions                     | create, runs round 1              |
//! | GET    | /sessions/{id}                | current state                     |
//! | POST   | /sessions/{id}/feedback       | one round with a human caption    |
//! | POST   | /sessions/{id}/auto-step      | one round with simulator feedback |
//! | GET    | /galleries                    | galleries and known triplets      |
//! | GET    | /images/{id}?gallery=         | image bytes                       |
//!
//! Sessions live in a redb file as JSON so they survive restarts. Mutations
//! on one session are serialized by a per-session mutex; reads go straight to
//! the store. Blind sessions never expose target ids, target ranks or the
//! raw trace.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use percent_encoding::{percent_decode_str, utf8_percent_encode, NON_ALPHANUMERIC};
use redb::{ReadableDatabase, TableDefinition};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::composer::{local_path, Caption, Composer};
use crate::config::SessionMode;
use crate::engine::{self, EvalConfig, GallerySet, QueryTriplet, SessionStatus, SessionTrace};
use crate::error::{Error, Result};
use crate::gallery::EmbeddingGallery;
use crate::simulator::{Feedback, Simulator, SimulatorKind};

const SESSIONS: TableDefinition<&str, &str> = TableDefinition::new("sessions");
const MAX_BODY: u64 = 1 << 20;
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

fn store_err(e: impl std::fmt::Display) -> Error {
    Error::Store(e.to_string())
}

/// Session records keyed by session id.
#[derive(Debug)]
pub struct SessionStore {
    db: redb::Database,
}

impl SessionStore {
    pub fn open(path: &Path) -> Result<Self> {
        let db = redb::Database::create(path).map_err(store_err)?;
        let txn = db.begin_write().map_err(store_err)?;
        txn.open_table(SESSIONS).map_err(store_err)?;
        txn.commit().map_err(store_err)?;
        Ok(Self { db })
    }

    pub fn get(&self, session_id: &str) -> Result<Option<SessionRecord>> {
        let txn = self.db.begin_read().map_err(store_err)?;
        let table = txn.open_table(SESSIONS).map_err(store_err)?;
        let Some(guard) = table.get(session_id).map_err(store_err)? else {
            return Ok(None);
        };
        Ok(Some(serde_json::from_str(guard.value())?))
    }

    pub fn put(&self, record: &SessionRecord) -> Result<()> {
        let json = serde_json::to_string(record)?;
        let txn = self.db.begin_write().map_err(store_err)?;
        {
            let mut table = txn.open_table(SESSIONS).map_err(store_err)?;
            table
                .insert(record.session_id.as_str(), json.as_str())
                .map_err(store_err)?;
        }
        txn.commit().map_err(store_err)
    }

    pub fn len(&self) -> Result<u64> {
        use redb::ReadableTableMetadata;
        let txn = self.db.begin_read().map_err(store_err)?;
        let table = txn.open_table(SESSIONS).map_err(store_err)?;
        table.len().map_err(store_err)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub mode: SessionMode,
    pub created_at_ms: u64,
    pub expires_at_ms: u64,
    pub ad_hoc: bool,
    pub trace: SessionTrace,
    /// Responses already given, keyed by idempotency key.
    #[serde(default)]
    pub idempotent: BTreeMap<String, Value>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub mode: SessionMode,
    pub ttl: Duration,
    pub token: Option<String>,
    pub cors_origin: String,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            mode: SessionMode::Study,
            ttl: Duration::from_secs(24 * 3600),
            token: None,
            cors_origin: "*".into(),
        }
    }
}

/// Everything the handlers share.
pub struct ServiceState {
    galleries: GallerySet,
    triplets: BTreeMap<String, QueryTriplet>,
    composer: Composer,
    simulator: Option<Simulator>,
    base_config: EvalConfig,
    options: ServiceOptions,
    store: SessionStore,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    http: ureq::Agent,
}

impl std::fmt::Debug for ServiceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceState")
            .field("galleries", &self.galleries.ids().collect::<Vec<_>>())
            .field("triplets", &self.triplets.len())
            .field("options", &self.options)
            .finish_non_exhaustive()
    }
}

/// A response before it is written to the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    fn json(status: u16, value: &Value) -> Self {
        Self {
            status,
            content_type: "application/json".into(),
            body: serde_json::to_vec(value).expect("json value serializes"),
        }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self::json(status, &json!({"code": code, "message": message.into()}))
    }

    pub fn json_body(&self) -> Option<Value> {
        serde_json::from_slice(&self.body).ok()
    }
}

/// A request reduced to what the handlers need.
#[derive(Debug, Clone, Default)]
pub struct Call {
    pub method: String,
    /// Path and query as received, e.g. `/v1/images/a%20b?gallery=g`.
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Call {
    pub fn new(method: &str, url: &str) -> Self {
        Self {
            method: method.into(),
            url: url.into(),
            ..Self::default()
        }
    }

    pub fn with_json(mut self, body: &Value) -> Self {
        self.body = serde_json::to_vec(body).expect("json value serializes");
        self
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn error_reply(e: &Error) -> Reply {
    match e {
        Error::Round { source, .. } => error_reply(source),
        Error::UnknownImage(_) => Reply::error(404, "not_found", e.to_string()),
        Error::SessionTerminal => Reply::error(409, "session_terminal", e.to_string()),
        Error::Transport { .. } => Reply::error(503, "upstream_unavailable", e.to_string()),
        Error::InvalidCaption(_)
        | Error::InvalidRequest(_)
        | Error::Config(_)
        | Error::Json(_)
        | Error::DimensionMismatch { .. }
        | Error::TargetMissing
        | Error::AllExcluded => Reply::error(400, "invalid_request", e.to_string()),
        _ => Reply::error(500, "internal", e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    gallery_id: Option<String>,
    #[serde(default)]
    triplet_id: Option<String>,
    #[serde(default)]
    reference_id: Option<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    target_ids: Option<Vec<String>>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    mode: Option<SessionMode>,
    /// Partial evaluation config merged over the service defaults.
    #[serde(default)]
    config: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    caption: String,
    #[serde(default)]
    idempotency_key: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AutoStepBody {
    #[serde(default)]
    idempotency_key: Option<String>,
}

fn image_url(gallery_id: &str, image_id: &str) -> String {
    format!(
        "/v1/images/{}?gallery={}",
        utf8_percent_encode(image_id, NON_ALPHANUMERIC),
        utf8_percent_encode(gallery_id, NON_ALPHANUMERIC)
    )
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl ServiceState {
    pub fn new(
        galleries: GallerySet,
        triplets: Vec<QueryTriplet>,
        composer: Composer,
        simulator: Option<Simulator>,
        base_config: EvalConfig,
        options: ServiceOptions,
        store: SessionStore,
    ) -> Result<Self> {
        base_config.validate()?;
        let mut by_id = BTreeMap::new();
        for t in triplets {
            if by_id.contains_key(&t.triplet_id) {
                return Err(Error::DuplicateId(t.triplet_id));
            }
            by_id.insert(t.triplet_id.clone(), t);
        }
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            galleries,
            triplets: by_id,
            composer,
            simulator,
            base_config,
            options,
            store,
            locks: Mutex::new(HashMap::new()),
            http,
        })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn gallery(&self, id: &str) -> Result<&Arc<EmbeddingGallery>, Reply> {
        self.galleries
            .get(id)
            .ok_or_else(|| Reply::error(404, "not_found", format!("unknown gallery `{id}`")))
    }

    /// Routes one request.
    pub fn handle(&self, call: &Call) -> Reply {
        let reply = self.route(call);
        if reply.status >= 500 {
            log::error!("{} {} -> {}", call.method, call.url, reply.status);
        }
        reply
    }

    fn authorized(&self, call: &Call, query: &BTreeMap<String, String>) -> bool {
        let Some(token) = &self.options.token else {
            return true;
        };
        let bearer = call
            .header("Authorization")
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        bearer == Some(token.as_str()) || query.get("token") == Some(token)
    }

    fn route(&self, call: &Call) -> Reply {
        let (path, query) = match call.url.split_once('?') {
            Some((p, q)) => (p, parse_query(q)),
            None => (call.url.as_str(), BTreeMap::new()),
        };
        if call.method == "OPTIONS" {
            return Reply {
                status: 204,
                content_type: "text/plain".into(),
                body: Vec::new(),
            };
        }
        let segments: Vec<String> = path
            .trim_matches('/')
            .split('/')
            .map(|s| percent_decode_str(s).decode_utf8_lossy().into_owned())
            .collect();
        if segments.first().map(String::as_str) != Some("v1") {
            return Reply::error(404, "not_found", format!("no route for `{path}`"));
        }
        if !self.authorized(call, &query) {
            return Reply::error(401, "unauthorized", "missing or wrong bearer token");
        }
        let seg: Vec<&str> = segments[1..].iter().map(String::as_str).collect();
        match (call.method.as_str(), seg.as_slice()) {
            ("POST", ["sessions"]) => self.create(call),
            ("GET", ["sessions", id]) => self.get_state(id),
            ("POST", ["sessions", id, "feedback"]) => self.feedback(id, call),
            ("POST", ["sessions", id, "auto-step"]) => self.auto_step(id, call),
            ("GET", ["galleries"]) => self.list_galleries(),
            ("GET", ["images", id]) => self.image(id, query.get("gallery").map(String::as_str)),
            (_, ["sessions"] | ["sessions", _] | ["sessions", _, _] | ["galleries"] | ["images", _]) => {
                Reply::error(405, "method_not_allowed", format!("{} not allowed on `{path}`", call.method))
            }
            _ => Reply::error(404, "not_found", format!("no route for `{path}`")),
        }
    }

    fn create(&self, call: &Call) -> Reply {
        let req: CreateRequest = match serde_json::from_slice(&call.body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, "invalid_request", e.to_string()),
        };
        let (triplet, ad_hoc) = match (&req.triplet_id, &req.reference_id) {
            (Some(id), None) => match self.triplets.get(id) {
                Some(t) => (t.clone(), false),
                None => return Reply::error(404, "not_found", format!("unknown triplet `{id}`")),
            },
            (None, Some(reference)) => {
                let caption = match Caption::new(req.caption.clone().unwrap_or_default()) {
                    Ok(c) => c,
                    Err(e) => return error_reply(&e),
                };
                let target_ids = req.target_ids.clone().unwrap_or_default();
                if target_ids.is_empty() {
                    return Reply::error(400, "invalid_request", "ad-hoc sessions need target_ids");
                }
                let t = QueryTriplet {
                    triplet_id: String::new(),
                    reference_id: reference.clone(),
                    target_ids,
                    relative_caption: caption,
                    category: req.category.clone(),
                    hard_negative_ids: Vec::new(),
                };
                (t, true)
            }
            _ => {
                return Reply::error(
                    400,
                    "invalid_request",
                    "give either triplet_id or reference_id with caption and target_ids",
                )
            }
        };
        let gallery = match &req.gallery_id {
            Some(id) => match self.gallery(id) {
                Ok(g) => g,
                Err(r) => return r,
            },
            None => match self.galleries.for_triplet(&triplet) {
                Ok(g) => g,
                Err(e) => return Reply::error(404, "not_found", e.to_string()),
            },
        };
        let config = match self.session_config(req.config.as_ref()) {
            Ok(c) => c,
            Err(e) => return Reply::error(400, "invalid_request", e.to_string()),
        };
        let session_id = new_session_id();
        let mut triplet = triplet;
        if ad_hoc {
            triplet.triplet_id = format!("adhoc-{session_id}");
        }
        let record = {
            let first_caption = triplet.relative_caption.clone();
            let mut trace = match SessionTrace::start(triplet, gallery, config) {
                Ok(t) => t,
                Err(e) => return error_reply(&e),
            };
            if let Err(e) = engine::step(&mut trace, gallery, &self.composer, first_caption) {
                return error_reply(&e);
            }
            let created = now_ms();
            SessionRecord {
                session_id: session_id.clone(),
                mode: req.mode.unwrap_or(self.options.mode),
                created_at_ms: created,
                expires_at_ms: created.saturating_add(self.options.ttl.as_millis() as u64),
                ad_hoc,
                trace,
                idempotent: BTreeMap::new(),
            }
        };
        let view = self.view(&record, gallery);
        if let Err(e) = self.store.put(&record) {
            return error_reply(&e);
        }
        Reply::json(201, &view)
    }

    fn session_config(&self, patch: Option<&Value>) -> Result<EvalConfig> {
        let mut value = serde_json::to_value(&self.base_config)?;
        if let Some(p) = patch {
            if !p.is_object() {
                return Err(Error::Config("config must be an object".into()));
            }
            merge(&mut value, p);
        }
        let config: EvalConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn load(&self, id: &str) -> Result<SessionRecord, Reply> {
        match self.store.get(id) {
            Ok(Some(r)) => Ok(r),
            Ok(None) => Err(Reply::error(404, "not_found", format!("unknown session `{id}`"))),
            Err(e) => Err(error_reply(&e)),
        }
    }

    fn get_state(&self, id: &str) -> Reply {
        let record = match self.load(id) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match self.gallery(&record.trace.gallery_id) {
            Ok(g) => Reply::json(200, &self.view(&record, g)),
            Err(r) => r,
        }
    }

    /// Runs `make_feedback` then one round under the session lock, honoring
    /// an idempotency key.
    fn mutate<F>(&self, id: &str, key: Option<String>, make_feedback: F) -> Reply
    where
        F: FnOnce(&SessionTrace, &EmbeddingGallery) -> Result<Feedback>,
    {
        let lock = self.session_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut record = match self.load(id) {
            Ok(r) => r,
            Err(r) => return r,
        };
        if let Some(k) = &key {
            if let Some(previous) = record.idempotent.get(k) {
                return Reply::json(200, previous);
            }
        }
        if now_ms() >= record.expires_at_ms {
            return Reply::error(410, "session_expired", format!("session `{id}` has expired"));
        }
        if record.trace.status.is_terminal() {
            return Reply::error(409, "session_terminal", format!("session `{id}` is finished"));
        }
        let gallery = match self.gallery(&record.trace.gallery_id) {
            Ok(g) => g.clone(),
            Err(r) => return r,
        };
        let feedback = match make_feedback(&record.trace, &gallery) {
            Ok(f) => f,
            Err(e) => return error_reply(&e),
        };
        if let Err(e) = engine::advance(&mut record.trace, &gallery, &self.composer, feedback) {
            return error_reply(&e);
        }
        let view = self.view(&record, &gallery);
        if let Some(k) = key {
            record.idempotent.insert(k, view.clone());
        }
        if let Err(e) = self.store.put(&record) {
            return error_reply(&e);
        }
        Reply::json(200, &view)
    }

    fn feedback(&self, id: &str, call: &Call) -> Reply {
        let body: FeedbackBody = match serde_json::from_slice(&call.body) {
            Ok(b) => b,
            Err(e) => return Reply::error(400, "invalid_request", e.to_string()),
        };
        let caption = match Caption::new(body.caption) {
            Ok(c) => c,
            Err(e) => return error_reply(&e),
        };
        let key = call.header(IDEMPOTENCY_HEADER).map(str::to_string).or(body.idempotency_key);
        self.mutate(id, key, |_, _| Ok(Feedback::new(caption, SimulatorKind::Human)))
    }

    fn auto_step(&self, id: &str, call: &Call) -> Reply {
        let body: AutoStepBody = if call.body.iter().all(u8::is_ascii_whitespace) {
            AutoStepBody::default()
        } else {
            match serde_json::from_slice(&call.body) {
                Ok(b) => b,
                Err(e) => return Reply::error(400, "invalid_request", e.to_string()),
            }
        };
        let key = call.header(IDEMPOTENCY_HEADER).map(str::to_string).or(body.idempotency_key);
        self.mutate(id, key, |trace, gallery| {
            engine::next_feedback(trace, gallery, self.simulator.as_ref())
        })
    }

    fn list_galleries(&self) -> Reply {
        let galleries: Vec<Value> = self
            .galleries
            .iter()
            .map(|g| {
                json!({
                    "gallery_id": g.gallery_id(),
                    "size": g.len(),
                    "dim": g.dim(),
                    "subset_tag": g.subset_tag(),
                })
            })
            .collect();
        let triplets: Vec<Value> = self
            .triplets
            .values()
            .map(|t| {
                let mut v = json!({
                    "triplet_id": t.triplet_id,
                    "reference_id": t.reference_id,
                    "caption": t.relative_caption.text(),
                    "category": t.category,
                    "gallery_id": self.galleries.for_triplet(t).ok().map(|g| g.gallery_id().to_string()),
                });
                if self.options.mode == SessionMode::Study {
                    v["target_ids"] = json!(t.target_ids);
                }
                v
            })
            .collect();
        Reply::json(200, &json!({"galleries": galleries, "triplets": triplets}))
    }

    fn image(&self, image_id: &str, gallery_id: Option<&str>) -> Reply {
        let entry = match gallery_id {
            Some(gid) => match self.gallery(gid) {
                Ok(g) => g.get(image_id),
                Err(r) => return r,
            },
            None => self.galleries.iter().find_map(|g| g.get(image_id)),
        };
        let Some(entry) = entry else {
            return Reply::error(404, "not_found", format!("unknown image `{image_id}`"));
        };
        let Some(uri) = &entry.uri else {
            return Reply::error(404, "not_found", format!("image `{image_id}` has no uri"));
        };
        if uri.starts_with("http://") || uri.starts_with("https://") {
            return match self.http.get(uri).call() {
                Ok(mut resp) if resp.status().is_success() => {
                    let content_type = resp
                        .headers()
                        .get("content-type")
                        .and_then(|v| v.to_str().ok())
                        .unwrap_or("application/octet-stream")
                        .to_string();
                    match resp.body_mut().read_to_vec() {
                        Ok(body) => Reply {
                            status: 200,
                            content_type,
                            body,
                        },
                        Err(e) => Reply::error(502, "upstream_unavailable", e.to_string()),
                    }
                }
                Ok(resp) => Reply::error(502, "upstream_unavailable", format!("image host answered {}", resp.status())),
                Err(e) => Reply::error(502, "upstream_unavailable", e.to_string()),
            };
        }
        let Some(path) = local_path(uri) else {
            return Reply::error(404, "not_found", format!("cannot serve uri `{uri}`"));
        };
        match std::fs::read(&path) {
            Ok(body) => Reply {
                status: 200,
                content_type: content_type_for(&path).into(),
                body,
            },
            Err(e) => Reply::error(404, "not_found", format!("{}: {e}", path.display())),
        }
    }

    /// The JSON state a client sees. Blind sessions omit every target field.
    pub fn view(&self, record: &SessionRecord, gallery: &EmbeddingGallery) -> Value {
        let trace = &record.trace;
        let study = record.mode == SessionMode::Study;
        let gid = gallery.gallery_id();
        let uri = |id: &str| image_url(gid, id);
        let last = trace.rounds.last();
        let candidates: Vec<Value> = last
            .map(|r| {
                r.top_m
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        json!({
                            "image_id": s.image_id,
                            "score": s.score,
                            "rank": i + 1,
                            "uri": uri(&s.image_id),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let history: Vec<Value> = trace
            .rounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let kind = if i == 0 {
                    None
                } else {
                    trace.rounds[i - 1].feedback_next.as_ref().map(|f| f.simulator_kind)
                };
                let mut v = json!({
                    "round": r.round,
                    "reference_id": r.reference_id,
                    "caption": r.caption.text(),
                    "simulator_kind": kind,
                });
                if study {
                    v["target_rank"] = json!(r.target_rank);
                }
                v
            })
            .collect();
        let status = match (study, trace.status) {
            (true, s) => serde_json::to_value(s).expect("status serializes"),
            (false, SessionStatus::Active) => json!({"state": "active"}),
            (false, _) => json!({"state": "finished"}),
        };
        let mut v = json!({
            "session_id": record.session_id,
            "mode": record.mode,
            "created_at_ms": record.created_at_ms,
            "expires_at_ms": record.expires_at_ms,
            "expired": now_ms() >= record.expires_at_ms,
            "gallery_id": gid,
            "round": trace.rounds.len(),
            "r_max": trace.config.r_max,
            "status": status,
            "reference": last.map(|r| json!({"image_id": r.reference_id, "uri": uri(&r.reference_id)})),
            "next_reference": trace.next_reference.as_ref().map(|id| json!({"image_id": id, "uri": uri(id)})),
            "candidates": candidates,
            "history": history,
        });
        if !record.ad_hoc {
            v["triplet_id"] = json!(trace.triplet_id);
        }
        if study {
            v["target"] = json!({
                "image_ids": trace.triplet.target_ids,
                "simulator_target": trace.simulator_target,
                "uri": uri(&trace.simulator_target),
            });
            v["target_rank"] = json!(last.map(|r| r.target_rank));
            v["trace"] = serde_json::to_value(trace).expect("trace serializes");
        }
        v
    }
}

fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            let decode = |s: &str| percent_decode_str(&s.replace('+', " ")).decode_utf8_lossy().into_owned();
            (decode(k), decode(v))
        })
        .collect()
}

fn content_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// A bound HTTP server with its worker threads.
pub struct Server {
    http: Arc<tiny_http::Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Server {
    pub fn bind(state: Arc<ServiceState>, addr: &str, threads: usize) -> Result<Self> {
        let http = tiny_http::Server::http(addr)
            .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
        let local = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Config(format!("{addr} is not an ip address")))?;
        let http = Arc::new(http);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (http, stop, state) = (http.clone(), stop.clone(), state.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match http.recv_timeout(Duration::from_millis(100)) {
                            Ok(Some(req)) => serve_one(&state, req),
                            Ok(None) => {}
                            Err(e) => {
                                log::warn!("accept failed: {e}");
                            }
                        }
                    }
                })
            })
            .collect();
        log::info!("listening on http://{local}");
        Ok(Self {
            http,
            addr: local,
            stop,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets in-flight requests finish and joins the workers.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.http.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve_one(state: &ServiceState, mut req: tiny_http::Request) {
    let mut body = Vec::new();
    let read = req.as_reader().take(MAX_BODY + 1).read_to_end(&mut body);
    let call = Call {
        method: req.method().as_str().to_ascii_uppercase(),
        url: req.url().to_string(),
        headers: req
            .headers()
            .iter()
            .map(|h| (h.field.as_str().as_str().to_string(), h.value.as_str().to_string()))
            .collect(),
        body,
    };
    let reply = match read {
        Err(e) => Reply::error(400, "invalid_request", e.to_string()),
        Ok(_) if call.body.len() as u64 > MAX_BODY => Reply::error(413, "too_large", "request body too large"),
        Ok(_) => state.handle(&call),
    };
    let header = |k: &str, v: &str| tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("valid header");
    let response = tiny_http::Response::from_data(reply.body)
        .with_status_code(reply.status)
        .with_header(header("Content-Type", &reply.content_type))
        .with_header(header("Access-Control-Allow-Origin", &state.options.cors_origin))
        .with_header(header("Access-Control-Allow-Methods", "GET, POST, OPTIONS"))
        .with_header(header(
            "Access-Control-Allow-Headers",
            "Content-Type, Authorization, Idempotency-Key",
        ));
    if let Err(e) = req.respond(response) {
        log::warn!("failed to write response: {e}");
    }
}

/// Default session store location under an output directory.
pub fn default_store_path(out: &Path) -> PathBuf {
    out.join("sessions.redb")
}
