//! Line-delimited JSON re-ranking service.
//!
//! Each input line is one request:
//!
//! ```json
//! {"req_id": "r1", "session_id": "s1", "user": {...}, "candidates": [...],
//!  "page_size": 5, "params": {"window": 10}}
//! ```
//!
//! and yields exactly one output line, in request order:
//!
//! ```json
//! {"req_id": "r1", "order": ["item-3", ...], "scores": [0.71, ...], "session_done": false}
//! ```
//!
//! The first request of a session must carry `user` and `candidates`; later
//! requests on the same `session_id` continue where the previous page ended
//! and may omit both. Failures produce `{"req_id": ..., "error": "..."}`
//! (with a null id when the line is not a readable request) and the loop
//! carries on.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::AppConfig;
use crate::domain::{validate_corpus, Feed, Item, UserProfile};
use crate::features::FeatureConfig;
use crate::model::{FeatureMode, ModelError, ScorerModel};
use crate::reranker::{rerank_page, RerankParams, SessionState};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("service needs a contextual model, got {0}")]
    NotContextual(FeatureMode),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    req_id: String,
    session_id: String,
    user: Option<UserProfile>,
    #[serde(default)]
    candidates: Vec<Item>,
    page_size: Option<usize>,
    params: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub req_id: String,
    pub order: Vec<String>,
    pub scores: Vec<f64>,
    pub session_done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub req_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServeStats {
    pub requests: usize,
    pub errors: usize,
}

struct Session {
    state: SessionState,
    last_seen: u64,
}

pub struct Service {
    model: ScorerModel,
    params: RerankParams,
    features: FeatureConfig,
    idle_limit: u64,
    clock: u64,
    sessions: BTreeMap<String, Session>,
}

impl Service {
    pub fn new(model: ScorerModel, cfg: &AppConfig) -> Result<Self, ServiceError> {
        if model.feature_mode != FeatureMode::Contextual {
            return Err(ServiceError::NotContextual(model.feature_mode));
        }
        let features = FeatureConfig {
            num_topics: model.meta.num_topics,
            ..cfg.features
        };
        Ok(Self {
            model,
            params: cfg.rerank,
            features,
            idle_limit: cfg.service.session_idle_requests as u64,
            clock: 0,
            sessions: BTreeMap::new(),
        })
    }

    pub fn from_model_file(path: &Path, cfg: &AppConfig) -> Result<Self, ServiceError> {
        Self::new(ScorerModel::load(path)?, cfg)
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Handles one input line.
    pub fn respond(&mut self, line: &str) -> Result<Response, ErrorResponse> {
        self.clock += 1;
        self.expire();
        let request: Request = serde_json::from_str(line).map_err(|e| ErrorResponse {
            req_id: None,
            error: format!("malformed request: {e}"),
        })?;
        let req_id = request.req_id.clone();
        self.handle(request).map_err(|error| ErrorResponse {
            req_id: Some(req_id),
            error,
        })
    }

    /// Handles one input line and returns the output line (without newline).
    pub fn handle_line(&mut self, line: &str) -> String {
        match self.respond(line) {
            Ok(resp) => serde_json::to_string(&resp),
            Err(err) => serde_json::to_string(&err),
        }
        .expect("response serializes")
    }

    fn expire(&mut self) {
        let (now, limit) = (self.clock, self.idle_limit);
        self.sessions.retain(|_, s| now - s.last_seen <= limit);
    }

    fn request_params(&self, req: &Request) -> Result<RerankParams, String> {
        let mut params = match &req.params {
            None => self.params,
            Some(patch) => {
                let patch = patch.as_object().ok_or("params must be an object")?;
                let mut base = serde_json::to_value(self.params).expect("params serialize");
                let obj = base.as_object_mut().expect("params are an object");
                for (k, v) in patch {
                    obj.insert(k.clone(), v.clone());
                }
                serde_json::from_value(base).map_err(|e| format!("bad params: {e}"))?
            }
        };
        if let Some(p) = req.page_size {
            params.page_size = p;
        }
        params.validate().map_err(|e| e.to_string())?;
        Ok(params)
    }

    fn handle(&mut self, req: Request) -> Result<Response, String> {
        let params = self.request_params(&req)?;
        if !self.sessions.contains_key(&req.session_id) {
            let state = new_session(req.user, req.candidates)?;
            self.sessions.insert(
                req.session_id.clone(),
                Session {
                    state,
                    last_seen: self.clock,
                },
            );
        }
        let session = self.sessions.get_mut(&req.session_id).expect("session present");
        session.last_seen = self.clock;
        let page = rerank_page(&mut session.state, &self.model, &params, &self.features).map_err(|e| e.to_string())?;
        let done = session.state.is_done();
        if done {
            self.sessions.remove(&req.session_id);
        }
        Ok(Response {
            req_id: req.req_id,
            order: page.items.into_iter().map(|i| i.id).collect(),
            scores: page.scores,
            session_done: done,
        })
    }

    /// Serves every line of `input`, writing one response line per request.
    pub fn run(&mut self, input: impl BufRead, mut output: impl Write) -> std::io::Result<ServeStats> {
        let mut stats = ServeStats::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            stats.requests += 1;
            let out = match self.respond(&line) {
                Ok(resp) => serde_json::to_string(&resp),
                Err(err) => {
                    stats.errors += 1;
                    serde_json::to_string(&err)
                }
            }
            .expect("response serializes");
            output.write_all(out.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(stats)
    }
}

fn new_session(user: Option<UserProfile>, candidates: Vec<Item>) -> Result<SessionState, String> {
    let user = user.ok_or("new session needs a user")?;
    let first = candidates.first().ok_or("new session needs candidates")?;
    let dim = first.embedding.len();
    let items = validate_corpus(&candidates, dim).map_err(|e| e.to_string())?;
    let user = user.validate(dim).map_err(|e| e.to_string())?;
    let feed = Feed::new(user, items).map_err(|e| e.to_string())?;
    Ok(SessionState::new(feed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMeta;
    use rand::SeedableRng;

    fn model() -> ScorerModel {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let meta = ModelMeta {
            num_topics: 2,
            context_depth: 5,
            background_ctr: vec![0.5],
        };
        ScorerModel::initialized(FeatureMode::Contextual, 4 + 10, &[6], 1, meta, &mut rng)
    }

    fn cfg() -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.rerank.window = 3;
        cfg
    }

    fn request(req: &str, session: &str, page: usize, with_feed: bool) -> String {
        let mut v = serde_json::json!({"req_id": req, "session_id": session, "page_size": page});
        if with_feed {
            let items: Vec<Item> = (0..6)
                .map(|i| {
                    let a = i as f64 * 0.7;
                    Item::new(format!("v{i}"), vec![a.cos(), a.sin()], (i % 2) as u32, 0.9 - 0.1 * i as f64)
                })
                .collect();
            v["user"] = serde_json::to_value(UserProfile::new("u", vec![1.0, 0.0])).unwrap();
            v["candidates"] = serde_json::to_value(items).unwrap();
        }
        v.to_string()
    }

    #[test]
    fn full_page_finishes_session() {
        let mut svc = Service::new(model(), &cfg()).unwrap();
        let out: Response = serde_json::from_str(&svc.handle_line(&request("a", "s", 6, true))).unwrap();
        assert_eq!(out.order.len(), 6);
        assert!(out.session_done);
        assert_eq!(svc.active_sessions(), 0);
    }

    #[test]
    fn two_pages_equal_one_shot() {
        let mut svc = Service::new(model(), &cfg()).unwrap();
        let one: Response = serde_json::from_str(&svc.handle_line(&request("a", "s1", 6, true))).unwrap();
        let p1: Response = serde_json::from_str(&svc.handle_line(&request("b", "s2", 3, true))).unwrap();
        assert!(!p1.session_done);
        let p2: Response = serde_json::from_str(&svc.handle_line(&request("c", "s2", 3, false))).unwrap();
        assert!(p2.session_done);
        assert_eq!([p1.order, p2.order].concat(), one.order);
        assert_eq!([p1.scores, p2.scores].concat(), one.scores);
    }

    #[test]
    fn malformed_line_does_not_stop_the_loop() {
        let mut svc = Service::new(model(), &cfg()).unwrap();
        let input = format!("{{not json\n{}\n", request("ok", "s", 6, true));
        let mut out = Vec::new();
        let stats = svc.run(input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 2);
        let err: ErrorResponse = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(err.req_id, None);
        let ok: Response = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(ok.req_id, "ok");
        assert_eq!(stats, ServeStats { requests: 2, errors: 1 });
    }

    #[test]
    fn unknown_session_without_feed_is_an_error() {
        let mut svc = Service::new(model(), &cfg()).unwrap();
        let err: ErrorResponse = serde_json::from_str(&svc.handle_line(&request("x", "nope", 3, false))).unwrap();
        assert_eq!(err.req_id.as_deref(), Some("x"));
    }

    #[test]
    fn idle_sessions_expire() {
        let mut c = cfg();
        c.service.session_idle_requests = 2;
        let mut svc = Service::new(model(), &c).unwrap();
        svc.handle_line(&request("a", "s", 2, true));
        assert_eq!(svc.active_sessions(), 1);
        svc.handle_line("junk");
        svc.handle_line("junk");
        assert_eq!(svc.active_sessions(), 1);
        svc.handle_line("junk");
        assert_eq!(svc.active_sessions(), 0);
    }

    #[test]
    fn baseline_model_is_rejected() {
        let mut m = model();
        m.feature_mode = FeatureMode::Baseline;
        assert!(matches!(Service::new(m, &cfg()), Err(ServiceError::NotContextual(_))));
    }
}
