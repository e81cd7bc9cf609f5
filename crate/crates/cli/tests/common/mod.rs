//! A scripted service on a free port plus small HTTP and event-stream
//! helpers.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

use chronoreason::backends::{ScriptEntry, ScriptedBackend};
use chronoreason::engine::{ClockSpec, EngineConfig};
use chronoreason::knowledge::Corpus;
use chronoreason::orchestrator::{default_roster, CaseConfig};
use chronoreason::store::RunStore;
use chronoreason_cli::config::ApproverKind;
use chronoreason_cli::service::{self, AppState, ServiceHandle, ServiceOptions};

/// Case ids the script knows. Each is a moderate cardiology case where the
/// GP and the cardiologist both answer B at their first call.
pub const CASES: [&str; 6] = ["s1", "s2", "s3", "s4", "s5", "s6"];

pub fn script() -> ScriptedBackend {
    let mut entries = Vec::new();
    for id in CASES {
        for agent in ["gmp", "cardio"] {
            entries.push(ScriptEntry::step(
                &format!("{id}/{agent}"),
                0,
                &format!("{agent}: exertional pain with ST depression"),
                "B",
            ));
        }
    }
    ScriptedBackend::new(entries)
}

pub fn case_body(id: &str) -> Value {
    serde_json::json!({
        "case_id": id,
        "query": "Exertional chest pain relieved by rest. Most likely? (A) reflux (B) stable angina",
        "ground_truth": "B",
        "severity_hint": "Moderate",
        "specialties": ["cardiology"],
        "period": "P1",
        "dataset_tag": "service"
    })
}

pub struct Harness {
    pub dir: TempDir,
    pub handle: ServiceHandle,
    pub agent: ureq::Agent,
    pub token: Option<String>,
}

pub fn start(token: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let handle = start_in(dir.path(), token);
    Harness {
        dir,
        handle,
        agent: agent(),
        token: token.map(str::to_string),
    }
}

pub fn start_in(root: &std::path::Path, token: Option<&str>) -> ServiceHandle {
    let options = ServiceOptions {
        case_config: CaseConfig {
            engine: EngineConfig {
                max_retries: 1,
                max_iterations: 2,
                clock: ClockSpec::Step(1000),
                ..EngineConfig::default()
            },
            ..CaseConfig::default()
        },
        roster: default_roster(),
        approver: ApproverKind::Human,
        review_timeout: Duration::from_secs(20),
        token: token.map(str::to_string),
    };
    let state = AppState::new(Box::new(script()), Corpus::empty(), RunStore::open(root).unwrap(), options);
    service::spawn(state, "127.0.0.1:0").unwrap()
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(20)))
        .build()
        .into()
}

pub struct Reply {
    pub status: u16,
    pub schema_header: Option<String>,
    pub body: Value,
}

fn reply(mut r: ureq::http::Response<ureq::Body>) -> Reply {
    let schema_header = r
        .headers()
        .get("x-schema-version")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let text = r.body_mut().read_to_string().unwrap();
    Reply {
        status: r.status().as_u16(),
        schema_header,
        body: serde_json::from_str(&text).unwrap_or(Value::String(text)),
    }
}

impl Harness {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.handle.base_url())
    }

    fn auth<B>(&self, req: ureq::RequestBuilder<B>) -> ureq::RequestBuilder<B> {
        match &self.token {
            Some(t) => req.header("Authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    pub fn get(&self, path: &str) -> Reply {
        reply(self.auth(self.agent.get(&self.url(path))).call().unwrap())
    }

    pub fn post(&self, path: &str, body: &Value) -> Reply {
        reply(self.auth(self.agent.post(&self.url(path))).send_json(body).unwrap())
    }

    pub fn post_raw(&self, path: &str, body: &str) -> Reply {
        reply(
            self.auth(self.agent.post(&self.url(path)))
                .header("Content-Type", "application/json")
                .send(body)
                .unwrap(),
        )
    }

    pub fn submit(&self, id: &str) -> Reply {
        self.post("/v1/cases", &case_body(id))
    }

    /// Polls until the case has a pending review with this cycle.
    pub fn wait_pending(&self, id: &str, cycle: u64) -> Value {
        let deadline = Instant::now() + Duration::from_secs(15);
        loop {
            let r = self.get("/v1/review/pending");
            if let Some(item) = r.body["items"]
                .as_array()
                .unwrap()
                .iter()
                .find(|i| i["case_id"] == id && i["cycle"] == cycle)
            {
                return item.clone();
            }
            assert!(Instant::now() < deadline, "case {id} never reached review cycle {cycle}");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Polls until the case is decided and returns its record.
    pub fn wait_decided(&self, id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(15);
        loop {
            let r = self.get(&format!("/v1/cases/{id}"));
            if r.body["state"] == "decided" {
                return r.body["record"].clone();
            }
            assert!(Instant::now() < deadline, "case {id} never decided");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Reads the whole event stream (it ends when the case log closes).
    pub fn events(&self, path: &str, last_event_id: Option<u64>) -> Vec<(u64, String)> {
        let mut req = self.auth(self.agent.get(&self.url(path)));
        if let Some(id) = last_event_id {
            req = req.header("Last-Event-ID", &id.to_string());
        }
        let mut r = req.call().unwrap();
        assert_eq!(r.status().as_u16(), 200);
        let ct = r.headers().get("content-type").unwrap().to_str().unwrap().to_string();
        assert!(ct.starts_with("text/event-stream"), "{ct}");
        parse_sse(&r.body_mut().read_to_string().unwrap())
    }
}

/// `(id, data)` for every event in an event-stream body.
pub fn parse_sse(text: &str) -> Vec<(u64, String)> {
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut id = None;
        let mut data = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
            }
        }
        if let Some(id) = id {
            out.push((id, data.join("\n")));
        }
    }
    out
}

/// Lines of the case log mirror in the store.
pub fn log_file_lines(root: &std::path::Path, id: &str) -> Vec<String> {
    std::fs::read_to_string(root.join("cases").join(format!("{id}.events.jsonl")))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}
