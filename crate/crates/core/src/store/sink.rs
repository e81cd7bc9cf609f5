use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::records::{DSftRecord, DTempRecord, RunRecord};
use super::StoreError;
use crate::graph::TemporalGraph;

/// Append-only JSON Lines file. Appends are serialized through a mutex and
/// flushed before returning, so the file never holds a partial line. Groups
/// of lines are keyed; a key that was already written is skipped, which
/// makes re-running a batch idempotent.
#[derive(Debug)]
pub struct JsonlSink {
    path: PathBuf,
    inner: Mutex<SinkState>,
}

#[derive(Debug)]
struct SinkState {
    file: File,
    keys: HashSet<String>,
}

impl JsonlSink {
    /// Opens (creating if needed) a sink whose dedup key is `key_field`.
    pub fn open(path: impl Into<PathBuf>, key_field: &str) -> Result<Self, StoreError> {
        let path = path.into();
        let mut keys = HashSet::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(line) {
                    if let Some(Value::String(k)) = obj.get(key_field) {
                        keys.insert(k.clone());
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(Self {
            path,
            inner: Mutex::new(SinkState { file, keys }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.lock().expect("sink lock").keys.contains(key)
    }

    /// Appends `records` as one contiguous block unless `key` was seen.
    /// Returns whether anything was written.
    pub fn append_group<T: Serialize>(&self, key: &str, records: &[T]) -> Result<bool, StoreError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("records serialize");
            buf.push(b'\n');
        }
        let mut state = self.inner.lock().expect("sink lock");
        if state.keys.contains(key) {
            return Ok(false);
        }
        state
            .file
            .write_all(&buf)
            .and_then(|()| state.file.flush())
            .map_err(|e| StoreError::io(&self.path, e))?;
        state.keys.insert(key.to_string());
        Ok(true)
    }

    pub fn append<T: Serialize>(&self, key: &str, record: &T) -> Result<bool, StoreError> {
        self.append_group(key, std::slice::from_ref(record))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Schema {
                line: i + 1,
                field: "<record>".into(),
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub const DTEMP_FILE: &str = "dtemp.jsonl";
pub const DSFT_FILE: &str = "dsft.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const RUNS_FILE: &str = "runs.jsonl";

/// A run directory: dataset sinks, the event log, run summaries and one
/// JSON file per serialized graph, case record and run manifest.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    dtemp: JsonlSink,
    dsft: JsonlSink,
    events: JsonlSink,
    runs: JsonlSink,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["graphs", "manifests", "cases"] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| StoreError::io(&d, e))?;
        }
        Ok(Self {
            dtemp: JsonlSink::open(root.join(DTEMP_FILE), "run_id")?,
            dsft: JsonlSink::open(root.join(DSFT_FILE), "run_id")?,
            events: JsonlSink::open(root.join(EVENTS_FILE), "run_id")?,
            runs: JsonlSink::open(root.join(RUNS_FILE), "run_id")?,
            root,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn has_run(&self, run_id: &str) -> bool {
        self.runs.contains(run_id)
    }

    pub fn append_dtemp(&self, r: &DTempRecord) -> Result<bool, StoreError> {
        r.validate()?;
        self.dtemp.append(&r.run_id, r)
    }

    pub fn append_dsft(&self, r: &DSftRecord) -> Result<bool, StoreError> {
        r.validate()?;
        self.dsft.append(&r.run_id, r)
    }

    pub fn append_events<T: Serialize>(&self, run_id: &str, events: &[T]) -> Result<bool, StoreError> {
        self.events.append_group(run_id, events)
    }

    pub fn append_run(&self, r: &RunRecord) -> Result<bool, StoreError> {
        self.runs.append(&r.run_id, r)
    }

    pub fn graph_ref(run_id: &str) -> String {
        format!("graphs/{run_id}.json")
    }

    /// Writes a graph file; an existing file is left untouched.
    pub fn write_graph(&self, run_id: &str, graph: &TemporalGraph) -> Result<(), StoreError> {
        write_once(&self.root.join(Self::graph_ref(run_id)), &graph.to_bytes())
    }

    pub fn load_graph(&self, run_id: &str) -> Result<TemporalGraph, StoreError> {
        let path = self.root.join(Self::graph_ref(run_id));
        if !path.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        TemporalGraph::from_bytes(&bytes).map_err(|e| StoreError::Graph(e.to_string()))
    }

    pub fn graph_bytes(&self, run_id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.root.join(Self::graph_ref(run_id));
        fs::read(&path).map_err(|_| StoreError::UnknownRun(run_id.to_string()))
    }

    /// Everything needed to replay a run.
    pub fn write_manifest<T: Serialize>(&self, run_id: &str, manifest: &T) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        write_once(&self.root.join("manifests").join(format!("{run_id}.json")), &bytes)
    }

    pub fn load_manifest<T: DeserializeOwned>(&self, run_id: &str) -> Result<T, StoreError> {
        let path = self.root.join("manifests").join(format!("{run_id}.json"));
        let text = fs::read_to_string(&path).map_err(|_| StoreError::UnknownRun(run_id.to_string()))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Schema {
            line: e.line(),
            field: "<manifest>".into(),
            message: e.to_string(),
        })
    }

    /// Case records are rewritten as the case progresses.
    pub fn write_case<T: Serialize>(&self, case_id: &str, record: &T) -> Result<(), StoreError> {
        let path = self.root.join("cases").join(format!("{case_id}.json"));
        let bytes = serde_json::to_vec_pretty(record).expect("case serializes");
        fs::write(&path, bytes).map_err(|e| StoreError::io(&path, e))
    }

    pub fn load_case<T: DeserializeOwned>(&self, case_id: &str) -> Result<T, StoreError> {
        let path = self.root.join("cases").join(format!("{case_id}.json"));
        let text = fs::read_to_string(&path).map_err(|_| StoreError::UnknownRun(case_id.to_string()))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Schema {
            line: e.line(),
            field: "<case>".into(),
            message: e.to_string(),
        })
    }

    pub fn load_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        read_jsonl(&self.root.join(RUNS_FILE))
    }

    pub fn load_dtemp(&self) -> Result<Vec<DTempRecord>, StoreError> {
        read_jsonl(&self.root.join(DTEMP_FILE))
    }

    pub fn load_dsft(&self) -> Result<Vec<DSftRecord>, StoreError> {
        read_jsonl(&self.root.join(DSFT_FILE))
    }

    pub fn load_events(&self) -> Result<Vec<Value>, StoreError> {
        read_jsonl(&self.root.join(EVENTS_FILE))
    }
}

fn write_once(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if path.exists() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| StoreError::io(path, e))
}
