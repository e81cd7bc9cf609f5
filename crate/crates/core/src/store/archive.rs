use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::records::{DTempRecord, RunRecord, RECORD_VERSION};
use super::sink::{read_jsonl, RunStore, DTEMP_FILE, RUNS_FILE};
use super::StoreError;
use crate::graph::TemporalGraph;

pub const ARCHIVE_DIR: &str = "archives";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub period: String,
    pub files: Vec<ArchiveEntry>,
}

/// Everything stored for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedPeriod {
    pub label: String,
    pub runs: Vec<RunRecord>,
    pub dtemp: Vec<DTempRecord>,
    pub graphs: BTreeMap<String, TemporalGraph>,
    pub cases: BTreeMap<String, Value>,
}

fn checked_label(label: &str) -> Result<(), StoreError> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && label != "."
        && label != "..";
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidLabel(label.to_string()))
    }
}

pub fn archive_path(store_root: &Path, label: &str) -> PathBuf {
    store_root.join(ARCHIVE_DIR).join(label)
}

/// Snapshots every run, temporal record, graph and case tagged with `label`
/// into `archives/<label>/`, sealed by a checksum manifest.
pub fn archive_period(store: &RunStore, label: &str) -> Result<ArchiveManifest, StoreError> {
    checked_label(label)?;
    let dest = archive_path(store.root(), label);
    if dest.exists() {
        return Err(StoreError::PeriodExists(label.to_string()));
    }

    let runs: Vec<RunRecord> = store.load_runs()?.into_iter().filter(|r| r.period == label).collect();
    let dtemp: Vec<DTempRecord> = store.load_dtemp()?.into_iter().filter(|r| r.period == label).collect();
    let mut cases = BTreeMap::new();
    let case_dir = store.root().join("cases");
    if case_dir.exists() {
        let mut entries: Vec<_> = fs::read_dir(&case_dir)
            .map_err(|e| StoreError::io(&case_dir, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            let Ok(v) = serde_json::from_str::<Value>(&text) else { continue };
            if v.get("period").and_then(Value::as_str) == Some(label) {
                let id = path.file_stem().expect("json file").to_string_lossy().into_owned();
                cases.insert(id, v);
            }
        }
    }
    if runs.is_empty() && cases.is_empty() {
        return Err(StoreError::NothingToArchive(label.to_string()));
    }

    let mut files: Vec<(String, Vec<u8>)> = vec![
        (RUNS_FILE.into(), to_jsonl(&runs)),
        (DTEMP_FILE.into(), to_jsonl(&dtemp)),
    ];
    for r in &runs {
        files.push((format!("graphs/{}.json", r.run_id), store.graph_bytes(&r.run_id)?));
    }
    for (id, v) in &cases {
        files.push((format!("cases/{id}.json"), serde_json::to_vec_pretty(v).expect("json value")));
    }

    // stage, then rename, so a failed archive never leaves a half-written period
    let staging = store.root().join(ARCHIVE_DIR).join(format!(".{label}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| StoreError::io(&staging, e))?;
    }
    let mut entries = Vec::new();
    for (name, bytes) in &files {
        let path = staging.join(name);
        fs::create_dir_all(path.parent().expect("nested"))
            .map_err(|e| StoreError::io(&path, e))?;
        fs::write(&path, bytes).map_err(|e| StoreError::io(&path, e))?;
        entries.push(ArchiveEntry {
            name: name.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = ArchiveManifest {
        version: RECORD_VERSION,
        period: label.to_string(),
        files: entries,
    };
    let mpath = staging.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest).expect("manifest"))
        .map_err(|e| StoreError::io(&mpath, e))?;
    fs::rename(&staging, &dest).map_err(|e| StoreError::io(&dest, e))?;
    Ok(manifest)
}

/// Loads and checksum-verifies an archived period.
pub fn load_archive(store_root: &Path, label: &str) -> Result<ArchivedPeriod, StoreError> {
    checked_label(label)?;
    let dir = archive_path(store_root, label);
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(StoreError::UnknownPeriod(label.to_string()));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| StoreError::io(&mpath, e))?;
    let manifest: ArchiveManifest = serde_json::from_str(&text).map_err(|e| StoreError::Schema {
        line: e.line(),
        field: "<manifest>".into(),
        message: e.to_string(),
    })?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != f.sha256 {
            return Err(StoreError::ArchiveCorrupt {
                period: label.to_string(),
                file: f.name.clone(),
            });
        }
    }

    let mut out = ArchivedPeriod {
        label: label.to_string(),
        runs: read_jsonl(&dir.join(RUNS_FILE))?,
        dtemp: read_jsonl(&dir.join(DTEMP_FILE))?,
        graphs: BTreeMap::new(),
        cases: BTreeMap::new(),
    };
    for f in &manifest.files {
        let path = dir.join(&f.name);
        if let Some(id) = f.name.strip_prefix("graphs/").and_then(|n| n.strip_suffix(".json")) {
            let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
            let g = TemporalGraph::from_bytes(&bytes).map_err(|e| StoreError::Graph(e.to_string()))?;
            out.graphs.insert(id.to_string(), g);
        } else if let Some(id) = f.name.strip_prefix("cases/").and_then(|n| n.strip_suffix(".json")) {
            let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
            let v = serde_json::from_str(&text).map_err(|e| StoreError::Schema {
                line: e.line(),
                field: "<case>".into(),
                message: e.to_string(),
            })?;
            out.cases.insert(id.to_string(), v);
        }
    }
    Ok(out)
}

/// Labels of all sealed archives, sorted.
pub fn list_archives(store_root: &Path) -> Vec<String> {
    let Ok(rd) = fs::read_dir(store_root.join(ARCHIVE_DIR)) else {
        return Vec::new();
    };
    let mut labels: Vec<String> = rd
        .filter_map(Result::ok)
        .filter(|e| e.path().join(MANIFEST).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    labels.sort();
    labels
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    buf
}
