//! Append-only JSONL result store, one record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpe::SweepCell;
use crate::sampler::SplitTag;
use crate::transfer::HyperConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// How the grid of a record was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProvenance {
    pub center: HyperConfig,
    pub shape: String,
    pub spacing: f64,
    pub configs: Vec<HyperConfig>,
}

/// Mechanism measurements from one fit at the grid center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub cka_profile: Vec<f64>,
    /// Block id and summed ΔW norm.
    pub delta_w: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub run_seed: u64,
    pub dataset: String,
    pub split_tag: SplitTag,
    pub task_index: u64,
    pub algorithm: String,
    pub n_way: usize,
    pub shots: Vec<usize>,
    pub n_query: usize,
    pub grid: GridProvenance,
    /// `null` where a configuration diverged.
    pub per_config_accuracy: Vec<Option<f64>>,
    pub failed_configs: Vec<usize>,
    pub hpe_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_rarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<MechanismRecord>,
    /// Per-config query logits (empty for diverged configs), then fused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<SavedLogits>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedLogits {
    pub per_config: Vec<Vec<Vec<f64>>>,
    pub fused: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub run_seed: u64,
    pub dataset: String,
    pub task_index: u64,
    pub algorithm: String,
    pub fixed: HyperConfig,
    pub row_param: String,
    pub row_values: Vec<f64>,
    pub col_param: String,
    pub col_values: Vec<f64>,
    pub cells: Vec<Vec<SweepCell>>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Record {
    Task(TaskRecord),
    Sweep(SweepRecord),
}

impl Record {
    /// Identity used to skip completed work on resume.
    pub fn key(&self) -> (String, String, u64, String) {
        match self {
            Record::Task(t) => (t.run_id.clone(), t.dataset.clone(), t.task_index, t.algorithm.clone()),
            Record::Sweep(s) => (s.run_id.clone(), s.dataset.clone(), s.task_index, format!("sweep/{}", s.algorithm)),
        }
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn as_task(&self) -> Option<&TaskRecord> {
        match self {
            Record::Task(t) => Some(t),
            Record::Sweep(_) => None,
        }
    }
}

/// Contents of a store file.
#[derive(Debug, Clone, Default)]
pub struct StoreContents {
    pub records: Vec<Record>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
    /// Unparseable text after the last good line, if any.
    pub corrupted_tail: Option<String>,
}

impl StoreContents {
    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.iter().filter_map(Record::as_task)
    }
}

fn store_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Store { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads every record. A bad or unterminated final line is reported in
/// `corrupted_tail`; a bad line followed by good ones is an error.
pub fn read_store(path: &Path) -> Result<StoreContents> {
    let bytes = std::fs::read(path).map_err(|e| store_err(path, e.to_string()))?;
    let mut out = StoreContents::default();
    let mut pos = 0usize;
    let mut line_no = 0;
    while pos < bytes.len() {
        line_no += 1;
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
        let line = &bytes[pos..end.unwrap_or(bytes.len())];
        let parsed = std::str::from_utf8(line).ok().and_then(|s| serde_json::from_str::<Record>(s).ok());
        match (parsed, end) {
            (Some(r), Some(e)) => {
                check_version(&r).map_err(|m| store_err(path, format!("line {line_no}: {m}")))?;
                out.records.push(r);
                pos = e + 1;
                out.valid_len = pos as u64;
            }
            (_, end) => {
                let rest_is_tail = end.is_none_or(|e| bytes[e + 1..].iter().all(|b| b.is_ascii_whitespace()));
                if !rest_is_tail {
                    return Err(store_err(path, format!("line {line_no} is not a valid record")));
                }
                out.corrupted_tail = Some(String::from_utf8_lossy(&bytes[pos..]).into_owned());
                break;
            }
        }
    }
    Ok(out)
}

fn check_version(r: &Record) -> std::result::Result<(), String> {
    let v = match r {
        Record::Task(t) => t.schema_version,
        Record::Sweep(s) => s.schema_version,
    };
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(format!("schema version {v}, expected {SCHEMA_VERSION}"))
    }
}

/// Single writer appending to a store.
pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl StoreWriter {
    /// Opens `path` for appending, creating it if needed. A corrupted
    /// trailing line is cut off (and logged); earlier lines are kept as is.
    pub fn open(path: &Path) -> Result<(Self, StoreContents)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| store_err(path, e.to_string()))?;
        }
        let contents = if path.exists() { read_store(path)? } else { StoreContents::default() };
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| store_err(path, e.to_string()))?;
        if let Some(tail) = &contents.corrupted_tail {
            log::warn!("{}: dropping corrupted trailing line ({} bytes)", path.display(), tail.len());
            file.set_len(contents.valid_len).map_err(|e| store_err(path, e.to_string()))?;
        }
        Ok((Self { path: path.to_path_buf(), out: BufWriter::new(file) }, contents))
    }

    pub fn append(&mut self, records: &[Record]) -> Result<()> {
        for r in records {
            let line = r.to_line()?;
            self.out.write_all(line.as_bytes()).map_err(|e| store_err(&self.path, e.to_string()))?;
            self.out.write_all(b"\n").map_err(|e| store_err(&self.path, e.to_string()))?;
        }
        self.out.flush().map_err(|e| store_err(&self.path, e.to_string()))
    }
}

/// A store's text with every `wall_time_ms` value zeroed, for comparing runs.
pub fn without_timing(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(t) = v.get_mut("wall_time_ms") {
            *t = 0.into();
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::Method;

    fn record(i: u64) -> Record {
        let c = HyperConfig::new(Method::LinearProbe, 0.0, 1e-2, 5);
        Record::Task(TaskRecord {
            schema_version: SCHEMA_VERSION,
            run_id: "r".into(),
            run_seed: 1,
            dataset: "d".into(),
            split_tag: SplitTag::Base,
            task_index: i,
            algorithm: "linear-probe".into(),
            n_way: 2,
            shots: vec![1, 2],
            n_query: 4,
            grid: GridProvenance { center: c, shape: "5x3-head".into(), spacing: 5.0, configs: vec![c] },
            per_config_accuracy: vec![Some(0.5)],
            failed_configs: vec![],
            hpe_accuracy: 0.5,
            baseline_accuracy: None,
            dataset_rarity: None,
            mechanism: None,
            logits: None,
            wall_time_ms: 7,
        })
    }

    #[test]
    fn round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let (mut w, c) = StoreWriter::open(&path).unwrap();
        assert!(c.records.is_empty());
        w.append(&[record(0), record(1)]).unwrap();
        drop(w);
        let (mut w, c) = StoreWriter::open(&path).unwrap();
        assert_eq!(c.records, vec![record(0), record(1)]);
        w.append(&[record(2)]).unwrap();
        assert_eq!(read_store(&path).unwrap().records.len(), 3);
    }

    #[test]
    fn corrupted_tail_is_detected_and_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let good = format!("{}\n{}\n", record(0).to_line().unwrap(), record(1).to_line().unwrap());
        std::fs::write(&path, format!("{good}{{\"kind\":\"task\",\"run")).unwrap();
        let c = read_store(&path).unwrap();
        assert_eq!(c.records.len(), 2);
        assert!(c.corrupted_tail.is_some());
        let (mut w, _) = StoreWriter::open(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), good);
        w.append(&[record(2)]).unwrap();
        assert!(read_store(&path).unwrap().corrupted_tail.is_none());
    }

    #[test]
    fn unterminated_valid_line_counts_as_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, record(0).to_line().unwrap()).unwrap();
        let c = read_store(&path).unwrap();
        assert!(c.records.is_empty() && c.corrupted_tail.is_some());
    }

    #[test]
    fn bad_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, format!("garbage\n{}\n", record(0).to_line().unwrap())).unwrap();
        assert!(matches!(read_store(&path), Err(Error::Store { .. })));
        let newer = record(0).to_line().unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        std::fs::write(&path, format!("{newer}\n")).unwrap();
        assert!(read_store(&path).is_err());
    }

    #[test]
    fn timing_is_masked() {
        let a = record(0).to_line().unwrap();
        let b = a.replace("\"wall_time_ms\":7", "\"wall_time_ms\":99");
        assert_ne!(a, b);
        assert_eq!(without_timing(&a).unwrap(), without_timing(&b).unwrap());
    }
}
