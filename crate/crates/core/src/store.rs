//! Files on disk: datasets, the model registry, JSONL run logs and reports.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{validate_entry, ClinicalNote, EntryViolation, GroundTruth, MedicationEntry};
use crate::pipeline::TaskRecord;
use crate::sampling::{Registry, RegistryEntry};

const SAMPLE_DATASET: &str = include_str!("../data/sample_dataset.json");

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("record id {0:?} appears more than once")]
    DuplicateId(String),
    #[error("record {record:?} has no medications")]
    NoMedications { record: String },
    #[error("record {record:?}, medication {index}: {violations:?}")]
    InvalidEntry {
        record: String,
        index: usize,
        violations: Vec<EntryViolation>,
    },
    #[error("{path}: {message}")]
    InvalidRegistry { path: PathBuf, message: String },
    #[error("{path} is locked by another writer")]
    Locked { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> StoreError {
    StoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub vignette: String,
    pub medications: Vec<MedicationEntry>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// On-disk dataset layout.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Set on machine-synthesized data that no expert has reviewed.
    #[serde(default, skip_serializing_if = "is_false")]
    pub unvalidated: bool,
    pub records: Vec<DatasetRecord>,
}

impl DatasetFile {
    /// Pretty JSON with a trailing newline. Parsing and re-serializing this
    /// output reproduces it byte for byte.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub notes: Vec<ClinicalNote>,
    pub truth: GroundTruth,
    pub unvalidated: bool,
}

impl Dataset {
    /// Bundled synthetic fixture of 20 records.
    pub fn sample() -> Self {
        parse_dataset(SAMPLE_DATASET, Path::new("<bundled sample>")).expect("bundled dataset is valid")
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

pub fn sample_dataset_json() -> &'static str {
    SAMPLE_DATASET
}

/// Checks every record and splits the file into notes and ground truth.
pub fn validate_dataset(file: DatasetFile) -> Result<Dataset, StoreError> {
    let mut seen = BTreeSet::new();
    let mut ds = Dataset {
        unvalidated: file.unvalidated,
        ..Dataset::default()
    };
    if file.records.is_empty() {
        log::warn!("dataset has no records");
    }
    for r in file.records {
        if !seen.insert(r.id.clone()) {
            return Err(StoreError::DuplicateId(r.id));
        }
        if r.medications.is_empty() {
            return Err(StoreError::NoMedications { record: r.id });
        }
        for (index, m) in r.medications.iter().enumerate() {
            let violations = validate_entry(m);
            if !violations.is_empty() {
                return Err(StoreError::InvalidEntry {
                    record: r.id,
                    index,
                    violations,
                });
            }
        }
        ds.notes.push(ClinicalNote {
            id: r.id.clone(),
            vignette: r.vignette,
        });
        ds.truth.insert(r.id, r.medications);
    }
    Ok(ds)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset, StoreError> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    validate_dataset(file)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, path)
}

pub fn write_dataset(path: &Path, file: &DatasetFile) -> Result<(), StoreError> {
    std::fs::write(path, file.to_canonical_json()).map_err(io_err(path))
}

/// Registry files are a JSON array of entries.
pub fn load_registry(path: &Path) -> Result<Registry, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let entries: Vec<RegistryEntry> = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    Registry::new(entries).map_err(|e| StoreError::InvalidRegistry {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn record_to_line(record: &TaskRecord) -> String {
    serde_json::to_string(record).expect("task records serialize")
}

/// Appends one record as a single line. The exclusive lock serializes
/// writers across threads and processes.
pub fn append_record(path: &Path, record: &TaskRecord) -> Result<(), StoreError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.lock().map_err(io_err(path))?;
    let mut line = record_to_line(record);
    line.push('\n');
    let res = file.write_all(line.as_bytes()).and_then(|_| file.flush());
    let _ = file.unlock();
    res.map_err(io_err(path))
}

/// Holds the log's lock for its lifetime, so a second writer fails fast
/// instead of interleaving with a running experiment.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => {
                return Err(StoreError::Locked {
                    path: path.to_path_buf(),
                })
            }
            Err(std::fs::TryLockError::Error(e)) => return Err(io_err(path)(e)),
        }
        Ok(LogWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &TaskRecord) -> Result<(), StoreError> {
        let mut line = record_to_line(record);
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptLine {
    pub path: PathBuf,
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedLog {
    pub records: Vec<TaskRecord>,
    pub corrupt: Vec<CorruptLine>,
}

/// Parses every line independently; bad lines are collected, not fatal.
pub fn load_records(path: &Path) -> Result<LoadedLog, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = LoadedLog::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TaskRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.corrupt.push(CorruptLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Concatenation of several logs, in argument order.
pub fn load_logs<P: AsRef<Path>>(paths: &[P]) -> Result<LoadedLog, StoreError> {
    let mut all = LoadedLog::default();
    for p in paths {
        let l = load_records(p.as_ref())?;
        all.records.extend(l.records);
        all.corrupt.extend(l.corrupt);
    }
    Ok(all)
}

/// A log line with its wall-clock `timing` field blanked, for comparing
/// runs that should differ only in when they happened.
pub fn mask_timing(line: &str) -> Result<String, serde_json::Error> {
    let mut v: Value = serde_json::from_str(line)?;
    if let Some(obj) = v.as_object_mut() {
        if obj.contains_key("timing") {
            obj.insert("timing".into(), Value::Null);
        }
    }
    serde_json::to_string(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
    Csv,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "report.json",
            ReportFormat::Text => "report.txt",
            ReportFormat::Csv => "report.csv",
        }
    }
}

/// Writes `contents` to `dir/report.{json,txt,csv}` and returns the path.
pub fn write_report(dir: &Path, format: ReportFormat, contents: &str) -> Result<PathBuf, StoreError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format.file_name());
    std::fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}
