//! JSONL benchmark files and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use ecibench_core::prompts::BenchmarkRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: String,
        line: usize,
        #[source]
        source: ecibench_core::Error,
    },
    #[error("{path}:{line}: duplicate record id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("manifest `{name}`: {file} holds {found} usable records, expected {expected}")]
    CountMismatch {
        name: String,
        file: String,
        found: usize,
        expected: usize,
    },
    #[error("manifest `{0}` lists a different number of files and counts")]
    ManifestShape(String),
    #[error("{path}: no usable records")]
    Empty { path: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Records that survived loading, plus how many image questions were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBenchmark {
    pub records: Vec<BenchmarkRecord>,
    pub dropped_images: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses JSONL text; `origin` only labels error messages.
///
/// Blank lines are skipped. Records with `has_image` are dropped and counted.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<LoadedBenchmark> {
    let mut records: Vec<BenchmarkRecord> = Vec::new();
    let mut dropped_images = 0;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: BenchmarkRecord = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|source| DataError::Invalid {
            path: origin.to_string(),
            line: line_no,
            source,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId {
                path: origin.to_string(),
                line: line_no,
                id: record.id,
            });
        }
        if record.has_image {
            dropped_images += 1;
        } else {
            records.push(record);
        }
    }
    Ok(LoadedBenchmark {
        records,
        dropped_images,
    })
}

pub fn load_benchmark(path: &Path) -> Result<LoadedBenchmark> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl(records: &[BenchmarkRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_benchmark(path: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)).map_err(io_err(path))
}

/// A named set of JSONL files with the record count each should yield.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub files: Vec<String>,
    pub expected_counts: Vec<usize>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.files.len() != m.expected_counts.len() {
            return Err(DataError::ManifestShape(m.name));
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.expected_counts.iter().sum()
    }

    /// Loads every listed file (relative to `base`), checking each count.
    pub fn load_records(&self, base: &Path) -> Result<LoadedBenchmark> {
        if self.files.len() != self.expected_counts.len() {
            return Err(DataError::ManifestShape(self.name.clone()));
        }
        let mut all = LoadedBenchmark {
            records: Vec::new(),
            dropped_images: 0,
        };
        for (file, &expected) in self.files.iter().zip(&self.expected_counts) {
            let path: PathBuf = base.join(file);
            let part = load_benchmark(&path)?;
            if part.records.len() != expected {
                return Err(DataError::CountMismatch {
                    name: self.name.clone(),
                    file: file.clone(),
                    found: part.records.len(),
                    expected,
                });
            }
            all.records.extend(part.records);
            all.dropped_images += part.dropped_images;
        }
        Ok(all)
    }
}
