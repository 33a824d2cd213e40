//! Error plumbing and on-disk layout shared by all subcommands.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use gbdomain::discover::{
    assignment_from_csv, assignment_to_csv, AssignmentMeta, AssignmentSource,
    PseudoDomainAssignment,
};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Args,
    File,
    Compute,
}

#[derive(Debug)]
pub struct CmdError {
    pub phase: Phase,
    pub message: String,
}

pub type CmdResult<T> = Result<T, CmdError>;

impl CmdError {
    pub fn args(message: impl Into<String>) -> Self {
        CmdError {
            phase: Phase::Args,
            message: message.into(),
        }
    }

    pub fn file(message: impl Into<String>) -> Self {
        CmdError {
            phase: Phase::File,
            message: message.into(),
        }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        CmdError {
            phase: Phase::Compute,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.phase {
            Phase::Args => 2,
            Phase::File => 3,
            Phase::Compute => 4,
        }
    }
}

pub trait PhaseExt<T> {
    fn file_phase(self) -> CmdResult<T>;
    fn compute_phase(self) -> CmdResult<T>;
}

impl<T, E: Display> PhaseExt<T> for Result<T, E> {
    fn file_phase(self) -> CmdResult<T> {
        self.map_err(|e| CmdError::file(e.to_string()))
    }

    fn compute_phase(self) -> CmdResult<T> {
        self.map_err(|e| CmdError::compute(e.to_string()))
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn read_text(path: &Path) -> CmdResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CmdError::file(format!("{}: {}", path.display(), e)))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult<()> {
    std::fs::write(path, bytes)
        .map_err(|e| CmdError::file(format!("{}: {}", path.display(), e)))
}

pub fn ensure_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CmdError::file(format!("{}: {}", dir.display(), e)))
}

/// Serialized with a trailing newline; object keys are emitted sorted, so
/// identical values give identical bytes.
pub fn write_json(path: &Path, value: &Value) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value).compute_phase()?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Accepts either a run directory holding labels.csv or the csv itself.
fn assignment_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        let labels = path.join("labels.csv");
        let labels = if labels.exists() {
            labels
        } else {
            path.join("aligned.csv")
        };
        (labels, path.join("meta.json"))
    } else {
        let meta = path
            .parent()
            .map(|d| d.join("meta.json"))
            .unwrap_or_else(|| PathBuf::from("meta.json"));
        (path.to_path_buf(), meta)
    }
}

pub fn load_assignment(path: &Path) -> CmdResult<(Vec<String>, PseudoDomainAssignment)> {
    let (labels_path, meta_path) = assignment_paths(path);
    let text = read_text(&labels_path)?;
    let (ids, labels, ball_ids) = assignment_from_csv(&text).file_phase()?;
    if labels.is_empty() {
        return Err(CmdError::file(format!(
            "{}: no samples in label file",
            labels_path.display()
        )));
    }
    let meta: Option<AssignmentMeta> = if meta_path.exists() {
        let meta_text = read_text(&meta_path)?;
        Some(serde_json::from_str(&meta_text).map_err(|e| {
            CmdError::file(format!("{}: {}", meta_path.display(), e))
        })?)
    } else {
        None
    };
    let k = meta
        .as_ref()
        .map(|m| m.k)
        .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
    let assignment = PseudoDomainAssignment {
        labels,
        k,
        epoch: meta.as_ref().map(|m| m.epoch).unwrap_or(0),
        source: meta
            .as_ref()
            .map(|m| m.source)
            .unwrap_or(AssignmentSource::GbRepresentative),
        ball_of_sample: ball_ids,
        permutation_applied: meta.and_then(|m| m.permutation),
    };
    assignment.validate().file_phase()?;
    Ok((ids, assignment))
}

pub fn write_assignment(
    dir: &Path,
    assignment: &PseudoDomainAssignment,
    ids: &[String],
    config: Value,
    timestamp: Option<u64>,
) -> CmdResult<()> {
    ensure_dir(dir)?;
    let csv = assignment_to_csv(assignment, ids).compute_phase()?;
    write_bytes(&dir.join("labels.csv"), csv.as_bytes())?;
    let meta = AssignmentMeta::from(assignment);
    let mut value = serde_json::to_value(&meta).compute_phase()?;
    let obj = value
        .as_object_mut()
        .expect("assignment metadata serializes to an object");
    obj.insert("config".to_string(), config);
    if let Some(ts) = timestamp {
        obj.insert("timestamp".to_string(), json!(ts));
    }
    write_json(&dir.join("meta.json"), &value)
}

/// Infinity round-trips as the string "inf" because JSON numbers cannot hold it.
pub fn tau_value(tau: f64) -> Value {
    if tau.is_finite() {
        json!(tau)
    } else {
        json!("inf")
    }
}
