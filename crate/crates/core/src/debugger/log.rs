use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protomodel::ScoringSheet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Disable,
    Enable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// RFC 3339 UTC timestamp.
    pub timestamp: String,
    pub prototype: usize,
    pub action: Action,
    pub actor: String,
    /// Opaque references to metrics snapshots (e.g. a model version).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_after: Option<String>,
}

impl LogEntry {
    pub fn now(prototype: usize, action: Action, actor: &str) -> Self {
        LogEntry {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            prototype,
            action,
            actor: actor.to_string(),
            metrics_before: None,
            metrics_after: None,
        }
    }
}

/// Append-only record of disable/enable actions, optionally mirrored to a
/// JSON-lines file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionLog {
    entries: Vec<LogEntry>,
    path: Option<PathBuf>,
}

impl InterventionLog {
    pub fn in_memory() -> Self {
        InterventionLog::default()
    }

    /// Opens (or starts) a log file; existing entries are loaded.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_lines(&text, path)?
        } else {
            Vec::new()
        };
        Ok(InterventionLog {
            entries,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Applies every entry in order to a copy of `base`.
    pub fn replay(&self, base: &ScoringSheet) -> Result<ScoringSheet> {
        let mut sheet = base.clone();
        for e in &self.entries {
            match e.action {
                Action::Disable => sheet.disable(&[e.prototype])?,
                Action::Enable => sheet.enable(&[e.prototype])?,
            };
        }
        Ok(sheet)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn parse_lines(text: &str, path: &Path) -> Result<Vec<LogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                what: "intervention log",
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
