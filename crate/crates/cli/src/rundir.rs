//! Files of a run directory.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use smc_search::events::{read_log, ParsedLog};

use crate::error::CliError;

pub const CONFIG: &str = "config.json";
pub const EVENTS: &str = "events.jsonl";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const ERROR: &str = "error.json";
pub const EXPORT_DIR: &str = "export";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn has_log(&self) -> bool {
        self.path(EVENTS).is_file()
    }

    /// Reads the event log. A torn final line is tolerated only when asked.
    pub fn read_events(&self, allow_torn_tail: bool) -> Result<ParsedLog, CliError> {
        if !self.root.is_dir() {
            return Err(CliError::MissingRun(self.root.clone()));
        }
        let path = self.path(EVENTS);
        let file = File::open(&path).map_err(|_| CliError::MissingRun(path.clone()))?;
        Ok(read_log(BufReader::new(file), allow_torn_tail)?)
    }

    /// Writes `value` as pretty JSON via a temporary file and rename.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
        serde_json::to_writer_pretty(&mut tmp, value).map_err(std::io::Error::other)?;
        tmp.write_all(b"\n")?;
        tmp.persist(self.path(name)).map_err(|e| e.error)?;
        Ok(())
    }
}

pub fn ensure_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p)?;
    Ok(())
}
