use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{io_err, CliError, VERSION};

/// Record of one run: command, version, seed, every effective setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    /// Appends `key=value` lines under `prefix.`.
    pub fn extend_kv(&mut self, prefix: &str, text: &str) -> &mut Self {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("{prefix}.{k}"), v);
            }
        }
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={VERSION}");
        let _ = writeln!(s, "seed={}", self.seed);
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.txt");
        fs::write(&path, self.to_text()).map_err(|e| io_err(&path, e))
    }
}
