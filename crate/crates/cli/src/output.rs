//! Atomic CSV and JSON writers. Every file carries the resolved config and
//! seed; JSON documents add a `generated_at` timestamp, the only field that
//! differs between two runs of the same config.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

/// Provenance shared by all files of one run.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub command: &'static str,
    pub seed: u64,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &'static str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            command,
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
        }
    }

    fn csv_comment(&self) -> String {
        format!(
            "# xdiff {} seed={} config={}\n",
            self.command,
            self.seed,
            serde_json::to_string(&self.config).expect("config serializes")
        )
    }

    pub fn json_document(&self, result: impl Serialize) -> io::Result<Vec<u8>> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let doc = json!({
            "generated_at": stamp,
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "result": result,
        });
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub fn optional(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

/// CSV table assembled in memory: a provenance comment line, a header and
/// LF-terminated records.
pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(provenance: &Provenance, header: &[String]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(provenance.csv_comment().as_bytes());
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(buf);
        writer.write_record(header).expect("in-memory write");
        Self { writer }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

/// Writes `bytes` to `dir/name` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target).map_err(|e| e.error)?;
    Ok(target)
}
