//! Newline-delimited JSON metrics stream. Records carry no wall-clock
//! values so that equal seeds give byte-identical streams; timings go to
//! a separate sidecar file.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// Scalars of one generator step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub phase: u8,
    pub step: u64,
    /// Mean discriminator hinge loss over the step's D updates.
    pub d_adv: f64,
    pub g_adv: f64,
    /// Mean box-regression loss over the step's D updates.
    pub sp: f64,
    pub d_updates: u32,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        self.d_adv.is_finite() && self.g_adv.is_finite() && self.sp.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Loss(LossRecord),
    Monitor { phase: u8, step: u64, fid: f64 },
    PhaseSwitch { step: u64, reason: String },
    Eval(EvalReport),
    Abort { phase: u8, step: u64, detail: String },
}

#[derive(Debug, Clone, serde::Serialize)]
struct Timing {
    phase: u8,
    step: u64,
    wall_ms: f64,
}

#[derive(Debug)]
pub struct MetricsSink {
    path: PathBuf,
    file: File,
    timing: File,
    lines: u64,
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Keeps the first `keep` lines of `path` (if it exists).
fn truncate_lines(path: &Path, keep: u64) -> Result<u64> {
    let Ok(file) = File::open(path) else {
        return Ok(0);
    };
    let mut kept = String::new();
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        if n == keep {
            break;
        }
        kept.push_str(&line.map_err(|e| Error::io(path, e))?);
        kept.push('\n');
        n += 1;
    }
    crate::io::write_atomic(path, kept.as_bytes())?;
    Ok(n)
}

impl MetricsSink {
    /// Opens `metrics.ndjson` and `timing.ndjson` in `dir`. With `keep`,
    /// an existing stream is cut back to that many records, which makes
    /// resuming from a checkpoint idempotent.
    pub fn open(dir: &Path, keep: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.ndjson");
        let lines = match keep {
            Some(k) => truncate_lines(&path, k)?,
            None => {
                crate::io::write_atomic(&path, b"")?;
                crate::io::write_atomic(&dir.join("timing.ndjson"), b"")?;
                0
            }
        };
        Ok(MetricsSink {
            file: open_append(&path)?,
            timing: open_append(&dir.join("timing.ndjson"))?,
            path,
            lines,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn append(&mut self, record: &Record) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.lines += 1;
        Ok(())
    }

    pub fn time(&mut self, phase: u8, step: u64, wall_ms: f64) -> Result<()> {
        let mut line = serde_json::to_string(&Timing { phase, step, wall_ms }).expect("timings serialize");
        line.push('\n');
        self.timing.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics stream.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(step: u64) -> Record {
        Record::Loss(LossRecord {
            phase: 1,
            step,
            d_adv: 1.5,
            g_adv: -0.25,
            sp: 0.125,
            d_updates: 5,
        })
    }

    #[test]
    fn records_round_trip_and_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricsSink::open(dir.path(), None).unwrap();
        for s in 1..=4 {
            sink.append(&loss(s)).unwrap();
        }
        drop(sink);
        let text = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        assert!(text.starts_with("{\"kind\":\"loss\",\"phase\":1,\"step\":1,"));
        let mut sink = MetricsSink::open(dir.path(), Some(2)).unwrap();
        assert_eq!(sink.lines(), 2);
        sink.append(&loss(3)).unwrap();
        let back = read_records(sink.path()).unwrap();
        assert_eq!(back, vec![loss(1), loss(2), loss(3)]);
    }
}
