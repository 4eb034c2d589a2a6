//! Output tree with atomic writes and the CSV/JSON row formats.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spectral_dmri::records::{Method, SignalRecord, SolverStats};
use spectral_dmri::seq::{Gradient, Pgse};
use spectral_dmri::Complex64;

use crate::error::{CliError, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The output directory. Every file written through it is recorded with its
/// SHA-256 for the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Mutex<BTreeMap<String, String>>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<OutputDir> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.files
            .lock()
            .expect("file table poisoned")
            .insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable output");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_table(&self, rel: &str, table: &Table) -> Result<()> {
        self.write(rel, &table.to_bytes())
    }

    pub fn files(&self) -> BTreeMap<String, String> {
        self.files.lock().expect("file table poisoned").clone()
    }
}

/// A CSV table built from preformatted cells.
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Table {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// One line of `signals.csv` / `signals.json`. `gx, gy, gz` is the unit
/// gradient direction; the amplitude is separate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub seq_id: String,
    pub delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    pub big_delta_ms: f64,
    pub bvalue_s_mm2: f64,
    pub gx: f64,
    pub gy: f64,
    pub gz: f64,
    #[serde(rename = "amplitude_T_m")]
    pub amplitude_t_m: f64,
    pub method: String,
    pub re_signal: f64,
    pub im_signal: f64,
    pub attenuation: f64,
    pub neig: Option<usize>,
    pub atol: Option<f64>,
    pub rtol: Option<f64>,
    pub steps_taken: Option<usize>,
}

impl SignalRow {
    pub fn from_record(seq_id: &str, r: &SignalRecord) -> SignalRow {
        let d = r.gradient.direction();
        SignalRow {
            seq_id: seq_id.to_string(),
            delta_ms: r.sequence.delta(),
            big_delta_ms: r.sequence.big_delta(),
            bvalue_s_mm2: r.bvalue,
            gx: d[0],
            gy: d[1],
            gz: d[2],
            amplitude_t_m: r.gradient.amplitude(),
            method: r.method.tag().to_string(),
            re_signal: r.signal.re,
            im_signal: r.signal.im,
            attenuation: r.attenuation(),
            neig: r.neig,
            atol: r.solver.map(|s| s.atol),
            rtol: r.solver.map(|s| s.rtol),
            steps_taken: r.solver.map(|s| s.steps_taken),
        }
    }

    /// Rebuilds the record. S₀ follows from the signal and attenuation.
    pub fn to_record(&self) -> std::result::Result<SignalRecord, String> {
        let method = Method::from_tag(&self.method).ok_or_else(|| format!("unknown method `{}`", self.method))?;
        let seq = Pgse::new(self.delta_ms, self.big_delta_ms).map_err(|e| e.to_string())?;
        let g = Gradient::new([self.gx, self.gy, self.gz], self.amplitude_t_m).map_err(|e| e.to_string())?;
        let signal = Complex64::new(self.re_signal, self.im_signal);
        let s0 = if self.attenuation > 0.0 {
            signal.norm() / self.attenuation
        } else {
            f64::NAN
        };
        let solver = match (self.atol, self.rtol, self.steps_taken) {
            (Some(atol), Some(rtol), Some(steps_taken)) => Some(SolverStats {
                atol,
                rtol,
                steps_taken,
            }),
            _ => None,
        };
        Ok(SignalRecord {
            method,
            sequence: seq,
            gradient: g,
            bvalue: self.bvalue_s_mm2,
            signal,
            s0,
            neig: self.neig,
            solver,
        })
    }
}

pub fn signal_csv(rows: &[SignalRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    if rows.is_empty() {
        return Vec::new();
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_signal_csv(path: &Path) -> Result<Vec<SignalRow>> {
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut rd = csv::Reader::from_reader(text.as_slice());
    rd.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CliError::Format {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn signal_rows_round_trip() {
        let seq = Pgse::new(10.6, 13.0).unwrap();
        let g = Gradient::new([0.6, 0.8, 0.0], 0.05).unwrap();
        let mut rec = SignalRecord::new(Method::Btpde, seq, g, Complex64::new(0.25, -1e-3), 8.0);
        rec.solver = Some(SolverStats {
            atol: 1e-4,
            rtol: 1e-2,
            steps_taken: 17,
        });
        let row = SignalRow::from_record("seq1", &rec);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, signal_csv(std::slice::from_ref(&row))).unwrap();
        let back = read_signal_csv(&p).unwrap();
        assert_eq!(back, vec![row.clone()]);
        let r = back[0].to_record().unwrap();
        assert_eq!(r.signal, rec.signal);
        assert_eq!(r.solver, rec.solver);
        assert!((r.s0 - 8.0).abs() < 1e-12);
    }
}
