//! `manifest.json`: provenance, stage timings and output checksums.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::output::OutputDir;

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_hit: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MethodTiming {
    pub signals: usize,
    pub total_seconds: f64,
    pub seconds_per_signal: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheInfo {
    pub path: String,
    pub hit: bool,
    pub sha256: String,
    pub neig: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub config_sha256: Option<String>,
    pub threads: usize,
    pub stages: Vec<StageTiming>,
    pub signal_timing: BTreeMap<String, MethodTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eig_cache: Option<CacheInfo>,
    pub files: BTreeMap<String, String>,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: Option<String>, threads: usize) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: spectral_dmri::VERSION,
            command: command.to_string(),
            config_sha256,
            threads,
            stages: Vec::new(),
            signal_timing: BTreeMap::new(),
            eig_cache: None,
            files: BTreeMap::new(),
            complete: false,
            error: None,
        }
    }

    /// Runs `f` as a named stage and records its wall time.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            cache_hit: None,
        });
        out
    }

    pub fn mark_cache_hit(&mut self, stage: &str, hit: bool) {
        if let Some(s) = self.stages.iter_mut().rev().find(|s| s.name == stage) {
            s.cache_hit = Some(hit);
        }
    }

    pub fn add_signal_time(&mut self, method: &str, seconds: f64) {
        let t = self.signal_timing.entry(method.to_string()).or_default();
        t.signals += 1;
        t.total_seconds += seconds;
        t.seconds_per_signal = t.total_seconds / t.signals as f64;
    }

    /// Writes the manifest, listing every file emitted so far.
    pub fn write(&mut self, out: &OutputDir) -> Result<()> {
        self.files = out.files();
        let mut text = serde_json::to_string_pretty(self).expect("serializable manifest");
        text.push('\n');
        crate::output::write_atomic(&out.path("manifest.json"), text.as_bytes())
    }
}
