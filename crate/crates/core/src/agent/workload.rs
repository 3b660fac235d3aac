//! Benchmark workloads the agent knows how to run.

use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{resource_path, AgentError, RESULTS_PATH, WORKLOAD_PATH};
use crate::results::csv_from_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    SeqWrite(SeqWrite),
    Command(CommandWorkload),
}

/// Sequential write of `size_bytes` in `block_size` blocks, with the write
/// bandwidth sampled every `interval_ms`. Passes over the file repeat until
/// `min_runtime_secs` have elapsed, so short workloads still produce a
/// usable time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqWrite {
    #[serde(default = "default_file")]
    pub file: String,
    pub size_bytes: u64,
    pub block_size: u64,
    #[serde(default)]
    pub refill_buffers: bool,
    #[serde(default = "yes")]
    pub fsync: bool,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    #[serde(default)]
    pub min_runtime_secs: u64,
    pub bandwidth_metric: String,
    #[serde(default)]
    pub cpu_metric: Option<String>,
}

fn default_file() -> String {
    "data/seqwrite.dat".into()
}

fn yes() -> bool {
    true
}

fn default_interval() -> u64 {
    500
}

/// Arbitrary shell command run from the resource root. It may write its own
/// results to `$CWB_RESULTS`; a non-zero exit counts as a failed run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandWorkload {
    pub command: String,
}

impl Workload {
    pub fn load(root: &Path) -> Result<Self, AgentError> {
        let path = resource_path(root, WORKLOAD_PATH);
        let text = fs::read_to_string(&path).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))
    }

    /// Runs the workload and returns the results file content.
    pub fn execute(&self, root: &Path) -> Result<String, AgentError> {
        match self {
            Workload::SeqWrite(w) => w.execute(root),
            Workload::Command(c) => c.execute(root),
        }
    }
}

impl CommandWorkload {
    fn execute(&self, root: &Path) -> Result<String, AgentError> {
        let results = resource_path(root, RESULTS_PATH);
        let status = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .current_dir(root)
            .env("CWB_RESULTS", &results)
            .status()?;
        if !status.success() {
            return Err(AgentError::Workload(format!("`{}` exited with {status}", self.command)));
        }
        match fs::read_to_string(&results) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(csv_from_rows(std::iter::empty())),
            Err(e) => Err(e.into()),
        }
    }
}

impl SeqWrite {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.block_size == 0 || self.size_bytes < self.block_size {
            return Err(AgentError::Workload(format!(
                "size {} must be at least one block of {}",
                self.size_bytes, self.block_size
            )));
        }
        if self.interval_ms == 0 {
            return Err(AgentError::Workload("interval_ms must be positive".into()));
        }
        Ok(())
    }

    fn execute(&self, root: &Path) -> Result<String, AgentError> {
        self.validate()?;
        let mut rows = Vec::new();
        if let Some(m) = &self.cpu_metric {
            rows.push((m.clone(), cpu_model(), None));
        }
        let path = resource_path(root, &self.file);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        let samples = self.write_loop(&mut file)?;
        drop(file);
        fs::remove_file(&path)?;
        for (offset, kbps) in samples {
            rows.push((self.bandwidth_metric.clone(), format!("{kbps:.3}"), Some(offset)));
        }
        Ok(csv_from_rows(rows))
    }

    /// Returns `(offset_ms, KiB/s)` samples. A sample is only emitted for
    /// intervals in which at least one block completed.
    fn write_loop(&self, file: &mut File) -> Result<Vec<(u64, f64)>, AgentError> {
        let bs = self.block_size as usize;
        let mut buf = vec![0u8; bs];
        let mut rng = rand::thread_rng();
        rng.fill_bytes(&mut buf);
        let interval = Duration::from_millis(self.interval_ms);
        let min_runtime = Duration::from_secs(self.min_runtime_secs);
        let blocks_per_pass = self.size_bytes / self.block_size;

        let start = Instant::now();
        let mut samples = Vec::new();
        let mut k: u32 = 1;
        let mut window_bytes: u64 = 0;
        let mut window_start = start;
        let mut passes = 0u64;
        loop {
            file.seek(SeekFrom::Start(0))?;
            for _ in 0..blocks_per_pass {
                if self.refill_buffers {
                    rng.fill_bytes(&mut buf);
                }
                file.write_all(&buf)?;
                if self.fsync {
                    file.sync_data()?;
                }
                window_bytes += self.block_size;
                let now = Instant::now();
                if now.duration_since(start) >= interval * k {
                    let secs = now.duration_since(window_start).as_secs_f64();
                    samples.push((u64::from(k) * self.interval_ms, window_bytes as f64 / 1024.0 / secs));
                    // Skip boundaries a slow block jumped over.
                    while now.duration_since(start) >= interval * k {
                        k += 1;
                    }
                    window_bytes = 0;
                    window_start = now;
                }
            }
            passes += 1;
            if start.elapsed() >= min_runtime {
                break;
            }
        }
        if samples.is_empty() {
            // Everything fit in the first interval; report the whole run.
            let secs = start.elapsed().as_secs_f64().max(1e-6);
            let total = passes * blocks_per_pass * self.block_size;
            samples.push((self.interval_ms, total as f64 / 1024.0 / secs));
        }
        Ok(samples)
    }
}

/// CPU model name from `/proc/cpuinfo`, or the architecture when unknown.
pub fn cpu_model() -> String {
    fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_owned())
        })
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| std::env::consts::ARCH.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seqwrite_samples_are_positive_and_increasing() {
        let dir = tempfile::tempdir().unwrap();
        let w = SeqWrite {
            file: "data/t.dat".into(),
            size_bytes: 256 * 1024,
            block_size: 4096,
            refill_buffers: true,
            fsync: false,
            interval_ms: 20,
            min_runtime_secs: 1,
            bandwidth_metric: "bw".into(),
            cpu_metric: Some("cpu".into()),
        };
        let csv = w.execute(dir.path()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("metric,value,offset_ms"));
        assert!(lines.next().unwrap().starts_with("cpu,"));
        let mut last = 0;
        let mut n = 0;
        for l in lines {
            let parts: Vec<&str> = l.split(',').collect();
            assert_eq!(parts[0], "bw");
            assert!(parts[1].parse::<f64>().unwrap() > 0.0);
            let off: u64 = parts[2].parse().unwrap();
            assert!(off > last);
            last = off;
            n += 1;
        }
        assert!(n >= 20, "only {n} samples");
        assert!(!dir.path().join("data/t.dat").exists());
    }

    #[test]
    fn rejects_size_smaller_than_block() {
        let w = SeqWrite {
            file: default_file(),
            size_bytes: 10,
            block_size: 4096,
            refill_buffers: false,
            fsync: true,
            interval_ms: 500,
            min_runtime_secs: 0,
            bandwidth_metric: "bw".into(),
            cpu_metric: None,
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn workload_json_shape() {
        let w: Workload = serde_json::from_str(
            r#"{"kind":"seq_write","size_bytes":1024,"block_size":512,"bandwidth_metric":"bw"}"#,
        )
        .unwrap();
        match w {
            Workload::SeqWrite(s) => {
                assert!(s.fsync);
                assert_eq!(s.interval_ms, 500);
            }
            _ => panic!(),
        }
    }
}
