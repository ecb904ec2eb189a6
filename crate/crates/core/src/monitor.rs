//! Runtime and memory-time efficiency scoring.
//!
//! A monitored command runs while a probe is polled at a fixed period; the
//! resulting memory trace is integrated above a floor with the trapezoid
//! rule, splitting segments exactly where they cross the floor.

use std::fs;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per GB used for every memory figure (binary gigabyte, matching
/// how GPU tools report memory).
pub const BYTES_PER_GB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds since the monitored process started.
    pub t: f64,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTrace {
    samples: Vec<Sample>,
    period_s: f64,
}

impl ResourceTrace {
    pub fn new(samples: Vec<Sample>, period_s: f64) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidParams(format!(
                    "trace times must increase strictly ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(ResourceTrace { samples, period_s })
    }

    /// Trace sampled from `(seconds, gigabytes)` pairs.
    pub fn from_gb(points: &[(f64, f64)], period_s: f64) -> Result<Self> {
        let samples = points
            .iter()
            .map(|&(t, gb)| Sample {
                t,
                mem_bytes: (gb * BYTES_PER_GB).round() as u64,
            })
            .collect();
        ResourceTrace::new(samples, period_s)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    /// Appends a sample if it is later than the last one.
    pub fn push(&mut self, t: f64, mem_bytes: u64) -> bool {
        if self.samples.last().is_some_and(|s| t <= s.t) {
            return false;
        }
        self.samples.push(Sample { t, mem_bytes });
        true
    }

    pub fn peak_gb(&self) -> f64 {
        self.samples.iter().map(|s| s.mem_bytes).max().unwrap_or(0) as f64 / BYTES_PER_GB
    }
}

/// Where memory readings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// External command printing one integer (bytes). `{pid}` in any
    /// argument is replaced by the monitored process id.
    Command(Vec<String>),
    /// Resident set size of the monitored process, from `/proc`.
    ProcessRss,
}

impl Probe {
    fn read(&self, pid: u32) -> Option<u64> {
        match self {
            Probe::ProcessRss => process_rss(pid),
            Probe::Command(argv) => {
                let args: Vec<String> = argv.iter().map(|a| a.replace("{pid}", &pid.to_string())).collect();
                let (prog, rest) = args.split_first()?;
                let out = match Command::new(prog).args(rest).stderr(Stdio::null()).output() {
                    Ok(o) => o,
                    Err(e) => {
                        warn!("memory probe {prog:?} failed: {e}");
                        return None;
                    }
                };
                let text = String::from_utf8_lossy(&out.stdout);
                match text.trim().parse::<u64>() {
                    Ok(v) => Some(v),
                    Err(_) => {
                        warn!("unparsable memory probe output {:?}; sample skipped", text.trim());
                        None
                    }
                }
            }
        }
    }
}

/// Resident set size in bytes from `/proc/<pid>/status`.
pub fn process_rss(pid: u32) -> Option<u64> {
    let status = fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Runs `cmd`, polling `probe` every `period_s` until it exits. A final
/// sample is taken after exit.
pub fn sample_run(cmd: &[String], probe: &Probe, period_s: f64) -> Result<(ExitStatus, ResourceTrace)> {
    if !(period_s.is_finite() && period_s > 0.0) {
        return Err(Error::InvalidParams(format!("sampling period must be > 0, got {period_s}")));
    }
    let (prog, args) = cmd.split_first().ok_or(Error::EmptyInput("no command to monitor"))?;
    let start = Instant::now();
    let mut child = Command::new(prog).args(args).spawn().map_err(|source| Error::Spawn {
        command: cmd.join(" "),
        source,
    })?;
    let pid = child.id();
    let mut trace = ResourceTrace {
        samples: Vec::new(),
        period_s,
    };
    let mut last_mem = 0u64;
    let period = Duration::from_secs_f64(period_s);
    loop {
        let exited = child.try_wait().map_err(|e| Error::io(prog, e))?;
        let reading = probe.read(pid);
        let t = start.elapsed().as_secs_f64();
        match (reading, exited) {
            (Some(m), _) => {
                last_mem = m;
                trace.push(t, m);
            }
            // a process that is gone has released its memory
            (None, Some(_)) if *probe == Probe::ProcessRss => {
                trace.push(t, 0);
            }
            (None, Some(_)) => {
                trace.push(t, last_mem);
            }
            (None, None) => {}
        }
        if let Some(status) = exited {
            return Ok((status, trace));
        }
        thread::sleep(period);
    }
}

/// Integral over time of `max(0, mem_gb - floor_gb)` in GB·s, using the
/// trapezoid rule with exact splitting at floor crossings.
pub fn auc_above_floor(trace: &ResourceTrace, floor_gb: f64) -> Result<f64> {
    if trace.samples.len() < 2 {
        return Err(Error::EmptyInput("memory trace needs at least two samples"));
    }
    let mut area = 0.0;
    for w in trace.samples.windows(2) {
        let dt = w[1].t - w[0].t;
        let f0 = w[0].mem_bytes as f64 / BYTES_PER_GB - floor_gb;
        let f1 = w[1].mem_bytes as f64 / BYTES_PER_GB - floor_gb;
        area += if f0 >= 0.0 && f1 >= 0.0 {
            0.5 * (f0 + f1) * dt
        } else if f0 <= 0.0 && f1 <= 0.0 {
            0.0
        } else {
            // one end above the floor: only the triangle above it counts
            let (up, down) = if f0 > 0.0 { (f0, f1) } else { (f1, f0) };
            let t_cross = dt * up / (up - down);
            0.5 * up * t_cross
        };
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfficiencyParams {
    pub runtime_tolerance_s: f64,
    pub memory_floor_gb: f64,
    pub period_s: f64,
}

impl Default for EfficiencyParams {
    fn default() -> Self {
        EfficiencyParams {
            runtime_tolerance_s: 15.0,
            memory_floor_gb: 4.0,
            period_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub runtime_s: f64,
    pub runtime_over_tolerance_s: f64,
    pub mem_auc_gb_s: f64,
    pub peak_mem_gb: f64,
}

pub fn efficiency_report(trace: &ResourceTrace, runtime_s: f64, params: &EfficiencyParams) -> EfficiencyReport {
    EfficiencyReport {
        runtime_s,
        runtime_over_tolerance_s: (runtime_s - params.runtime_tolerance_s).max(0.0),
        mem_auc_gb_s: auc_above_floor(trace, params.memory_floor_gb).unwrap_or(0.0),
        peak_mem_gb: trace.peak_gb(),
    }
}
