//! Timing of the tail DP against literal enumeration.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pb::{pb_tail, pb_tail_enumerate, ProbVector, ENUMERATION_LIMIT};

/// Both methods must agree to this tolerance for the timing to count.
const AGREEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub threshold: usize,
    pub dp_secs_per_call: f64,
    pub enum_secs_per_call: f64,
    /// Enumeration time over DP time.
    pub ratio: f64,
    pub dp_calls: u64,
    pub enum_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub optimized_build: bool,
    pub crate_version: String,
    pub unix_time: u64,
}

impl Machine {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            optimized_build: !cfg!(debug_assertions),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            unix_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: Machine,
    pub rows: Vec<BenchRow>,
    /// DP-only timing at a size enumeration cannot reach.
    pub large_d: usize,
    pub large_secs_per_call: f64,
    /// The DP beats enumeration at every measured size above 12.
    pub dp_faster_beyond_12: bool,
}

impl BenchReport {
    pub fn row(&self, d: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.d == d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub min_d: usize,
    pub max_d: usize,
    pub large_d: usize,
    /// Minimum wall time spent per measurement.
    pub min_time: Duration,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            min_d: 8,
            max_d: 22,
            large_d: 30,
            min_time: Duration::from_millis(50),
            seed: 0,
        }
    }
}

/// Mean seconds per call of `f`, repeating until `min_time` has passed.
fn time_per_call(min_time: Duration, mut f: impl FnMut()) -> (f64, u64) {
    f();
    let start = Instant::now();
    let mut calls = 0u64;
    loop {
        f();
        calls += 1;
        let elapsed = start.elapsed();
        if elapsed >= min_time {
            return (elapsed.as_secs_f64() / calls as f64, calls);
        }
    }
}

fn random_probs(d: usize, rng: &mut ChaCha8Rng) -> Result<ProbVector> {
    ProbVector::new((0..d).map(|_| rng.random_range(0.05..0.95)).collect())
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.min_d == 0 || opts.min_d > opts.max_d || opts.max_d > ENUMERATION_LIMIT {
        return Err(Error::invalid(format!(
            "sizes must satisfy 1 <= min <= max <= {ENUMERATION_LIMIT}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for d in opts.min_d..=opts.max_d {
        let p = random_probs(d, &mut rng)?;
        let t = d.div_ceil(2);
        let dp = pb_tail(&p, t)?;
        let en = pb_tail_enumerate(&p, t)?;
        if (dp - en).abs() > AGREEMENT_TOL {
            return Err(Error::invalid(format!("d'={d}: DP {dp} disagrees with enumeration {en}")));
        }
        let (dp_secs, dp_calls) = time_per_call(opts.min_time, || {
            black_box(pb_tail(black_box(&p), black_box(t)).ok());
        });
        let (enum_secs, enum_calls) = time_per_call(opts.min_time, || {
            black_box(pb_tail_enumerate(black_box(&p), black_box(t)).ok());
        });
        log::info!("d'={d}: dp {dp_secs:.3e}s enum {enum_secs:.3e}s");
        rows.push(BenchRow {
            d,
            threshold: t,
            dp_secs_per_call: dp_secs,
            enum_secs_per_call: enum_secs,
            ratio: enum_secs / dp_secs,
            dp_calls,
            enum_calls,
        });
    }
    let p = random_probs(opts.large_d, &mut rng)?;
    let t = opts.large_d.div_ceil(2);
    let (large_secs, _) = time_per_call(opts.min_time, || {
        black_box(pb_tail(black_box(&p), black_box(t)).ok());
    });
    let dp_faster_beyond_12 = rows.iter().filter(|r| r.d > 12).all(|r| r.ratio > 1.0);
    Ok(BenchReport {
        machine: Machine::current(),
        rows,
        large_d: opts.large_d,
        large_secs_per_call: large_secs,
        dp_faster_beyond_12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_report() {
        let report = run_bench(&BenchOptions {
            min_d: 8,
            max_d: 14,
            large_d: 30,
            min_time: Duration::from_millis(2),
            seed: 1,
        })
        .unwrap();
        assert_eq!(report.rows.len(), 7);
        let r8 = report.row(8).unwrap();
        assert!(r8.dp_secs_per_call < 1.0 && r8.enum_secs_per_call < 1.0);
        assert_eq!(r8.threshold, 4);
        assert!(report.machine.logical_cpus >= 1);
        let json = serde_json::to_string(&report).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(run_bench(&BenchOptions {
            max_d: 25,
            ..Default::default()
        })
        .is_err());
    }
}
