//! Chunk-size dependent flash timing model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ReadStats;
use crate::error::{Error, Result};

/// Environment variable that may name a default device-profile JSON file.
pub const PROFILE_ENV: &str = "SWAPFLOW_PROFILE";

/// Device profile: flash throughput per request chunk size, DRAM bandwidth and
/// a fixed per-request latency.
///
/// Throughput lookup is a floor step function: a request of `c` bytes uses
/// the entry with the largest chunk size `<= c` (the smallest entry for
/// requests below the table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    /// `(chunk_bytes, bytes_per_s)`, ascending in chunk size.
    pub bw_table: Vec<(u64, f64)>,
    pub bw_mem: f64,
    pub req_latency_s: f64,
}

impl Default for BandwidthModel {
    /// A UFS 4.0-class stand-in: 4 KB→200 MB/s, 16 KB→900 MB/s, 64 KB→3.6 GB/s,
    /// ≥256 KB→5.8 GB/s, 80 µs per request, 24 GB/s DRAM.
    fn default() -> Self {
        Self {
            bw_table: vec![(4096, 200e6), (16384, 900e6), (65536, 3.6e9), (262144, 5.8e9)],
            bw_mem: 24e9,
            req_latency_s: 80e-6,
        }
    }
}

impl BandwidthModel {
    pub fn validate(&self) -> Result<()> {
        if self.bw_table.is_empty() {
            return Err(Error::format("bandwidth table is empty"));
        }
        if self.bw_table.iter().any(|&(_, bw)| !(bw > 0.0 && bw.is_finite())) {
            return Err(Error::format("bandwidth table throughput must be positive"));
        }
        if self.bw_table.windows(2).any(|w| w[0].0 >= w[1].0 || w[0].1 > w[1].1) {
            return Err(Error::format(
                "bandwidth table must be ascending in chunk size with non-decreasing throughput",
            ));
        }
        if !(self.bw_mem > 0.0 && self.bw_mem.is_finite()) {
            return Err(Error::format("bw_mem must be positive"));
        }
        if !(self.req_latency_s >= 0.0 && self.req_latency_s.is_finite()) {
            return Err(Error::format("req_latency_s must be non-negative"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("device profile: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads `path`, else the file named by `SWAPFLOW_PROFILE`, else the default.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(PROFILE_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    /// Flash throughput for a request of `chunk` bytes (floor rule).
    pub fn throughput(&self, chunk: u64) -> f64 {
        let i = self.bw_table.partition_point(|&(c, _)| c <= chunk);
        self.bw_table[i.saturating_sub(1)].1
    }

    /// Time for a single request of `chunk` bytes, latency included.
    pub fn request_time(&self, chunk: u64) -> f64 {
        self.req_latency_s + chunk as f64 / self.throughput(chunk)
    }

    /// Achieved bandwidth when reading in requests of `chunk` bytes.
    pub fn effective_bandwidth(&self, chunk: u64) -> f64 {
        if chunk == 0 {
            return self.throughput(0);
        }
        chunk as f64 / self.request_time(chunk)
    }

    /// Peak flash throughput (the last table entry).
    pub fn peak(&self) -> f64 {
        self.bw_table.last().map_or(0.0, |e| e.1)
    }

    /// Time to stream `bytes` through DRAM.
    pub fn mem_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bw_mem
    }
}

/// `Σ (latency + bytes / throughput(chunk))` over the recorded requests.
pub fn simulate_read_time(stats: &ReadStats, bw: &BandwidthModel) -> f64 {
    stats.requests.iter().map(|&c| bw.request_time(c)).sum()
}
