//! Per-run results and their CSV form.

use super::config::{SecurityMode, StrategyKind};
use serde::Serialize;
use std::io;

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "scenario_id",
    "seed",
    "security_mode",
    "strategy",
    "alpha",
    "beta",
    "beacon_interval_ms",
    "vehicle_count",
    "certificate_fraction",
    "offered_load_Bps",
    "p95_time_to_trust_ms",
    "crashes",
];

/// Verification queue depth across all vehicles at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueSample {
    pub t_ms: u64,
    pub max_depth: usize,
    pub mean_depth: f64,
    /// Evictions so far, summed over vehicles.
    pub evictions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario_id: String,
    pub seed: u64,
    pub security_mode: SecurityMode,
    pub strategy: StrategyKind,
    pub alpha: u32,
    pub beta: u32,
    pub beacon_interval_ms: u64,
    pub vehicle_count: usize,
    /// Beacons sent after warm-up.
    pub beacons_sent: u64,
    /// Beacons sent after warm-up that carried a certificate.
    pub beacons_with_certificate: u64,
    /// `beacons_with_certificate / beacons_sent`, 0 when nothing was sent.
    pub certificate_fraction: f64,
    /// Beacons over the whole run.
    pub total_beacons_sent: u64,
    pub beacons_per_vehicle: Vec<u64>,
    /// Frame bytes over the whole run divided by its duration.
    pub offered_load_bps: f64,
    pub frames_received: u64,
    pub frames_lost: u64,
    /// Verification units started after warm-up, per vehicle per second.
    pub verification_rate_per_s: f64,
    pub queue_depth: Vec<QueueSample>,
    pub evictions: u64,
    /// Over all (vehicle, neighbor pseudonym) pairs; `None` without secured beacons.
    pub p50_time_to_trust_ms: Option<u64>,
    pub p95_time_to_trust_ms: Option<u64>,
    pub crashes: usize,
    /// Distance travelled by each vehicle when the run ended.
    pub stop_positions: Vec<f64>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[u64], q: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

impl Metrics {
    pub fn csv_record(&self) -> [String; 12] {
        [
            self.scenario_id.clone(),
            self.seed.to_string(),
            self.security_mode.name().to_string(),
            strategy_name(self.strategy).to_string(),
            self.alpha.to_string(),
            self.beta.to_string(),
            self.beacon_interval_ms.to_string(),
            self.vehicle_count.to_string(),
            self.certificate_fraction.to_string(),
            self.offered_load_bps.to_string(),
            self.p95_time_to_trust_ms.map(|v| v.to_string()).unwrap_or_default(),
            self.crashes.to_string(),
        ]
    }

    /// One-screen human summary.
    pub fn summary(&self) -> String {
        let ttt = |v: Option<u64>| v.map_or("n/a".to_string(), |v| format!("{v} ms"));
        format!(
            "scenario {} (seed {}, {}, {} strategy)\n\
             beacons after warm-up: {} ({} with certificate, fraction {:.4})\n\
             offered load: {:.1} B/s, frames received {} / lost {}\n\
             verification rate: {:.2} units/s per vehicle, evictions {}\n\
             time to trust: p50 {}, p95 {}\n\
             crashes: {}",
            self.scenario_id,
            self.seed,
            self.security_mode,
            strategy_name(self.strategy),
            self.beacons_sent,
            self.beacons_with_certificate,
            self.certificate_fraction,
            self.offered_load_bps,
            self.frames_received,
            self.frames_lost,
            self.verification_rate_per_s,
            self.evictions,
            ttt(self.p50_time_to_trust_ms),
            ttt(self.p95_time_to_trust_ms),
            self.crashes,
        )
    }
}

pub fn strategy_name(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::AlwaysAttach => "always-attach",
        StrategyKind::Periodic => "periodic",
        StrategyKind::NeighborTriggered => "neighbor-triggered",
    }
}

/// Writes the header and one row per run.
pub fn write_csv<W: io::Write>(out: W, rows: &[Metrics]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for m in rows {
        w.write_record(m.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[Metrics]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}
