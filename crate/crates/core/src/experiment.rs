//! Single runs, speed sweeps and their CSV form.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::metrics::MetricsReport;
use crate::proto::Protocol;
use crate::world::{simulate, RunOutput};

pub const SWEEP_SPEEDS_KMH: [f64; 6] = [15.0, 30.0, 45.0, 60.0, 75.0, 90.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub protocol: &'static str,
    pub mode: &'static str,
    pub speed_kmh: String,
    pub seed: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub loss_pct: String,
    pub fwd_rate_pct: String,
    pub ho_latency_mean_ms: String,
    pub ho_latency_max_ms: String,
    pub delay_mean_ms: String,
}

impl From<&MetricsReport> for CsvRow {
    fn from(r: &MetricsReport) -> Self {
        CsvRow {
            protocol: r.protocol.name(),
            mode: r.mode.name(),
            speed_kmh: format!("{}", r.speed_kmh),
            seed: r.seed,
            sent: r.sent,
            delivered: r.delivered,
            dropped: r.dropped,
            loss_pct: format!("{:.3}", r.loss_pct),
            fwd_rate_pct: format!("{:.3}", r.forwarding_rate_pct),
            ho_latency_mean_ms: format!("{:.3}", r.ho_latency_mean_ms()),
            ho_latency_max_ms: format!("{:.3}", r.ho_latency_max_ms()),
            delay_mean_ms: format!("{:.3}", r.delay_mean_ms()),
        }
    }
}

pub fn run(cfg: &ScenarioConfig, trace: bool) -> (RunOutput, MetricsReport) {
    let out = simulate(cfg, trace);
    let rep = MetricsReport::from_run(&out);
    (out, rep)
}

/// One scenario per (protocol, speed, seed), in that nesting order.
pub fn sweep_points(base: &ScenarioConfig, protocols: &[Protocol], speeds: &[f64], seeds: &[u64]) -> Vec<ScenarioConfig> {
    let mut v = Vec::new();
    for &p in protocols {
        for &s in speeds {
            for &seed in seeds {
                let mut c = base.clone();
                c.protocol = p;
                c.dmr_speed_kmh = s;
                c.seed = seed;
                v.push(c);
            }
        }
    }
    v
}

/// Runs every point on a worker pool; results come back in input order.
pub fn run_all(points: &[ScenarioConfig], threads: usize) -> Vec<MetricsReport> {
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, points.len().max(1));
    let mut done: Vec<(usize, MetricsReport)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(c) = points.get(i) else { break };
                        mine.push((i, run(c, false).1));
                    }
                    mine
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn sweep(base: &ScenarioConfig, protocols: &[Protocol], speeds: &[f64], seeds: &[u64]) -> Vec<MetricsReport> {
    run_all(&sweep_points(base, protocols, speeds, seeds), default_threads())
}

pub fn write_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(CsvRow::from(r))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn csv_string(reports: &[MetricsReport]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, reports).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub const CSV_HEADER: &str = "protocol,mode,speed_kmh,seed,sent,delivered,dropped,loss_pct,fwd_rate_pct,ho_latency_mean_ms,ho_latency_max_ms,delay_mean_ms";
