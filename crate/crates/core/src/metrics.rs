//! Per-run figures computed from the raw packet records.

use crate::net::{NodeId, Topology};
use crate::proto::{Mode, Protocol};
use crate::sim::SimTime;
use crate::world::{RunOutput, CBR_FLOW};

/// One CBR delivery and the base station it came through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u64,
    pub at: SimTime,
    pub bs: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandoverSample {
    pub old_bs: NodeId,
    pub new_bs: NodeId,
    pub last_old: SimTime,
    pub first_new: SimTime,
    /// Same MAP domain on both sides; `None` when the topology has no MAP
    /// for one of them.
    pub micro: Option<bool>,
}

impl HandoverSample {
    pub fn latency(&self) -> SimTime {
        self.first_new.saturating_sub(self.last_old)
    }
}

/// Splits a delivery sequence at each change of serving base station.
pub fn handover_samples(deliveries: &[Delivery], topo: Option<&Topology>) -> Vec<HandoverSample> {
    let mut ds = deliveries.to_vec();
    ds.sort_by_key(|d| (d.at, d.seq));
    ds.windows(2)
        .filter(|w| w[0].bs != w[1].bs)
        .map(|w| HandoverSample {
            old_bs: w[0].bs,
            new_bs: w[1].bs,
            last_old: w[0].at,
            first_new: w[1].at,
            micro: topo.map(|t| t.map_of_ar(t.ar_of_bs(w[0].bs)) == t.map_of_ar(t.ar_of_bs(w[1].bs))),
        })
        .collect()
}

/// First arrival through the new BS minus last arrival through the old one,
/// per handover.
pub fn compute_handover_latency(deliveries: &[Delivery]) -> Vec<SimTime> {
    handover_samples(deliveries, None).iter().map(HandoverSample::latency).collect()
}

pub fn compute_loss(sent: u64, dropped: u64) -> f64 {
    if sent == 0 {
        0.0
    } else {
        100.0 * dropped as f64 / sent as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub mode: Mode,
    pub speed_kmh: f64,
    pub seed: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub duplicates: u64,
    pub loss_pct: f64,
    pub forwarding_rate_pct: f64,
    pub handovers: Vec<HandoverSample>,
    pub handover_latencies: Vec<SimTime>,
    pub per_packet_delay: Vec<(u64, SimTime)>,
    pub per_packet_path: Vec<(u64, Vec<NodeId>)>,
    /// Queue drops per traffic class, summed over every link.
    pub queue_drops: [u64; 6],
}

fn mean_ms(xs: impl Iterator<Item = SimTime>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x.as_millis_f64();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    /// Figures for the downstream CBR flow.
    pub fn from_run(out: &RunOutput) -> MetricsReport {
        let recs: Vec<_> = out.flow(CBR_FLOW).collect();
        let sent = recs.len() as u64;
        let delivered = recs.iter().filter(|r| r.delivered_at.is_some()).count() as u64;
        let dropped = recs.iter().filter(|r| r.dropped.is_some()).count() as u64;
        let deliveries: Vec<Delivery> = recs
            .iter()
            .filter_map(|r| {
                Some(Delivery {
                    seq: r.seq,
                    at: r.delivered_at?,
                    bs: r.serving_bs(&out.topo)?,
                })
            })
            .collect();
        let handovers = handover_samples(&deliveries, Some(&out.topo));
        MetricsReport {
            protocol: out.protocol,
            mode: out.mode,
            speed_kmh: out.speed_kmh,
            seed: out.seed,
            sent,
            delivered,
            dropped,
            in_flight: out.in_flight[CBR_FLOW as usize],
            duplicates: recs.iter().map(|r| u64::from(r.duplicates)).sum(),
            loss_pct: compute_loss(sent, dropped),
            forwarding_rate_pct: if sent == 0 { 0.0 } else { 100.0 * delivered as f64 / sent as f64 },
            handover_latencies: handovers.iter().map(HandoverSample::latency).collect(),
            handovers,
            per_packet_delay: recs.iter().filter_map(|r| Some((r.seq, r.delay()?))).collect(),
            per_packet_path: recs.iter().map(|r| (r.seq, r.path())).collect(),
            queue_drops: out.queue_counters.iter().fold([0; 6], |mut acc, (_, _, c)| {
                for (a, k) in acc.iter_mut().zip(c) {
                    *a += k.drops();
                }
                acc
            }),
        }
    }

    /// `sent == delivered + dropped + in_flight`, with in-flight recounted
    /// from queues rather than derived.
    pub fn conserved(&self) -> bool {
        self.sent == self.delivered + self.dropped + self.in_flight
    }

    pub fn ho_latency_mean_ms(&self) -> f64 {
        mean_ms(self.handover_latencies.iter().copied())
    }

    pub fn ho_latency_max_ms(&self) -> f64 {
        self.handover_latencies.iter().map(|t| t.as_millis_f64()).fold(0.0, f64::max)
    }

    pub fn delay_mean_ms(&self) -> f64 {
        mean_ms(self.per_packet_delay.iter().map(|d| d.1))
    }

    /// Latencies of the micro (`true`) or macro (`false`) handovers.
    pub fn latencies_where(&self, micro: bool) -> Vec<SimTime> {
        self.handovers
            .iter()
            .filter(|h| h.micro == Some(micro))
            .map(HandoverSample::latency)
            .collect()
    }
}
