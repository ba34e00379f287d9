//! Scenario files. Every field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffserv::{AddrMatch, FlowMatch, KindMatch, Phb, QueueParams, SlaRule, SlaTable, TokenBucketParams};
use crate::net::{MobilityTrack, Pos, TopologyParams, CN_ADDR, MNP};
use crate::packet::{Address, SignalKind};
use crate::proto::{Detection, Mode, ProtoParams, Protocol};
use crate::sim::SimTime;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbrConfig {
    pub packet_bytes: u32,
    pub rate_bps: u64,
    pub start_s: f64,
    pub stop_s: f64,
}

impl Default for CbrConfig {
    fn default() -> Self {
        Self {
            packet_bytes: 1000,
            rate_bps: 100_000,
            start_s: 20.0,
            stop_s: 200.0,
        }
    }
}

impl CbrConfig {
    pub fn interval(&self) -> SimTime {
        SimTime::from_micros((self.packet_bytes as u64 * 8 * 1_000_000).div_ceil(self.rate_bps))
    }

    /// Number of packets in `[start, stop)`.
    pub fn packet_count(&self) -> u64 {
        let span = SimTime::from_secs_f64(self.stop_s).saturating_sub(SimTime::from_secs_f64(self.start_s));
        span.as_micros().div_ceil(self.interval().as_micros())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub waypoints: Vec<Pos>,
    pub start_s: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            waypoints: vec![Pos::new(149.5, 800.0), Pos::new(1500.0, 800.0)],
            start_s: 21.0,
        }
    }
}

/// Protocol timers in human units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    pub dad_delay_ms: f64,
    pub dad_delay_fast_ms: f64,
    pub ra_interval_ms: f64,
    pub ra_offsets_ms: Vec<f64>,
    pub bs_detection: Detection,
    pub binding_lifetime_s: f64,
    pub refresh_interval_s: f64,
    pub bu_retx_ms: f64,
    pub rr_timeout_s: f64,
    pub rr_retries: u32,
    pub token_lifetime_s: f64,
    pub nar_buffer_capacity: usize,
    pub max_depth: usize,
    pub signal_bytes: u32,
    /// `d.s.n` addresses already in use on access links.
    pub occupied: Vec<String>,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        let p = ProtoParams::default();
        Self {
            dad_delay_ms: p.dad_delay.as_millis_f64(),
            dad_delay_fast_ms: p.dad_delay_fast.as_millis_f64(),
            ra_interval_ms: p.ra_interval.as_millis_f64(),
            ra_offsets_ms: p.ra_offsets.iter().map(|t| t.as_millis_f64()).collect(),
            bs_detection: p.bs_detection,
            binding_lifetime_s: p.binding_lifetime.as_secs_f64(),
            refresh_interval_s: p.refresh_interval.as_secs_f64(),
            bu_retx_ms: p.bu_retx.as_millis_f64(),
            rr_timeout_s: p.rr_timeout.as_secs_f64(),
            rr_retries: p.rr_retries,
            token_lifetime_s: p.token_lifetime.as_secs_f64(),
            nar_buffer_capacity: p.nar_buffer_capacity,
            max_depth: p.max_depth,
            signal_bytes: p.signal_size,
            occupied: Vec::new(),
        }
    }
}

fn ms(x: f64) -> SimTime {
    SimTime::from_secs_f64(x / 1000.0)
}

fn parse_addr(s: &str) -> Result<Address, String> {
    let parts: Vec<u32> = s
        .split('.')
        .map(|x| x.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("bad address `{s}`"))?;
    match parts.as_slice() {
        [d, si, n] => Ok(Address::new(*d, *si, *n)),
        _ => Err(format!("bad address `{s}`")),
    }
}

impl ProtoConfig {
    pub fn to_params(&self) -> Result<ProtoParams, String> {
        Ok(ProtoParams {
            dad_delay: ms(self.dad_delay_ms),
            dad_delay_fast: ms(self.dad_delay_fast_ms),
            ra_interval: ms(self.ra_interval_ms),
            ra_offsets: self.ra_offsets_ms.iter().map(|&x| ms(x)).collect(),
            bs_detection: self.bs_detection,
            binding_lifetime: SimTime::from_secs_f64(self.binding_lifetime_s),
            refresh_interval: SimTime::from_secs_f64(self.refresh_interval_s),
            bu_retx: ms(self.bu_retx_ms),
            rr_timeout: SimTime::from_secs_f64(self.rr_timeout_s),
            rr_retries: self.rr_retries,
            token_lifetime: SimTime::from_secs_f64(self.token_lifetime_s),
            nar_buffer_capacity: self.nar_buffer_capacity,
            max_depth: self.max_depth,
            signal_size: self.signal_bytes,
            occupied: self.occupied.iter().map(|s| parse_addr(s)).collect::<Result<_, _>>()?,
        })
    }
}

/// Signalling EF, metered downstream data AF11, upstream data AF21, rest BE.
pub fn default_sla() -> SlaTable {
    let rule = |src, dst, kind, phb, meter| SlaRule {
        matcher: FlowMatch { src, dst, kind },
        phb,
        meter,
    };
    SlaTable {
        rules: vec![
            rule(None, None, Some(KindMatch::AnySignal), Phb::Ef, None),
            rule(
                Some(AddrMatch::Exact(CN_ADDR)),
                Some(AddrMatch::Site(MNP)),
                Some(KindMatch::Data),
                Phb::Af(1, 1),
                Some(TokenBucketParams::default()),
            ),
            rule(Some(AddrMatch::Site(MNP)), None, Some(KindMatch::Data), Phb::Af(2, 1), None),
        ],
        default: Phb::Be,
    }
}

/// Drop the `nth` (1-based) occurrence of a signal kind anywhere in the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub signal: String,
    pub nth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub protocol: Protocol,
    pub mode: Mode,
    pub dmr_speed_kmh: f64,
    pub seed: u64,
    pub sim_end_s: f64,
    /// Per AR–BS link, on top of the CBR flow. Zero disables.
    pub background_load_bps: u64,
    pub background_packet_bytes: u32,
    pub lead_time_ms: f64,
    pub l2_switch_ms: f64,
    /// Handover indices (0-based) that get no L2 trigger.
    pub force_reactive_at: Vec<usize>,
    /// Add a mirror CBR flow MNN → CN.
    pub upstream_cbr: bool,
    pub cbr: CbrConfig,
    pub track: TrackConfig,
    pub topology: TopologyParams,
    pub proto: ProtoConfig,
    pub queues: QueueParams,
    /// Replaces the built-in rule set when present.
    pub sla: Option<SlaTable>,
    pub faults: Vec<FaultConfig>,
    /// Keep per-packet hop lists in the report.
    pub record_paths: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::DiffFhNemo,
            mode: Mode::Predictive,
            dmr_speed_kmh: 60.0,
            seed: 1,
            sim_end_s: 200.0,
            background_load_bps: 0,
            background_packet_bytes: 1000,
            lead_time_ms: 200.0,
            l2_switch_ms: 50.0,
            force_reactive_at: Vec::new(),
            upstream_cbr: false,
            cbr: CbrConfig::default(),
            track: TrackConfig::default(),
            topology: TopologyParams::default(),
            proto: ProtoConfig::default(),
            queues: QueueParams::default(),
            sla: None,
            faults: Vec::new(),
            record_paths: true,
        }
    }
}

impl ScenarioConfig {
    /// Default scenario with 1.2 Mb/s of background load on every AR–BS link.
    pub fn congested() -> Self {
        Self {
            background_load_bps: 1_200_000,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.dmr_speed_kmh > 0.0 && self.dmr_speed_kmh.is_finite()) {
            return bad(format!("dmr_speed_kmh must be > 0, got {}", self.dmr_speed_kmh));
        }
        let c = &self.cbr;
        if !(c.start_s < c.stop_s && c.stop_s <= self.sim_end_s) {
            return bad(format!(
                "need cbr.start_s < cbr.stop_s <= sim_end_s, got {} / {} / {}",
                c.start_s, c.stop_s, self.sim_end_s
            ));
        }
        if c.start_s < 0.0 || c.rate_bps == 0 || c.packet_bytes == 0 {
            return bad("cbr needs a non-negative start, a rate and a packet size".into());
        }
        if self.track.waypoints.len() < 2 {
            return bad("track needs at least two waypoints".into());
        }
        if self.topology.cell_centers.len() != 4 {
            return bad("topology has exactly four cells".into());
        }
        if self.proto.ra_offsets_ms.len() != 4 {
            return bad("proto.ra_offsets_ms needs one entry per access router".into());
        }
        if self.background_load_bps > 0 && self.background_packet_bytes == 0 {
            return bad("background_packet_bytes must be > 0".into());
        }
        for f in &self.faults {
            if SignalKind::from_name(&f.signal).is_none() || f.nth == 0 {
                return bad(format!("bad fault `{}` #{}", f.signal, f.nth));
            }
        }
        self.queues.red.validate().map_err(ConfigError::Invalid)?;
        self.proto.to_params().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn proto_params(&self) -> ProtoParams {
        self.proto.to_params().expect("validated scenario")
    }

    pub fn sla_table(&self) -> SlaTable {
        self.sla.clone().unwrap_or_else(default_sla)
    }

    pub fn track(&self) -> MobilityTrack {
        MobilityTrack {
            waypoints: self.track.waypoints.clone(),
            speed: self.dmr_speed_kmh / 3.6,
            start_time: SimTime::from_secs_f64(self.track.start_s),
        }
    }

    pub fn sim_end(&self) -> SimTime {
        SimTime::from_secs_f64(self.sim_end_s)
    }

    pub fn lead_time(&self) -> SimTime {
        ms(self.lead_time_ms)
    }

    pub fn l2_switch(&self) -> SimTime {
        ms(self.l2_switch_ms)
    }

    pub fn diffserv(&self) -> bool {
        self.protocol.diffserv()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cbr_defaults() {
        let c = CbrConfig::default();
        assert_eq!(c.interval(), SimTime::from_millis(80));
        assert_eq!(c.packet_count(), 2250);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ScenarioConfig::from_toml("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ScenarioConfig::from_toml(
            "protocol = \"nemo-bs\"\nmode = \"reactive\"\ndmr_speed_kmh = 15\n[cbr]\nrate_bps = 200000\n[topology.air]\nbandwidth_bps = 11000000\ndelay_ms = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.protocol, Protocol::NemoBs);
        assert_eq!(c.mode, Mode::Reactive);
        assert_eq!(c.cbr.interval(), SimTime::from_millis(40));
        assert_eq!(c.topology.air.bandwidth_bps, 11_000_000);
        assert!(ScenarioConfig::from_toml("colour = 3").is_err());
        assert!(ScenarioConfig::from_toml("[cbr]\nburst = 3").is_err());
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(ScenarioConfig::from_toml("dmr_speed_kmh = 0").is_err());
        assert!(ScenarioConfig::from_toml("sim_end_s = 100").is_err());
        assert!(ScenarioConfig::from_toml("[cbr]\nstart_s = 50\nstop_s = 40").is_err());
        assert!(ScenarioConfig::from_toml("[[faults]]\nsignal = \"bogus\"\nnth = 1").is_err());
        assert!(ScenarioConfig::from_toml("[proto]\noccupied = [\"2.1\"]").is_err());
    }

    #[test]
    fn params_conversion() {
        let c = ScenarioConfig::from_toml("[proto]\ndad_delay_ms = 250\noccupied = [\"2.2.100\"]").unwrap();
        let p = c.proto_params();
        assert_eq!(p.dad_delay, SimTime::from_millis(250));
        assert_eq!(p.occupied, vec![Address::new(2, 2, 100)]);
        assert_eq!(ScenarioConfig::default().proto_params(), ProtoParams::default());
        assert_eq!(c.sla_table(), default_sla());
        assert!((c.track().speed - 60.0 / 3.6).abs() < 1e-12);
    }
}
