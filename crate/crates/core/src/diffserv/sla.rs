use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::phb::Phb;
use super::token_bucket::{Profile, TokenBucket, TokenBucketParams};
use crate::packet::{Address, Packet, PacketKind, Prefix, SignalKind};
use crate::sim::SimTime;

/// `d.s.n` exact, `d.s` site prefix, `d` whole domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddrMatch {
    Exact(Address),
    Site(Prefix),
    Domain(u32),
}

impl AddrMatch {
    pub fn matches(self, a: Address) -> bool {
        match self {
            AddrMatch::Exact(x) => x == a,
            AddrMatch::Site(p) => p.contains(a),
            AddrMatch::Domain(d) => a.domain == d,
        }
    }
}

impl FromStr for AddrMatch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Result<Vec<u32>, _> = s.trim().split('.').map(str::parse::<u32>).collect();
        match parts.map_err(|_| format!("bad address pattern `{s}`"))?.as_slice() {
            [d] => Ok(AddrMatch::Domain(*d)),
            [d, si] => Ok(AddrMatch::Site(Prefix::new(*d, *si))),
            [d, si, n] => Ok(AddrMatch::Exact(Address::new(*d, *si, *n))),
            _ => Err(format!("bad address pattern `{s}`")),
        }
    }
}

impl fmt::Display for AddrMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddrMatch::Exact(a) => write!(f, "{a}"),
            AddrMatch::Site(p) => write!(f, "{p}"),
            AddrMatch::Domain(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindMatch {
    Data,
    AnySignal,
    Signal(SignalKind),
}

impl KindMatch {
    pub fn matches(self, k: PacketKind) -> bool {
        match (self, k) {
            (KindMatch::Data, PacketKind::Data) => true,
            (KindMatch::AnySignal, PacketKind::Signal(_)) => true,
            (KindMatch::Signal(want), PacketKind::Signal(got)) => want == got,
            _ => false,
        }
    }
}

impl FromStr for KindMatch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "data" => Ok(KindMatch::Data),
            "signal" => Ok(KindMatch::AnySignal),
            _ => SignalKind::from_name(s.trim())
                .map(KindMatch::Signal)
                .ok_or_else(|| format!("unknown packet kind `{s}`")),
        }
    }
}

impl fmt::Display for KindMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KindMatch::Data => f.write_str("data"),
            KindMatch::AnySignal => f.write_str("signal"),
            KindMatch::Signal(k) => write!(f, "{k}"),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?
                    .parse()
                    .map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(AddrMatch);
string_serde!(KindMatch);

/// Absent fields match anything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<AddrMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<AddrMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<KindMatch>,
}

impl FlowMatch {
    /// Matches on the application-level pair: the innermost header, with a
    /// routing header or home address option standing in for the address it
    /// will be rewritten to.
    pub fn matches(&self, pkt: &Packet) -> bool {
        let p = pkt.innermost();
        let src = p.home_addr_option.unwrap_or(p.src);
        let dst = p.rh2_home_addr.unwrap_or(p.dst);
        self.src.map_or(true, |m| m.matches(src))
            && self.dst.map_or(true, |m| m.matches(dst))
            && self.kind.map_or(true, |m| m.matches(p.kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaRule {
    #[serde(rename = "match", default)]
    pub matcher: FlowMatch,
    pub phb: Phb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meter: Option<TokenBucketParams>,
}

/// Ordered rules, first match wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaTable {
    #[serde(default)]
    pub rules: Vec<SlaRule>,
    #[serde(default = "default_phb")]
    pub default: Phb,
}

fn default_phb() -> Phb {
    Phb::Be
}

impl Default for SlaTable {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: Phb::Be,
        }
    }
}

impl SlaTable {
    /// Index of the first matching rule and the PHB it assigns.
    pub fn classify(&self, pkt: &Packet) -> (Option<usize>, Phb) {
        self.rules
            .iter()
            .position(|r| r.matcher.matches(pkt))
            .map_or((None, self.default), |i| (Some(i), self.rules[i].phb))
    }
}

/// Marks without metering.
pub fn classify_and_mark(mut pkt: Packet, sla: &SlaTable) -> Packet {
    pkt.dscp = sla.classify(&pkt).1.dscp();
    pkt
}

/// Edge conditioner: classify, meter, remark. Never drops.
#[derive(Debug, Clone)]
pub struct Conditioner {
    table: SlaTable,
    buckets: Vec<Option<TokenBucket>>,
    out_of_profile: u64,
}

impl Conditioner {
    pub fn new(table: SlaTable) -> Self {
        let buckets = table
            .rules
            .iter()
            .map(|r| r.meter.map(TokenBucket::new))
            .collect();
        Self {
            table,
            buckets,
            out_of_profile: 0,
        }
    }

    pub fn table(&self) -> &SlaTable {
        &self.table
    }

    pub fn out_of_profile(&self) -> u64 {
        self.out_of_profile
    }

    pub fn condition(&mut self, mut pkt: Packet, now: SimTime) -> Packet {
        let (rule, mut phb) = self.table.classify(&pkt);
        if let Some(tb) = rule.and_then(|i| self.buckets[i].as_mut()) {
            if tb.meter(pkt.size_bytes, now) == Profile::OutOfProfile {
                self.out_of_profile += 1;
                phb = phb.remark_out_of_profile();
            }
        }
        pkt.dscp = phb.dscp();
        pkt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffserv::Dscp;
    use crate::packet::SignalBody;

    const CN: Address = Address::new(0, 0, 0);
    const MNN: Address = Address::new(1, 1, 1);

    fn table() -> SlaTable {
        SlaTable {
            rules: vec![
                SlaRule {
                    matcher: FlowMatch {
                        kind: Some(KindMatch::AnySignal),
                        ..FlowMatch::default()
                    },
                    phb: Phb::Ef,
                    meter: None,
                },
                SlaRule {
                    matcher: FlowMatch {
                        src: Some(AddrMatch::Exact(CN)),
                        dst: Some(AddrMatch::Site(Prefix::new(1, 1))),
                        kind: Some(KindMatch::Data),
                    },
                    phb: Phb::Af(1, 1),
                    meter: Some(TokenBucketParams::default()),
                },
            ],
            default: Phb::Be,
        }
    }

    fn fbu() -> Packet {
        let info = crate::packet::FbuInfo {
            rcoa: Address::new(2, 0, 100),
            plcoa: Address::new(2, 1, 100),
            nlcoa: Address::new(2, 2, 100),
            nrcoa: None,
            nar: 0,
        };
        Packet::signal(1, Address::new(2, 1, 100), Address::new(2, 1, 1), SignalBody::Fbu(info), SimTime::ZERO)
    }

    #[test]
    fn signalling_is_ef() {
        assert_eq!(classify_and_mark(fbu(), &table()).dscp, Dscp(46));
    }

    #[test]
    fn cbr_flow_is_af11() {
        let p = Packet::data(2, 1, 0, CN, MNN, 1000, SimTime::ZERO);
        assert_eq!(classify_and_mark(p, &table()).dscp, Dscp(10));
    }

    #[test]
    fn unknown_flow_is_be() {
        let p = Packet::data(3, 9, 0, Address::new(7, 7, 7), CN, 1000, SimTime::ZERO);
        assert_eq!(classify_and_mark(p, &table()).dscp, Dscp(0));
    }

    #[test]
    fn routing_header_target_counts_as_destination() {
        let mut p = Packet::data(4, 1, 0, CN, Address::new(2, 1, 100), 1000, SimTime::ZERO);
        p.rh2_home_addr = Some(MNN);
        assert_eq!(classify_and_mark(p, &table()).dscp, Dscp::AF11);
    }

    #[test]
    fn out_of_profile_remarked_not_dropped() {
        let mut c = Conditioner::new(table());
        let mut marks = Vec::new();
        // Three back-to-back 1000 B packets against a 2000 B bucket.
        for i in 0..3 {
            let p = Packet::data(i, 1, i, CN, MNN, 1000, SimTime::ZERO);
            marks.push(c.condition(p, SimTime::ZERO).dscp);
        }
        assert_eq!(marks, vec![Dscp::AF11, Dscp::AF11, Dscp::AF12]);
        assert_eq!(c.out_of_profile(), 1);
    }

    #[test]
    fn patterns_parse() {
        assert_eq!("1.1".parse::<AddrMatch>().unwrap(), AddrMatch::Site(Prefix::new(1, 1)));
        assert_eq!("0.0.0".parse::<AddrMatch>().unwrap(), AddrMatch::Exact(CN));
        assert!("1.x".parse::<AddrMatch>().is_err());
        assert_eq!("fbu".parse::<KindMatch>().unwrap(), KindMatch::Signal(SignalKind::Fbu));
        assert_eq!("data".parse::<KindMatch>().unwrap(), KindMatch::Data);
    }

    #[test]
    fn table_from_toml() {
        let src = r#"
            default = "BE"
            [[rules]]
            phb = "EF"
            match = { kind = "signal" }
            [[rules]]
            phb = "AF11"
            match = { src = "0.0.0", dst = "1.1", kind = "data" }
            meter = { rate_bps = 128000.0, depth_bytes = 2000.0 }
        "#;
        let t: SlaTable = toml::from_str(src).unwrap();
        assert_eq!(t, table());
    }
}
