//! Mobility protocols. Node agents are plain state machines that react to
//! packets, timers and link-layer events by emitting [`Action`]s; the world
//! executes them.

pub mod ar;
pub mod diff_fh;
pub mod diff_nemo;
pub mod fh_explore;
pub mod fh_fsm;
pub mod nemo_bs;
pub mod rr;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffserv::Dscp;
use crate::net::{NodeId, Topology};
use crate::packet::{Address, Packet, Prefix, SignalBody};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    NemoBs,
    DiffNemo,
    DiffFhNemo,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::DiffFhNemo, Protocol::DiffNemo, Protocol::NemoBs];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::NemoBs => "nemo-bs",
            Protocol::DiffNemo => "diff-nemo",
            Protocol::DiffFhNemo => "diff-fh-nemo",
        }
    }

    /// Whether edge conditioning and signal marking are active.
    pub fn diffserv(self) -> bool {
        self != Protocol::NemoBs
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol `{s}` (nemo-bs, diff-nemo, diff-fh-nemo)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Predictive,
    Reactive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Predictive => "predictive",
            Mode::Reactive => "reactive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predictive" => Ok(Mode::Predictive),
            "reactive" => Ok(Mode::Reactive),
            _ => Err(format!("unknown mode `{s}` (predictive, reactive)")),
        }
    }
}

/// How the baseline router notices a new access router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detection {
    /// Wait for the next unsolicited RA beacon.
    Interval,
    /// Send RS on attachment.
    Solicited,
}

/// Protocol timing and sizing, already converted to simulator units.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoParams {
    pub dad_delay: SimTime,
    pub dad_delay_fast: SimTime,
    pub ra_interval: SimTime,
    /// Beacon phase per AR, indexed like `Topology::ars`.
    pub ra_offsets: Vec<SimTime>,
    pub bs_detection: Detection,
    pub binding_lifetime: SimTime,
    pub refresh_interval: SimTime,
    /// Home BU retransmission while unacknowledged.
    pub bu_retx: SimTime,
    pub rr_timeout: SimTime,
    pub rr_retries: u32,
    pub token_lifetime: SimTime,
    pub nar_buffer_capacity: usize,
    pub max_depth: usize,
    pub signal_size: u32,
    /// Addresses already taken on a given AR's link, for DAD collisions.
    pub occupied: Vec<Address>,
}

impl Default for ProtoParams {
    fn default() -> Self {
        Self {
            dad_delay: SimTime::from_millis(500),
            dad_delay_fast: SimTime::from_millis(100),
            ra_interval: SimTime::from_millis(1000),
            ra_offsets: vec![
                SimTime::from_millis(0),
                SimTime::from_millis(250),
                SimTime::from_millis(500),
                SimTime::from_millis(750),
            ],
            bs_detection: Detection::Interval,
            binding_lifetime: SimTime::from_secs(60),
            refresh_interval: SimTime::from_secs(30),
            bu_retx: SimTime::from_secs(1),
            rr_timeout: SimTime::from_secs(3),
            rr_retries: 2,
            token_lifetime: SimTime::from_secs(10),
            nar_buffer_capacity: 100,
            max_depth: crate::packet::DEFAULT_MAX_DEPTH,
            signal_size: crate::packet::SIGNAL_SIZE_BYTES,
            occupied: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum DropReason {
    RedEarly,
    RedForced,
    QueueOverflow,
    /// Sent toward, or out of, a mobile router with no wireless link.
    NoLink,
    NoBinding,
    NotRegistered,
    NoRoute,
    NarBufferOverflow,
    DepthExceeded,
    WrongDestination,
    /// Removed by scenario fault injection.
    Injected,
}

impl DropReason {
    pub const ALL: [DropReason; 11] = [
        DropReason::RedEarly,
        DropReason::RedForced,
        DropReason::QueueOverflow,
        DropReason::NoLink,
        DropReason::NoBinding,
        DropReason::NotRegistered,
        DropReason::NoRoute,
        DropReason::NarBufferOverflow,
        DropReason::DepthExceeded,
        DropReason::WrongDestination,
        DropReason::Injected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DropReason::RedEarly => "red-early",
            DropReason::RedForced => "red-forced",
            DropReason::QueueOverflow => "queue-overflow",
            DropReason::NoLink => "no-link",
            DropReason::NoBinding => "no-binding",
            DropReason::NotRegistered => "not-registered",
            DropReason::NoRoute => "no-route",
            DropReason::NarBufferOverflow => "nar-buffer-overflow",
            DropReason::DepthExceeded => "depth-exceeded",
            DropReason::WrongDestination => "wrong-destination",
            DropReason::Injected => "injected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Timer {
    RaBeacon,
    Dad { gen: u64 },
    Refresh { gen: u64 },
    BuRetx { gen: u64 },
    RrTimeout { gen: u64, attempt: u32 },
    /// NAR duplicate address detection for a handover keyed by RCoA.
    NarDad { key: Address },
    /// New-MAP regional address detection keyed by the new RCoA.
    RcoaDad { key: Address },
}

/// Handover milestones reported by mobile-router agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Milestone {
    /// New link prefix noticed (RA processed).
    Detected,
    DadDone,
    /// Reachable again through the home agent or the local anchor.
    Registered,
    /// CN binding installed for the current care-of address.
    RouteOptimized,
    /// Fast handover acknowledged.
    FastAck,
    Complete,
    Failed,
}

#[derive(Debug, Clone)]
pub enum Action {
    /// Route from `from` using normal forwarding.
    Send { from: NodeId, pkt: Packet },
    /// Put on the link `from → next` without a route lookup.
    SendVia { from: NodeId, next: NodeId, pkt: Packet },
    Timer { node: NodeId, delay: SimTime, timer: Timer },
    Drop { at: NodeId, pkt: Packet, reason: DropReason },
    Trace { node: NodeId, kind: &'static str, detail: String },
    Milestone { node: NodeId, what: Milestone },
    /// Packet has reached an end host's application.
    Consume { at: NodeId, pkt: Packet },
}

/// Everything an agent may touch while handling one input.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub node: NodeId,
    pub topo: &'a Topology,
    pub params: &'a ProtoParams,
    pub diffserv: bool,
    next_uid: &'a mut u64,
    out: &'a mut Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn new(
        now: SimTime,
        node: NodeId,
        topo: &'a Topology,
        params: &'a ProtoParams,
        diffserv: bool,
        next_uid: &'a mut u64,
        out: &'a mut Vec<Action>,
    ) -> Self {
        Self {
            now,
            node,
            topo,
            params,
            diffserv,
            next_uid,
            out,
        }
    }

    pub fn uid(&mut self) -> u64 {
        let u = *self.next_uid;
        *self.next_uid += 1;
        u
    }

    pub fn my_addr(&self) -> Address {
        self.topo.addr(self.node)
    }

    /// Signals are marked EF at their origin when DiffServ is on.
    pub fn signal(&mut self, src: Address, dst: Address, body: SignalBody) -> Packet {
        let uid = self.uid();
        let mut p = Packet::signal(uid, src, dst, body, self.now);
        p.size_bytes = self.params.signal_size;
        p.dscp = if self.diffserv { Dscp::EF } else { Dscp::BE };
        p
    }

    pub fn send(&mut self, pkt: Packet) {
        self.out.push(Action::Send {
            from: self.node,
            pkt,
        });
    }

    pub fn send_via(&mut self, next: NodeId, pkt: Packet) {
        self.out.push(Action::SendVia {
            from: self.node,
            next,
            pkt,
        });
    }

    pub fn timer(&mut self, delay: SimTime, timer: Timer) {
        self.out.push(Action::Timer {
            node: self.node,
            delay,
            timer,
        });
    }

    pub fn drop_pkt(&mut self, pkt: Packet, reason: DropReason) {
        self.out.push(Action::Drop {
            at: self.node,
            pkt,
            reason,
        });
    }

    pub fn trace(&mut self, kind: &'static str, detail: String) {
        self.out.push(Action::Trace {
            node: self.node,
            kind,
            detail,
        });
    }

    pub fn milestone(&mut self, what: Milestone) {
        self.out.push(Action::Milestone {
            node: self.node,
            what,
        });
    }

    pub fn consume(&mut self, pkt: Packet) {
        self.out.push(Action::Consume { at: self.node, pkt });
    }

    /// Encapsulates, copying the inner DSCP, or drops on depth overflow.
    pub fn tunnel(&mut self, pkt: Packet, src: Address, dst: Address) -> Option<Packet> {
        let dscp = pkt.dscp;
        match crate::packet::encapsulate(pkt.clone(), src, dst, dscp, self.params.max_depth) {
            Ok(p) => Some(p),
            Err(_) => {
                self.drop_pkt(pkt, DropReason::DepthExceeded);
                None
            }
        }
    }
}

/// Behaviour shared by the three mobile-router variants.
pub trait MobileRouter {
    fn on_attach(&mut self, ctx: &mut Ctx, bs: NodeId);
    fn on_link_down(&mut self, ctx: &mut Ctx);
    /// Anticipated loss of link; `next_bs` is the predicted new cell.
    fn on_l2_trigger(&mut self, _ctx: &mut Ctx, _next_bs: NodeId) {}
    /// Packet received over the wireless link.
    fn on_downstream(&mut self, ctx: &mut Ctx, pkt: Packet);
    /// Packet from the mobile network, already conditioned.
    fn on_upstream(&mut self, ctx: &mut Ctx, pkt: Packet);
    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer);
    /// Address correspondents currently reach the mobile network through.
    fn care_of(&self) -> Option<Address>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingCacheEntry {
    pub hoa: Address,
    pub coa: Address,
    pub mnps: Vec<Prefix>,
    pub expires: SimTime,
}

/// One entry per home address; expired entries are invisible.
#[derive(Debug, Clone, Default)]
pub struct BindingCache {
    entries: BTreeMap<Address, BindingCacheEntry>,
}

impl BindingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, hoa: Address, coa: Address, mnps: Vec<Prefix>, expires: SimTime) {
        self.entries.insert(
            hoa,
            BindingCacheEntry {
                hoa,
                coa,
                mnps,
                expires,
            },
        );
    }

    pub fn remove(&mut self, hoa: Address) {
        self.entries.remove(&hoa);
    }

    pub fn get(&self, hoa: Address, now: SimTime) -> Option<&BindingCacheEntry> {
        self.entries.get(&hoa).filter(|e| e.expires > now)
    }

    /// Live entry covering `dst` as a home address or a mobile network prefix.
    pub fn lookup(&self, dst: Address, now: SimTime) -> Option<&BindingCacheEntry> {
        self.entries
            .values()
            .filter(|e| e.expires > now)
            .find(|e| e.hoa == dst || e.mnps.iter().any(|p| p.contains(dst)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BindingCacheEntry> {
        self.entries.values()
    }
}

/// Strips tunnel headers and applies a routing header, yielding the packet
/// as the application will see it.
pub fn unwrap_for_delivery(mut pkt: Packet) -> Packet {
    while pkt.inner.is_some() {
        pkt = crate::packet::decapsulate(pkt).expect("has inner");
    }
    if pkt.rh2_home_addr.is_some() {
        pkt = crate::packet::apply_type2_routing(pkt).expect("has rh2");
    }
    pkt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_one_entry_per_hoa_and_expiry() {
        let mut c = BindingCache::new();
        let hoa = Address::new(1, 0, 2);
        c.update(hoa, Address::new(2, 1, 100), vec![Prefix::new(1, 1)], SimTime::from_secs(60));
        c.update(hoa, Address::new(2, 2, 100), vec![Prefix::new(1, 1)], SimTime::from_secs(90));
        assert_eq!(c.len(), 1);
        let e = c.lookup(Address::new(1, 1, 1), SimTime::from_secs(61)).unwrap();
        assert_eq!(e.coa, Address::new(2, 2, 100));
        assert!(c.lookup(Address::new(1, 1, 1), SimTime::from_secs(90)).is_none());
        assert!(c.lookup(Address::new(1, 2, 1), SimTime::ZERO).is_none());
    }

    #[test]
    fn names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert_eq!("reactive".parse::<Mode>().unwrap(), Mode::Reactive);
        assert!("fast".parse::<Mode>().is_err());
    }
}
