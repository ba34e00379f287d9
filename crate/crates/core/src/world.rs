//! The simulated network: links, queues, node agents, traffic sources and
//! the link-layer schedule, driven by one scheduler.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use crate::config::ScenarioConfig;
use crate::diffserv::{ClassCounters, Conditioner, EgressQueue, EnqueueOutcome, TrafficClass};
use crate::net::{l2_schedule, serialization_delay, NodeId, Role, Topology, CN_ADDR, DMR_HOA, HA_ADDR, MNN_HOA, MNP};
use crate::packet::{apply_home_address_option, Packet, SignalKind};
use crate::proto::ar::AccessRouter;
use crate::proto::diff_fh::{FhDmr, MapAgent};
use crate::proto::diff_nemo::DmrState;
use crate::proto::nemo_bs::{HomeAgent, MrState};
use crate::proto::rr::CnState;
use crate::proto::{Action, Ctx, Detection, DropReason, Milestone, Mode, MobileRouter, ProtoParams, Protocol, Timer};
use crate::sim::{Lane, RngStream, Scheduler, SimTime};

pub const CBR_FLOW: u32 = 0;
pub const UPSTREAM_FLOW: u32 = 1;
pub const BACKGROUND_FLOW: u32 = 2;

#[derive(Debug, Clone)]
enum Ev {
    Arrive { from: NodeId, pkt: Packet },
    TxDone { link: usize },
    Timer(Timer),
    Cbr { flow: u32, seq: u64 },
    Background { seq: u64 },
    L2Trigger { next: NodeId },
    L2Down { index: usize },
    L2Up { bs: NodeId },
    Inject { pkt: Packet },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub node: NodeId,
    pub at: SimTime,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub uid: u64,
    pub flow: u32,
    pub seq: u64,
    pub created_at: SimTime,
    pub delivered_at: Option<SimTime>,
    pub dropped: Option<(SimTime, NodeId, DropReason)>,
    /// Every node the packet arrived at, source excluded.
    pub hops: Vec<Hop>,
    pub duplicates: u32,
}

impl PacketRecord {
    pub fn path(&self) -> Vec<NodeId> {
        self.hops.iter().map(|h| h.node).collect()
    }

    /// Last base station the packet crossed.
    pub fn serving_bs(&self, topo: &Topology) -> Option<NodeId> {
        self.hops.iter().rev().find(|h| topo.role(h.node) == Role::Bs).map(|h| h.node)
    }

    pub fn delay(&self) -> Option<SimTime> {
        self.delivered_at.map(|t| t.saturating_sub(self.created_at))
    }
}

/// One loss of link and what followed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2Record {
    pub index: usize,
    pub old_bs: NodeId,
    pub new_bs: Option<NodeId>,
    pub trigger_at: Option<SimTime>,
    pub down_at: SimTime,
    pub up_at: Option<SimTime>,
    /// Both access routers under one MAP.
    pub micro: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounts {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub protocol: Protocol,
    pub mode: Mode,
    pub speed_kmh: f64,
    pub seed: u64,
    pub topo: Topology,
    /// Flow 0 and flow 1 data packets in creation order.
    pub records: Vec<PacketRecord>,
    pub data_drops: BTreeMap<DropReason, u64>,
    pub signal_drops: BTreeMap<DropReason, u64>,
    pub signals: BTreeMap<SignalKind, u64>,
    pub background: FlowCounts,
    pub milestones: Vec<(SimTime, NodeId, Milestone)>,
    pub l2: Vec<L2Record>,
    /// Data packets of flow 0 and 1 still queued, buffered or on a wire.
    pub in_flight: [u64; 2],
    /// Deliveries to the MNN that were not a plain CN → MNN_HoA packet.
    pub opaque_deliveries: u64,
    /// Times the CN accepted a binding update.
    pub cn_bindings: Vec<SimTime>,
    /// Egress counters per link, summed over classes when reported.
    pub queue_counters: Vec<(NodeId, NodeId, [ClassCounters; 6])>,
    pub events: u64,
    pub trace: Option<String>,
}

impl RunOutput {
    pub fn flow(&self, flow: u32) -> impl Iterator<Item = &PacketRecord> {
        self.records.iter().filter(move |r| r.flow == flow)
    }
}

pub enum MobileAgent {
    Bs(MrState),
    Diff(DmrState),
    Fh(FhDmr),
}

impl MobileAgent {
    fn router(&mut self) -> &mut dyn MobileRouter {
        match self {
            MobileAgent::Bs(m) => m,
            MobileAgent::Diff(m) => m,
            MobileAgent::Fh(m) => m,
        }
    }
}

struct LinkState {
    queue: EgressQueue<Packet>,
    busy: bool,
}

/// A counted fault: drop the `nth` first-seen signal of `kind`.
struct Fault {
    kind: SignalKind,
    nth: u64,
}

pub struct World {
    topo: Topology,
    params: ProtoParams,
    diffserv: bool,
    protocol: Protocol,
    mode: Mode,
    speed_kmh: f64,
    seed: u64,
    end: SimTime,
    sched: Scheduler<Ev>,
    rng: RngStream,
    links: Vec<LinkState>,
    next_uid: u64,
    cn: CnState,
    ha: HomeAgent,
    maps: BTreeMap<NodeId, MapAgent>,
    ars: BTreeMap<NodeId, AccessRouter>,
    dmr: MobileAgent,
    attached: Option<NodeId>,
    cond_er: Option<Conditioner>,
    cond_dmr: Option<Conditioner>,
    cbr_interval: SimTime,
    cbr_size: u32,
    cbr_stop: SimTime,
    bg_interval: Option<SimTime>,
    bg_size: u32,
    rec: Vec<PacketRecord>,
    rec_index: HashMap<u64, usize>,
    data_drops: BTreeMap<DropReason, u64>,
    signal_drops: BTreeMap<DropReason, u64>,
    signals: BTreeMap<SignalKind, u64>,
    seen_signals: HashSet<u64>,
    faults: Vec<Fault>,
    background: FlowCounts,
    milestones: Vec<(SimTime, NodeId, Milestone)>,
    l2: Vec<L2Record>,
    opaque: u64,
    cn_bindings: Vec<SimTime>,
    trace: Option<String>,
}

/// Runs `$body` with a context for `$node`, then executes the actions it produced.
macro_rules! with_ctx {
    ($w:ident, $node:expr, |$ctx:ident| $body:expr) => {{
        let mut out = Vec::new();
        let r = {
            let mut $ctx = Ctx::new(
                $w.sched.now(),
                $node,
                &$w.topo,
                &$w.params,
                $w.diffserv,
                &mut $w.next_uid,
                &mut out,
            );
            $body
        };
        $w.apply(out);
        r
    }};
}

fn drop_reason(o: EnqueueOutcome) -> DropReason {
    match o {
        EnqueueOutcome::DropEarly => DropReason::RedEarly,
        EnqueueOutcome::DropForced => DropReason::RedForced,
        _ => DropReason::QueueOverflow,
    }
}

fn is_tracked(pkt: &Packet) -> bool {
    pkt.is_data() && pkt.flow < BACKGROUND_FLOW
}

impl World {
    pub fn new(cfg: &ScenarioConfig, trace: bool) -> World {
        let topo = Topology::build(&cfg.topology);
        let params = cfg.proto_params();
        let diffserv = cfg.diffserv();
        let links = topo
            .links
            .iter()
            .map(|_| LinkState {
                queue: EgressQueue::new(cfg.queues),
                busy: false,
            })
            .collect();
        let dmr = match cfg.protocol {
            Protocol::NemoBs => MobileAgent::Bs(MrState::new(DMR_HOA, MNP, HA_ADDR, params.bs_detection)),
            Protocol::DiffNemo => MobileAgent::Diff(DmrState::new(DMR_HOA, MNP, HA_ADDR, CN_ADDR, params.rr_retries)),
            Protocol::DiffFhNemo => MobileAgent::Fh(FhDmr::new(DMR_HOA, MNP, HA_ADDR, CN_ADDR, params.rr_retries)),
        };
        let fh = cfg.protocol == Protocol::DiffFhNemo;
        let beacons = cfg.protocol == Protocol::NemoBs && params.bs_detection == Detection::Interval;
        let (mut maps, mut ars) = (BTreeMap::new(), BTreeMap::new());
        {
            let (mut uid, mut out) = (0, Vec::new());
            let ctx = Ctx::new(SimTime::ZERO, topo.cn, &topo, &params, diffserv, &mut uid, &mut out);
            if fh {
                for &m in &topo.maps {
                    maps.insert(m, MapAgent::new(&ctx, m));
                }
            }
            for &a in &topo.ars {
                ars.insert(a, AccessRouter::new(&ctx, a, fh, beacons));
            }
        }
        let cond = || diffserv.then(|| Conditioner::new(cfg.sla_table()));
        let faults = cfg
            .faults
            .iter()
            .map(|f| Fault {
                kind: SignalKind::from_name(&f.signal).expect("validated scenario"),
                nth: u64::from(f.nth),
            })
            .collect();
        let bg_interval = (cfg.background_load_bps > 0).then(|| {
            SimTime::from_micros(
                (u64::from(cfg.background_packet_bytes) * 8 * 1_000_000).div_ceil(cfg.background_load_bps),
            )
        });
        let mut w = World {
            params,
            diffserv,
            protocol: cfg.protocol,
            mode: cfg.mode,
            speed_kmh: cfg.dmr_speed_kmh,
            seed: cfg.seed,
            end: cfg.sim_end(),
            sched: Scheduler::new(),
            rng: RngStream::new(cfg.seed),
            links,
            next_uid: 1,
            cn: CnState::new(CN_ADDR),
            ha: HomeAgent::new(HA_ADDR),
            maps,
            ars,
            dmr,
            attached: None,
            cond_er: cond(),
            cond_dmr: cond(),
            cbr_interval: cfg.cbr.interval(),
            cbr_size: cfg.cbr.packet_bytes,
            cbr_stop: SimTime::from_secs_f64(cfg.cbr.stop_s),
            bg_interval,
            bg_size: cfg.background_packet_bytes,
            rec: Vec::new(),
            rec_index: HashMap::new(),
            data_drops: BTreeMap::new(),
            signal_drops: BTreeMap::new(),
            signals: BTreeMap::new(),
            seen_signals: HashSet::new(),
            faults,
            background: FlowCounts::default(),
            milestones: Vec::new(),
            l2: Vec::new(),
            opaque: 0,
            cn_bindings: Vec::new(),
            trace: trace.then(String::new),
            topo,
        };
        w.schedule_initial(cfg);
        w
    }

    fn schedule_initial(&mut self, cfg: &ScenarioConfig) {
        let at = |w: &mut World, t: SimTime, lane: Lane, node: NodeId, ev: Ev| {
            w.sched.schedule(t, lane, node.index(), ev).expect("initial events are in the future");
        };
        let ars: Vec<NodeId> = self.topo.ars.clone();
        for (i, &a) in ars.iter().enumerate() {
            if self.ars[&a].beacons {
                let off = self.params.ra_offsets.get(i).copied().unwrap_or(SimTime::ZERO);
                at(self, off, Lane::Timer, a, Ev::Timer(Timer::RaBeacon));
            }
            if self.bg_interval.is_some() {
                at(self, SimTime::ZERO, Lane::Timer, a, Ev::Background { seq: 0 });
            }
        }
        let start = SimTime::from_secs_f64(cfg.cbr.start_s);
        let (cn, mnn, dmr) = (self.topo.cn, self.topo.mnn, self.topo.dmr);
        at(self, start, Lane::Timer, cn, Ev::Cbr { flow: CBR_FLOW, seq: 0 });
        if cfg.upstream_cbr {
            at(self, start, Lane::Timer, mnn, Ev::Cbr { flow: UPSTREAM_FLOW, seq: 0 });
        }

        let sched = l2_schedule(&cfg.track(), &self.topo.cells, self.end);
        if let Some((bs, t)) = sched.initial {
            at(self, t, Lane::Link, dmr, Ev::L2Up { bs });
        }
        let lead = cfg.lead_time();
        let switch = cfg.l2_switch();
        for h in &sched.handovers {
            let predictive = cfg.mode == Mode::Predictive && !cfg.force_reactive_at.contains(&h.index);
            let mut rec = L2Record {
                index: h.index,
                old_bs: h.old_bs,
                new_bs: h.next.map(|n| n.0),
                trigger_at: None,
                down_at: h.exit_at,
                up_at: None,
                micro: None,
            };
            if let Some((bs, t)) = h.next {
                let old_map = self.topo.map_of_ar(self.topo.ar_of_bs(h.old_bs));
                let new_map = self.topo.map_of_ar(self.topo.ar_of_bs(bs));
                rec.micro = Some(old_map == new_map);
                if predictive {
                    let tt = h.exit_at.saturating_sub(lead);
                    rec.trigger_at = Some(tt);
                    at(self, tt, Lane::Link, dmr, Ev::L2Trigger { next: bs });
                }
                let up = t.max(h.exit_at) + switch;
                rec.up_at = Some(up);
                at(self, up, Lane::Link, dmr, Ev::L2Up { bs });
            }
            at(self, h.exit_at, Lane::Link, dmr, Ev::L2Down { index: h.index });
            self.l2.push(rec);
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn topo(&self) -> &Topology {
        &self.topo
    }

    pub fn cn(&self) -> &CnState {
        &self.cn
    }

    pub fn ha(&self) -> &HomeAgent {
        &self.ha
    }

    pub fn mobile(&self) -> &MobileAgent {
        &self.dmr
    }

    pub fn access_router(&self, ar: NodeId) -> Option<&AccessRouter> {
        self.ars.get(&ar)
    }

    pub fn fresh_uid(&mut self) -> u64 {
        let u = self.next_uid;
        self.next_uid += 1;
        u
    }

    /// Originates `pkt` at `from` at time `at`, as if an agent had sent it.
    pub fn inject(&mut self, at: SimTime, from: NodeId, pkt: Packet) {
        self.sched
            .schedule(at, Lane::Packet, from.index(), Ev::Inject { pkt })
            .expect("inject in the future");
    }

    pub fn run_until(&mut self, t: SimTime) {
        let end = t.min(self.end);
        while let Some(ev) = self.sched.pop_until(end) {
            self.handle(NodeId(ev.target as u32), ev.payload);
        }
        self.sched.advance_to(end);
    }

    pub fn run(mut self) -> RunOutput {
        self.run_until(self.end);
        self.finish()
    }

    fn handle(&mut self, node: NodeId, ev: Ev) {
        match ev {
            Ev::Arrive { from, pkt } => self.on_arrive(node, from, pkt),
            Ev::TxDone { link } => {
                self.links[link].busy = false;
                self.start_tx(link);
            }
            Ev::Timer(t) => self.on_timer(node, t),
            Ev::Cbr { flow, seq } => self.on_cbr(flow, seq),
            Ev::Background { seq } => self.on_background(node, seq),
            Ev::L2Trigger { next } => {
                self.log(node, "l2-trigger", self.topo.name(next).to_string());
                with_ctx!(self, node, |ctx| self.dmr.router().on_l2_trigger(&mut ctx, next));
            }
            Ev::L2Down { index } => {
                let bs = self.attached.take();
                self.log(node, "l2-down", format!("{index} {}", bs.map_or("-", |b| self.topo.name(b))));
                with_ctx!(self, node, |ctx| self.dmr.router().on_link_down(&mut ctx));
            }
            Ev::L2Up { bs } => {
                self.attached = Some(bs);
                self.log(node, "l2-up", self.topo.name(bs).to_string());
                with_ctx!(self, node, |ctx| self.dmr.router().on_attach(&mut ctx, bs));
            }
            Ev::Inject { pkt } => self.apply(vec![Action::Send { from: node, pkt }]),
        }
    }

    fn on_cbr(&mut self, flow: u32, seq: u64) {
        let now = self.now();
        let uid = self.fresh_uid();
        let (src, dst, from) = if flow == CBR_FLOW {
            (CN_ADDR, MNN_HOA, self.topo.cn)
        } else {
            (MNN_HOA, CN_ADDR, self.topo.mnn)
        };
        let mut pkt = Packet::data(uid, flow, seq, src, dst, self.cbr_size, now);
        if flow == CBR_FLOW {
            pkt = self.cn.address_data(pkt, now);
        }
        self.rec_index.insert(uid, self.rec.len());
        self.rec.push(PacketRecord {
            uid,
            flow,
            seq,
            created_at: now,
            delivered_at: None,
            dropped: None,
            hops: Vec::new(),
            duplicates: 0,
        });
        self.log(from, "send", pkt.render());
        self.send_from(from, pkt);
        let next = now + self.cbr_interval;
        if next < self.cbr_stop {
            self.sched.schedule_in(self.cbr_interval, Lane::Timer, from.index(), Ev::Cbr { flow, seq: seq + 1 });
        }
    }

    fn on_background(&mut self, ar: NodeId, seq: u64) {
        let Some(iv) = self.bg_interval else { return };
        let uid = self.fresh_uid();
        let src = self.topo.addr(ar);
        let dst = self.topo.ar_prefix(ar).with_node(250);
        let mut pkt = Packet::data(uid, BACKGROUND_FLOW, seq, src, dst, self.bg_size, self.now());
        pkt.dscp = crate::diffserv::Dscp::BE;
        self.background.sent += 1;
        let bs = self.topo.bs_of_ar(ar).expect("access router has a base station");
        self.send_link(ar, bs, pkt);
        self.sched.schedule_in(iv, Lane::Timer, ar.index(), Ev::Background { seq: seq + 1 });
    }

    fn on_timer(&mut self, node: NodeId, t: Timer) {
        match self.topo.role(node) {
            Role::Ar => with_ctx!(self, node, |ctx| {
                if let Some(a) = self.ars.get_mut(&node) {
                    a.on_timer(&mut ctx, t)
                }
            }),
            Role::Map => with_ctx!(self, node, |ctx| {
                if let Some(m) = self.maps.get_mut(&node) {
                    m.on_timer(&mut ctx, t)
                }
            }),
            Role::Dmr => with_ctx!(self, node, |ctx| self.dmr.router().on_timer(&mut ctx, t)),
            _ => {}
        }
    }

    fn on_arrive(&mut self, node: NodeId, from: NodeId, mut pkt: Packet) {
        if is_tracked(&pkt) {
            let now = self.now();
            if let Some(&i) = self.rec_index.get(&pkt.uid) {
                self.rec[i].hops.push(Hop {
                    node,
                    at: now,
                    size: pkt.size_bytes,
                });
            }
        }
        if self.trace.is_some() && pkt.flow != BACKGROUND_FLOW {
            self.log(node, "recv", pkt.render());
        }
        let dmr = self.topo.dmr;
        match self.topo.role(node) {
            Role::Bs => {
                if pkt.flow == BACKGROUND_FLOW && pkt.is_data() {
                    self.background.delivered += 1;
                } else if from == dmr {
                    if self.attached == Some(node) {
                        let ar = self.topo.ar_of_bs(node);
                        self.send_link(node, ar, pkt);
                    } else {
                        self.drop(node, pkt, DropReason::NoLink);
                    }
                } else if self.attached == Some(node) {
                    self.send_link(node, dmr, pkt);
                } else if pkt.dst.node != crate::proto::ar::ALL_NODES {
                    self.drop(node, pkt, DropReason::NoLink);
                }
            }
            Role::Dmr => {
                if from == self.topo.mnn {
                    if let Some(c) = self.cond_dmr.as_mut() {
                        pkt = c.condition(pkt, self.sched.now());
                    }
                    with_ctx!(self, node, |ctx| self.dmr.router().on_upstream(&mut ctx, pkt));
                } else if self.attached != Some(from) {
                    self.drop(node, pkt, DropReason::NoLink);
                } else {
                    with_ctx!(self, node, |ctx| self.dmr.router().on_downstream(&mut ctx, pkt));
                }
            }
            Role::Mnn => self.deliver(node, pkt),
            Role::Er if from == self.topo.cn => {
                if let Some(c) = self.cond_er.as_mut() {
                    pkt = c.condition(pkt, self.sched.now());
                }
                self.wired(node, pkt);
            }
            _ => self.wired(node, pkt),
        }
    }

    /// Forwarding on a fixed node: hand to the local agent if it owns the
    /// destination, otherwise one hop closer.
    fn wired(&mut self, node: NodeId, pkt: Packet) {
        let Some(target) = self.topo.owner_of(pkt.dst) else {
            return self.drop(node, pkt, DropReason::NoRoute);
        };
        if target != node {
            return self.forward(node, target, pkt);
        }
        match self.topo.role(node) {
            Role::Cn => {
                let before = self.cn.accepted_bus;
                let handled = with_ctx!(self, node, |ctx| self.cn.on_signal(&mut ctx, &pkt));
                if self.cn.accepted_bus > before {
                    self.cn_bindings.push(self.now());
                }
                if !handled {
                    let p = if pkt.home_addr_option.is_some() {
                        apply_home_address_option(pkt).expect("option present")
                    } else {
                        pkt
                    };
                    self.deliver(node, p);
                }
            }
            Role::Ha => with_ctx!(self, node, |ctx| self.ha.on_packet(&mut ctx, pkt)),
            Role::Map => {
                if self.maps.contains_key(&node) {
                    with_ctx!(self, node, |ctx| self
                        .maps
                        .get_mut(&node)
                        .expect("checked")
                        .on_packet(&mut ctx, pkt));
                } else {
                    self.drop(node, pkt, DropReason::NoRoute);
                }
            }
            Role::Ar => with_ctx!(self, node, |ctx| self
                .ars
                .get_mut(&node)
                .expect("every AR has an agent")
                .on_packet(&mut ctx, pkt)),
            _ => self.deliver(node, pkt),
        }
    }

    fn forward(&mut self, node: NodeId, target: NodeId, pkt: Packet) {
        match self.topo.next_hop(node, target) {
            Some(next) => self.send_link(node, next, pkt),
            None => self.drop(node, pkt, DropReason::NoRoute),
        }
    }

    /// An agent at `node` originates or re-sends `pkt`.
    fn send_from(&mut self, node: NodeId, pkt: Packet) {
        match self.topo.role(node) {
            Role::Dmr => match self.attached {
                Some(bs) => self.send_link(node, bs, pkt),
                None => self.drop(node, pkt, DropReason::NoLink),
            },
            Role::Mnn => {
                let dmr = self.topo.dmr;
                self.send_link(node, dmr, pkt);
            }
            _ => match self.topo.owner_of(pkt.dst) {
                Some(t) if t == node => {
                    self.sched.schedule_in(SimTime::ZERO, Lane::Packet, node.index(), Ev::Arrive { from: node, pkt });
                }
                Some(t) => self.forward(node, t, pkt),
                None => self.drop(node, pkt, DropReason::NoRoute),
            },
        }
    }

    fn send_link(&mut self, from: NodeId, to: NodeId, pkt: Packet) {
        let Some((i, _)) = self.topo.link(from, to) else {
            return self.drop(from, pkt, DropReason::NoRoute);
        };
        let class = TrafficClass::of(pkt.dscp);
        match self.links[i].queue.enqueue(pkt, class, &mut self.rng) {
            Ok(()) => {
                if !self.links[i].busy {
                    self.start_tx(i);
                }
            }
            Err((p, o)) => self.drop(from, p, drop_reason(o)),
        }
    }

    fn start_tx(&mut self, i: usize) {
        let Some((pkt, _)) = self.links[i].queue.dequeue() else { return };
        let link = &self.topo.links[i];
        let (from, to, prop) = (link.from, link.to, link.prop_delay);
        let ser = serialization_delay(pkt.size_bytes, link.bandwidth_bps);
        self.links[i].busy = true;
        self.sched.schedule_in(ser, Lane::Link, from.index(), Ev::TxDone { link: i });
        self.sched.schedule_in(ser + prop, Lane::Packet, to.index(), Ev::Arrive { from, pkt });
    }

    fn apply(&mut self, out: Vec<Action>) {
        for a in out {
            match a {
                Action::Send { from, pkt } => {
                    if self.screen(&pkt) {
                        self.drop(from, pkt, DropReason::Injected);
                    } else {
                        self.send_from(from, pkt);
                    }
                }
                Action::SendVia { from, next, pkt } => {
                    if self.screen(&pkt) {
                        self.drop(from, pkt, DropReason::Injected);
                    } else {
                        self.send_link(from, next, pkt);
                    }
                }
                Action::Timer { node, delay, timer } => {
                    self.sched.schedule_in(delay, Lane::Timer, node.index(), Ev::Timer(timer));
                }
                Action::Drop { at, pkt, reason } => self.drop(at, pkt, reason),
                Action::Trace { node, kind, detail } => self.log(node, kind, detail),
                Action::Milestone { node, what } => {
                    self.milestones.push((self.now(), node, what));
                    self.log(node, "milestone", format!("{what:?}"));
                }
                Action::Consume { at, pkt } => self.deliver(at, pkt),
            }
        }
    }

    /// Counts signals at first sight and decides fault injection.
    fn screen(&mut self, pkt: &Packet) -> bool {
        let inner = pkt.innermost();
        let Some(kind) = inner.signal_kind() else { return false };
        if !self.seen_signals.insert(inner.uid) {
            return false;
        }
        let n = self.signals.entry(kind).or_insert(0);
        *n += 1;
        let n = *n;
        self.faults.iter().any(|f| f.kind == kind && f.nth == n)
    }

    fn deliver(&mut self, at: NodeId, pkt: Packet) {
        if !is_tracked(&pkt) {
            return;
        }
        let sink = if pkt.flow == CBR_FLOW { self.topo.mnn } else { self.topo.cn };
        if at != sink {
            return self.drop(at, pkt, DropReason::WrongDestination);
        }
        if at == self.topo.mnn
            && (pkt.src != CN_ADDR || pkt.dst != MNN_HOA || pkt.inner.is_some() || pkt.rh2_home_addr.is_some())
        {
            self.opaque += 1;
        }
        let now = self.now();
        self.log(at, "deliver", pkt.render());
        if let Some(&i) = self.rec_index.get(&pkt.uid) {
            let r = &mut self.rec[i];
            if r.delivered_at.is_some() {
                r.duplicates += 1;
            } else {
                r.delivered_at = Some(now);
            }
        }
    }

    fn drop(&mut self, at: NodeId, pkt: Packet, reason: DropReason) {
        self.log(at, "drop", format!("{} {}", reason.name(), pkt.render()));
        if pkt.is_data() && pkt.flow == BACKGROUND_FLOW {
            self.background.dropped += 1;
        } else if is_tracked(&pkt) {
            *self.data_drops.entry(reason).or_insert(0) += 1;
            let now = self.now();
            if let Some(&i) = self.rec_index.get(&pkt.uid) {
                let r = &mut self.rec[i];
                if r.dropped.is_none() && r.delivered_at.is_none() {
                    r.dropped = Some((now, at, reason));
                }
            }
        } else {
            *self.signal_drops.entry(reason).or_insert(0) += 1;
        }
    }

    fn log(&mut self, node: NodeId, kind: &str, detail: String) {
        if let Some(t) = self.trace.as_mut() {
            let _ = writeln!(t, "{}\t{}\t{}\t{}", self.sched.now().as_micros(), self.topo.name(node), kind, detail);
        }
    }

    /// Tracked packets not yet delivered or dropped, found by scanning every
    /// place a packet can wait.
    fn recount_in_flight(&self) -> [u64; 2] {
        let mut n = [0u64; 2];
        let mut count = |p: &Packet| {
            if is_tracked(p) {
                n[p.flow as usize] += 1;
            }
        };
        for l in &self.links {
            l.queue.iter().for_each(&mut count);
        }
        for a in self.ars.values() {
            for c in a.nar.values() {
                c.buffer.iter().for_each(&mut count);
            }
        }
        for e in self.sched.iter_pending() {
            match &e.payload {
                Ev::Arrive { pkt, .. } | Ev::Inject { pkt } => count(pkt),
                _ => {}
            }
        }
        n
    }

    pub fn finish(self) -> RunOutput {
        let in_flight = self.recount_in_flight();
        let queue_counters = self
            .links
            .iter()
            .zip(&self.topo.links)
            .map(|(l, t)| (t.from, t.to, TrafficClass::ALL.map(|c| l.queue.counters(c))))
            .collect();
        RunOutput {
            protocol: self.protocol,
            mode: self.mode,
            speed_kmh: self.speed_kmh,
            seed: self.seed,
            records: self.rec,
            data_drops: self.data_drops,
            signal_drops: self.signal_drops,
            signals: self.signals,
            background: self.background,
            milestones: self.milestones,
            l2: self.l2,
            in_flight,
            opaque_deliveries: self.opaque,
            cn_bindings: self.cn_bindings,
            queue_counters,
            events: self.sched.processed(),
            trace: self.trace,
            topo: self.topo,
        }
    }
}

/// Builds and runs one scenario.
pub fn simulate(cfg: &ScenarioConfig, trace: bool) -> RunOutput {
    World::new(cfg, trace).run()
}
