//! Access router: router advertisements, DAD answers, on-link delivery,
//! and the previous/new access router roles of the fast handover.

use std::collections::{BTreeMap, VecDeque};

use super::fh_fsm::{fsm_step, Effect, FsmEvent, FsmState, NarEvent, NarFsm, Peer};
use super::{Ctx, DropReason, Timer};
use crate::net::NodeId;
use crate::packet::{Address, FbuInfo, Packet, Prefix, SignalBody};
use crate::sim::SimTime;

/// Node part used as the all-nodes destination of unsolicited RAs.
pub const ALL_NODES: u32 = 0;

/// A flushed context older than this is treated as a fresh one.
const CONTEXT_STALE: SimTime = SimTime::from_secs(5);

/// Bounded FIFO; a full buffer evicts its oldest packet.
#[derive(Debug, Clone)]
pub struct NarBuffer {
    cap: usize,
    q: VecDeque<Packet>,
}

impl NarBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            q: VecDeque::new(),
        }
    }

    /// Returns the packet evicted to make room, if any.
    pub fn push(&mut self, p: Packet) -> Option<Packet> {
        if self.cap == 0 {
            return Some(p);
        }
        let evicted = if self.q.len() >= self.cap {
            self.q.pop_front()
        } else {
            None
        };
        self.q.push_back(p);
        evicted
    }

    pub fn drain(&mut self) -> Vec<Packet> {
        self.q.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Packet> {
        self.q.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct NarContext {
    pub fsm: NarFsm,
    /// Address requested in the HI or FNA.
    pub requested: Address,
    /// Address granted after DAD; differs from `requested` on collision.
    pub nlcoa: Address,
    pub fbu: Option<FbuInfo>,
    pub old_map: Option<Address>,
    pub buffer: NarBuffer,
    pub since: SimTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArStats {
    pub buffered: u64,
    pub flushed: u64,
    pub buffer_drops: u64,
    pub unexpected: u64,
}

#[derive(Debug, Clone)]
pub struct AccessRouter {
    pub node: NodeId,
    pub addr: Address,
    pub prefix: Prefix,
    pub bs: NodeId,
    /// Advertise the MAP option and run the fast-handover roles.
    pub fh: bool,
    pub beacons: bool,
    pub nar: BTreeMap<Address, NarContext>,
    pub stats: ArStats,
}

fn bump_until_free(a: Address, occupied: &[Address]) -> Address {
    let mut x = a;
    while occupied.contains(&x) {
        x = Address::new(x.domain, x.site, x.node + 1);
    }
    x
}

impl AccessRouter {
    pub fn new(ctx: &Ctx, node: NodeId, fh: bool, beacons: bool) -> Self {
        let topo = ctx.topo;
        Self {
            node,
            addr: topo.addr(node),
            prefix: topo.ar_prefix(node),
            bs: topo.bs_of_ar(node).expect("access router has a base station"),
            fh,
            beacons,
            nar: BTreeMap::new(),
            stats: ArStats::default(),
        }
    }

    fn map_option(&self, ctx: &Ctx) -> Option<(Address, Prefix)> {
        if !self.fh {
            return None;
        }
        let m = ctx.topo.map_of_ar(self.node);
        Some((ctx.topo.addr(m), ctx.topo.rcoa_prefix(m)))
    }

    fn on_link(&self, ctx: &mut Ctx, pkt: Packet) {
        ctx.send_via(self.bs, pkt);
    }

    fn reply(&self, ctx: &mut Ctx, dst: Address, body: SignalBody) {
        let p = ctx.signal(self.addr, dst, body);
        self.on_link(ctx, p);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::RaBeacon if self.beacons => {
                let body = SignalBody::Ra {
                    prefix: self.prefix,
                    map: self.map_option(ctx),
                };
                self.reply(ctx, self.prefix.with_node(ALL_NODES), body);
                ctx.timer(ctx.params.ra_interval, Timer::RaBeacon);
            }
            Timer::NarDad { key } => self.nar_event(ctx, key, NarEvent::DadDone),
            _ => {}
        }
    }

    /// Packet whose destination this router owns.
    pub fn on_packet(&mut self, ctx: &mut Ctx, pkt: Packet) {
        if pkt.dst != self.addr {
            self.deliver_on_link(ctx, pkt);
            return;
        }
        let src = pkt.src;
        match pkt.body.as_deref().cloned() {
            Some(SignalBody::Rs) => {
                let body = SignalBody::Ra {
                    prefix: self.prefix,
                    map: self.map_option(ctx),
                };
                self.reply(ctx, src, body);
                if self.fh {
                    let keys: Vec<Address> = self
                        .nar
                        .iter()
                        .filter(|(_, c)| c.fbu.as_ref().is_some_and(|f| f.plcoa == src) || c.nlcoa == src)
                        .map(|(k, _)| *k)
                        .collect();
                    for k in keys {
                        self.nar_event(ctx, k, NarEvent::Rs);
                    }
                }
            }
            Some(SignalBody::Ns { target }) => {
                if ctx.params.occupied.contains(&target) {
                    self.reply(ctx, target, SignalBody::Na { target });
                }
            }
            Some(SignalBody::RtSolPr { target_ar }) if self.fh => {
                debug_assert!(matches!(
                    fsm_step(FsmState::Oar, FsmEvent::OarRtSolPr).effects[..],
                    [Effect::Send(_)]
                ));
                let nar = NodeId(target_ar);
                let topo = ctx.topo;
                if topo.bs_of_ar(nar).is_none() {
                    self.stats.unexpected += 1;
                    ctx.trace("rtsolpr-unknown-ar", format!("{nar}"));
                } else {
                    let my_map = topo.map_of_ar(self.node);
                    let their_map = topo.map_of_ar(nar);
                    let new_map = (my_map != their_map)
                        .then(|| (topo.addr(their_map), topo.rcoa_prefix(their_map)));
                    let body = SignalBody::PrRtAdv {
                        nar: target_ar,
                        nar_prefix: topo.ar_prefix(nar),
                        new_map,
                        qos_profile: topo.addr(their_map).domain,
                    };
                    self.reply(ctx, src, body);
                }
            }
            Some(SignalBody::Hi { fbu, old_map }) if self.fh => {
                let key = fbu.nlcoa;
                let macro_ = ctx.topo.owner_of(old_map) != Some(ctx.topo.map_of_ar(self.node));
                let now = ctx.now;
                let cap = ctx.params.nar_buffer_capacity;
                let c = self.context(key, cap, now);
                if c.fsm == NarFsm::Flushed && now.saturating_sub(c.since) > CONTEXT_STALE {
                    *c = NarContext::fresh(key, cap, now);
                }
                c.fbu = Some(fbu);
                c.old_map = Some(old_map);
                self.nar_event(ctx, key, NarEvent::Hi { macro_ });
            }
            Some(SignalBody::Fna { nlcoa, fbu }) if self.fh => {
                let with_fbu = fbu.is_some();
                let cap = ctx.params.nar_buffer_capacity;
                let now = ctx.now;
                let key = self
                    .nar
                    .iter()
                    .find(|(_, c)| c.nlcoa == nlcoa)
                    .map(|(k, _)| *k)
                    .unwrap_or(nlcoa);
                let c = self.context(key, cap, now);
                let collision = c.fsm == NarFsm::Idle && ctx.params.occupied.contains(&nlcoa);
                if let Some(f) = fbu {
                    if c.old_map.is_none() {
                        c.old_map = ctx.topo.owner_of(f.rcoa).map(|m| ctx.topo.addr(m));
                    }
                    c.fbu = Some(f);
                }
                self.nar_event(ctx, key, NarEvent::Fna { with_fbu, collision });
            }
            Some(SignalBody::HAck { nlcoa, .. }) if self.fh => {
                let key = self
                    .nar
                    .iter()
                    .find(|(_, c)| c.nlcoa == nlcoa || c.requested == nlcoa)
                    .map(|(k, _)| *k);
                if let Some(k) = key {
                    self.nar_event(ctx, k, NarEvent::HAckFromNewMap);
                }
            }
            _ => {}
        }
        ctx.consume(pkt);
    }

    fn context(&mut self, key: Address, cap: usize, now: SimTime) -> &mut NarContext {
        self.nar
            .entry(key)
            .or_insert_with(|| NarContext::fresh(key, cap, now))
    }

    fn deliver_on_link(&mut self, ctx: &mut Ctx, pkt: Packet) {
        let dst = pkt.dst;
        let ctx_buf = self
            .nar
            .values_mut()
            .find(|c| c.nlcoa == dst && matches!(c.fsm, NarFsm::DadRunning | NarFsm::TunnelUpBuffering));
        match ctx_buf {
            Some(c) => {
                self.stats.buffered += 1;
                if let Some(old) = c.buffer.push(pkt) {
                    self.stats.buffer_drops += 1;
                    ctx.drop_pkt(old, DropReason::NarBufferOverflow);
                }
            }
            None => self.on_link(ctx, pkt),
        }
    }

    fn nar_event(&mut self, ctx: &mut Ctx, key: Address, ev: NarEvent) {
        let Some(c) = self.nar.get(&key) else { return };
        let step = fsm_step(FsmState::Nar(c.fsm), FsmEvent::Nar(ev));
        if step.kind == super::fh_fsm::StepKind::Unexpected {
            self.stats.unexpected += 1;
            ctx.trace("nar-unexpected", format!("{:?} in {:?}", ev, c.fsm));
            return;
        }
        let FsmState::Nar(next) = step.next else { unreachable!() };
        let c = self.nar.get_mut(&key).expect("context exists");
        c.fsm = next;
        if next == NarFsm::Flushed {
            c.since = ctx.now;
        }
        for fx in step.effects {
            self.apply(ctx, key, ev, fx);
        }
    }

    fn apply(&mut self, ctx: &mut Ctx, key: Address, ev: NarEvent, fx: Effect) {
        let occupied = ctx.params.occupied.clone();
        let my_map = ctx.topo.addr(ctx.topo.map_of_ar(self.node));
        let c = self.nar.get_mut(&key).expect("context exists");
        match fx {
            Effect::StartDad => {
                c.nlcoa = bump_until_free(c.requested, &occupied);
                ctx.timer(ctx.params.dad_delay_fast, Timer::NarDad { key });
            }
            Effect::Flush => {
                let pkts = c.buffer.drain();
                self.stats.flushed += pkts.len() as u64;
                for p in pkts {
                    ctx.send_via(self.bs, p);
                }
            }
            Effect::Send(e) => {
                let (nlcoa, fbu, old_map) = (c.nlcoa, c.fbu.clone(), c.old_map);
                use crate::packet::SignalKind as K;
                match (e.kind, e.to) {
                    (K::Hi, Peer::NewMap) => {
                        if let (Some(fbu), Some(old_map)) = (fbu, old_map) {
                            let p = ctx.signal(self.addr, my_map, SignalBody::Hi { fbu, old_map });
                            ctx.send(p);
                        }
                    }
                    (K::HAck, Peer::OldMap) => {
                        if let Some(old_map) = old_map {
                            let nrcoa = fbu.and_then(|f| f.nrcoa);
                            let body = SignalBody::HAck {
                                nlcoa,
                                nrcoa,
                                from_new_map: false,
                            };
                            let p = ctx.signal(self.addr, old_map, body);
                            ctx.send(p);
                        }
                    }
                    (K::Naack, _) => {
                        let alternative = bump_until_free(nlcoa, &occupied);
                        let body = SignalBody::Naack {
                            rejected: nlcoa,
                            alternative,
                        };
                        // The context is re-keyed when the corrected FNA arrives.
                        self.nar.remove(&key);
                        self.reply(ctx, nlcoa, body);
                    }
                    (K::Fbu, Peer::OldMap) => {
                        if let (Some(mut f), Some(old_map)) = (fbu, old_map) {
                            f.nlcoa = nlcoa;
                            let p = ctx.signal(self.addr, old_map, SignalBody::Fbu(f));
                            ctx.send(p);
                        }
                    }
                    other => {
                        self.stats.unexpected += 1;
                        ctx.trace("nar-unrouted", format!("{other:?} after {ev:?}"));
                    }
                }
            }
            _ => {}
        }
    }
}

impl NarContext {
    fn fresh(key: Address, cap: usize, now: SimTime) -> Self {
        Self {
            fsm: NarFsm::Idle,
            requested: key,
            nlcoa: key,
            fbu: None,
            old_map: None,
            buffer: NarBuffer::new(cap),
            since: now,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Topology, TopologyParams};
    use crate::proto::{Action, ProtoParams};
    use proptest::prelude::*;

    fn data(uid: u64, dst: Address) -> Packet {
        Packet::data(uid, 0, uid, crate::net::CN_ADDR, dst, 1000, SimTime::ZERO)
    }

    proptest! {
        #[test]
        fn buffer_never_exceeds_capacity(cap in 0usize..20, n in 0usize..60) {
            let mut b = NarBuffer::new(cap);
            let mut evicted = 0;
            for i in 0..n {
                if b.push(data(i as u64, Address::new(2, 2, 100))).is_some() {
                    evicted += 1;
                }
                prop_assert!(b.len() <= cap);
            }
            prop_assert_eq!(b.len() + evicted, n);
            let out = b.drain();
            // Oldest are evicted, survivors keep arrival order.
            let uids: Vec<u64> = out.iter().map(|p| p.uid).collect();
            let first = n.saturating_sub(cap) as u64;
            let expect: Vec<u64> = (first..n as u64).collect();
            prop_assert_eq!(uids, expect);
        }
    }

    struct H {
        topo: Topology,
        params: ProtoParams,
        uid: u64,
        out: Vec<Action>,
    }

    impl H {
        fn new() -> Self {
            let mut params = ProtoParams::default();
            params.occupied = vec![Address::new(2, 2, 100)];
            Self {
                topo: Topology::build(&TopologyParams::default()),
                params,
                uid: 0,
                out: Vec::new(),
            }
        }
        fn run<F: FnOnce(&mut Ctx)>(&mut self, node: NodeId, f: F) -> Vec<Action> {
            self.out.clear();
            let mut ctx = Ctx::new(SimTime::ZERO, node, &self.topo, &self.params, true, &mut self.uid, &mut self.out);
            f(&mut ctx);
            std::mem::take(&mut self.out)
        }
    }

    fn sent_bodies(a: &[Action]) -> Vec<SignalBody> {
        a.iter()
            .filter_map(|x| match x {
                Action::Send { pkt, .. } | Action::SendVia { pkt, .. } => pkt.body.as_deref().cloned(),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn rs_answered_with_prefix_and_map() {
        let mut h = H::new();
        let ar = h.topo.ars[0];
        let mut agent = agent(&h, ar);
        let rs = Packet::signal(1, Address::new(1, 0, 2), agent.addr, SignalBody::Rs, SimTime::ZERO);
        let acts = h.run(ar, |c| agent.on_packet(c, rs));
        let b = sent_bodies(&acts);
        assert_eq!(
            b,
            vec![SignalBody::Ra {
                prefix: Prefix::new(2, 1),
                map: Some((Address::new(2, 0, 1), Prefix::new(2, 0)))
            }]
        );
    }

    fn agent(h: &H, ar: NodeId) -> AccessRouter {
        let mut uid = 0;
        let mut out = Vec::new();
        let c = Ctx::new(SimTime::ZERO, ar, &h.topo, &h.params, true, &mut uid, &mut out);
        AccessRouter::new(&c, ar, true, false)
    }

    #[test]
    fn prrtadv_names_new_map_only_across_domains() {
        let mut h = H::new();
        let oar = h.topo.ars[1];
        let mut a = agent(&h, oar);
        let ask = |at: Address, target: NodeId| {
            Packet::signal(1, Address::new(2, 2, 100), at, SignalBody::RtSolPr { target_ar: target.0 }, SimTime::ZERO)
        };
        let t = h.topo.ars[2];
        let acts = h.run(oar, |c| a.on_packet(c, ask(a.addr, t)));
        match &sent_bodies(&acts)[0] {
            SignalBody::PrRtAdv { new_map, nar_prefix, .. } => {
                assert_eq!(*nar_prefix, Prefix::new(3, 1));
                assert_eq!(*new_map, Some((Address::new(3, 0, 1), Prefix::new(3, 0))));
            }
            b => panic!("{b:?}"),
        }
        let oar = h.topo.ars[0];
        let mut a = agent(&h, oar);
        let t = h.topo.ars[1];
        let acts = h.run(oar, |c| a.on_packet(c, ask(a.addr, t)));
        assert!(matches!(&sent_bodies(&acts)[0], SignalBody::PrRtAdv { new_map: None, .. }));
    }

    fn fbu(nlcoa: Address) -> FbuInfo {
        FbuInfo {
            rcoa: Address::new(2, 0, 100),
            plcoa: Address::new(2, 1, 100),
            nlcoa,
            nrcoa: None,
            nar: 6,
        }
    }

    #[test]
    fn hi_buffers_until_fna_then_flushes_in_order() {
        let mut h = H::new();
        let nar = h.topo.ars[1];
        let mut a = agent(&h, nar);
        let nl = Address::new(2, 2, 100);
        let hi = Packet::signal(1, Address::new(2, 0, 1), a.addr, SignalBody::Hi { fbu: fbu(nl), old_map: Address::new(2, 0, 1) }, SimTime::ZERO);
        let acts = h.run(nar, |c| a.on_packet(c, hi));
        assert!(acts.iter().any(|x| matches!(x, Action::Timer { timer: Timer::NarDad { .. }, .. })));
        // 2.2.100 is occupied, so DAD grants .101.
        let granted = Address::new(2, 2, 101);
        let acts = h.run(nar, |c| a.on_timer(c, Timer::NarDad { key: nl }));
        assert!(matches!(&sent_bodies(&acts)[0], SignalBody::HAck { nlcoa, .. } if *nlcoa == granted));
        for i in 0..3 {
            let acts = h.run(nar, |c| a.on_packet(c, data(i, granted)));
            assert!(acts.is_empty());
        }
        let fna = Packet::signal(9, granted, a.addr, SignalBody::Fna { nlcoa: granted, fbu: None }, SimTime::ZERO);
        let acts = h.run(nar, |c| a.on_packet(c, fna));
        let uids: Vec<u64> = acts
            .iter()
            .filter_map(|x| match x {
                Action::SendVia { pkt, .. } if pkt.is_data() => Some(pkt.uid),
                _ => None,
            })
            .collect();
        assert_eq!(uids, vec![0, 1, 2]);
        assert_eq!(a.stats.flushed, 3);
    }

    #[test]
    fn reactive_fna_collision_gets_naack_then_relays_fbu() {
        let mut h = H::new();
        let nar = h.topo.ars[1];
        let mut a = agent(&h, nar);
        let nl = Address::new(2, 2, 100);
        let fna = |x: Address| Packet::signal(9, x, Address::new(2, 2, 1), SignalBody::Fna { nlcoa: x, fbu: Some(fbu(x)) }, SimTime::ZERO);
        let acts = h.run(nar, |c| a.on_packet(c, fna(nl)));
        let alt = match &sent_bodies(&acts)[0] {
            SignalBody::Naack { alternative, .. } => *alternative,
            b => panic!("{b:?}"),
        };
        assert_eq!(alt, Address::new(2, 2, 101));
        let acts = h.run(nar, |c| a.on_packet(c, fna(alt)));
        let sends: Vec<_> = acts
            .iter()
            .filter_map(|x| match x {
                Action::Send { pkt, .. } => Some(pkt.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(sends.len(), 1);
        assert_eq!(sends[0].dst, Address::new(2, 0, 1));
        assert!(matches!(sends[0].body.as_deref(), Some(SignalBody::Fbu(f)) if f.nlcoa == alt));
    }
}
