//! Baseline network mobility: interval or solicited movement detection, DAD,
//! home registration and the bidirectional HA–MR tunnel.

use super::{
    unwrap_for_delivery, BindingCache, Ctx, Detection, DropReason, Milestone, MobileRouter, Timer,
};
use crate::net::NodeId;
use crate::packet::{
    decapsulate, encapsulate, Address, Packet, PacketKind, Prefix, SignalBody, SignalKind,
};
use crate::sim::SimTime;

/// Home agent shared by every protocol variant.
#[derive(Debug, Clone)]
pub struct HomeAgent {
    pub addr: Address,
    pub cache: BindingCache,
    pub bu_accepted: u64,
}

/// Tunnels a packet for a registered home address or prefix to its CoA.
pub fn ha_intercept(
    cache: &BindingCache,
    ha: Address,
    pkt: Packet,
    now: SimTime,
    max_depth: usize,
) -> Result<Packet, (Packet, DropReason)> {
    let Some(entry) = cache.lookup(pkt.dst, now) else {
        return Err((pkt, DropReason::NoBinding));
    };
    let (coa, dscp) = (entry.coa, pkt.dscp);
    encapsulate(pkt.clone(), ha, coa, dscp, max_depth).map_err(|_| (pkt, DropReason::DepthExceeded))
}

impl HomeAgent {
    pub fn new(addr: Address) -> Self {
        Self {
            addr,
            cache: BindingCache::new(),
            bu_accepted: 0,
        }
    }

    /// Handles a packet whose destination this HA owns.
    pub fn on_packet(&mut self, ctx: &mut Ctx, pkt: Packet) {
        if pkt.dst != self.addr {
            match ha_intercept(&self.cache, self.addr, pkt, ctx.now, ctx.params.max_depth) {
                Ok(t) => ctx.send(t),
                Err((p, why)) => ctx.drop_pkt(p, why),
            }
            return;
        }
        if pkt.inner.is_some() {
            // Reverse tunnel from a mobile router.
            let inner = decapsulate(pkt).expect("inner checked");
            if self.cache.lookup(inner.src, ctx.now).is_some() {
                ctx.send(inner);
            } else {
                ctx.drop_pkt(inner, DropReason::NotRegistered);
            }
            return;
        }
        if let Some(SignalBody::Bu {
            hoa,
            coa,
            mnps,
            lifetime,
            ..
        }) = pkt.body.as_deref()
        {
            let (hoa, coa) = (*hoa, *coa);
            self.cache
                .update(hoa, coa, mnps.clone(), ctx.now + *lifetime);
            self.bu_accepted += 1;
            ctx.trace("binding", format!("HA {hoa}->{coa}"));
            let ba = ctx.signal(
                self.addr,
                coa,
                SignalBody::Ba {
                    hoa,
                    coa,
                    accepted: true,
                },
            );
            ctx.send(ba);
            ctx.consume(pkt);
        } else {
            ctx.consume(pkt);
        }
    }
}

/// Where the mobile router sends a packet.
#[derive(Debug, Clone, PartialEq)]
pub enum MrOut {
    ToMnn(Packet),
    Upstream(Packet),
}

/// Mobile-router side of the tunnel: unwraps downstream traffic for the
/// mobile network, wraps upstream traffic toward the HA.
pub fn mr_tunnel_endpoints(
    coa: Option<Address>,
    registered: bool,
    ha: Address,
    mnp: Prefix,
    pkt: Packet,
    max_depth: usize,
) -> Result<MrOut, (Packet, DropReason)> {
    if mnp.contains(pkt.src) && pkt.inner.is_none() && !mnp.contains(pkt.dst) {
        let Some(coa) = coa.filter(|_| registered) else {
            return Err((pkt, DropReason::NotRegistered));
        };
        let dscp = pkt.dscp;
        return encapsulate(pkt.clone(), coa, ha, dscp, max_depth)
            .map(MrOut::Upstream)
            .map_err(|_| (pkt, DropReason::DepthExceeded));
    }
    let inner = unwrap_for_delivery(pkt);
    if mnp.contains(inner.dst) {
        Ok(MrOut::ToMnn(inner))
    } else {
        Err((inner, DropReason::WrongDestination))
    }
}

/// Baseline mobile router.
#[derive(Debug, Clone)]
pub struct MrState {
    pub hoa: Address,
    pub coa: Option<Address>,
    pub mnp: Prefix,
    pub ha: Address,
    pub attached_bs: Option<NodeId>,
    pub dad_pending: bool,
    pub tentative: Option<Address>,
    pub registered: bool,
    pub detection: Detection,
    /// Prefix of the link the current or tentative address belongs to.
    link_prefix: Option<Prefix>,
    gen: u64,
}

impl MrState {
    pub fn new(hoa: Address, mnp: Prefix, ha: Address, detection: Detection) -> Self {
        Self {
            hoa,
            coa: None,
            mnp,
            ha,
            attached_bs: None,
            dad_pending: false,
            tentative: None,
            registered: false,
            detection,
            link_prefix: None,
            gen: 0,
        }
    }

    /// Starts address configuration if `prefix` is new.
    pub fn on_router_advertisement(&mut self, ctx: &mut Ctx, prefix: Prefix) {
        if self.attached_bs.is_none() || self.link_prefix == Some(prefix) {
            return;
        }
        ctx.milestone(Milestone::Detected);
        self.link_prefix = Some(prefix);
        self.coa = None;
        self.registered = false;
        self.start_dad(ctx, prefix.with_node(crate::net::DMR_IID));
    }

    fn start_dad(&mut self, ctx: &mut Ctx, tentative: Address) {
        self.gen += 1;
        self.tentative = Some(tentative);
        self.dad_pending = true;
        let ns = ctx.signal(tentative, tentative.prefix().with_node(1), SignalBody::Ns { target: tentative });
        ctx.send(ns);
        ctx.timer(ctx.params.dad_delay, Timer::Dad { gen: self.gen });
    }

    fn send_bu(&mut self, ctx: &mut Ctx) {
        let Some(coa) = self.coa else { return };
        let bu = ctx.signal(
            coa,
            self.ha,
            SignalBody::Bu {
                hoa: self.hoa,
                coa,
                mnps: vec![self.mnp],
                lifetime: ctx.params.binding_lifetime,
                tokens: None,
            },
        );
        ctx.send(bu);
        if !self.registered {
            ctx.timer(ctx.params.bu_retx, Timer::BuRetx { gen: self.gen });
        }
    }

    fn on_signal(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match pkt.body.as_deref() {
            Some(SignalBody::Ra { prefix, .. }) => {
                let prefix = *prefix;
                self.on_router_advertisement(ctx, prefix);
            }
            Some(SignalBody::Na { target }) if self.dad_pending && Some(*target) == self.tentative => {
                // Address in use on this link: bump the interface id and retry.
                let t = *target;
                ctx.trace("dad-collision", format!("{t}"));
                self.start_dad(ctx, Address::new(t.domain, t.site, t.node + 1));
            }
            Some(SignalBody::Ba { coa, accepted, .. }) if Some(*coa) == self.coa && *accepted => {
                if !self.registered {
                    self.registered = true;
                    ctx.milestone(Milestone::Registered);
                }
                ctx.timer(ctx.params.refresh_interval, Timer::Refresh { gen: self.gen });
            }
            _ => {}
        }
        ctx.consume(pkt);
    }
}

impl MobileRouter for MrState {
    fn on_attach(&mut self, ctx: &mut Ctx, bs: NodeId) {
        self.attached_bs = Some(bs);
        if self.detection == Detection::Solicited {
            let src = self.coa.unwrap_or(self.hoa);
            let ar = ctx.topo.ar_of_bs(bs);
            let rs = ctx.signal(src, ctx.topo.addr(ar), SignalBody::Rs);
            ctx.send(rs);
        }
    }

    fn on_link_down(&mut self, _ctx: &mut Ctx) {
        self.attached_bs = None;
    }

    fn on_downstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        if let PacketKind::Signal(_) = pkt.kind {
            self.on_signal(ctx, pkt);
            return;
        }
        if pkt.inner.as_ref().is_some_and(|i| i.innermost().kind != PacketKind::Data) {
            let inner = unwrap_for_delivery(pkt);
            self.on_signal(ctx, inner);
            return;
        }
        match mr_tunnel_endpoints(self.coa, self.registered, self.ha, self.mnp, pkt, ctx.params.max_depth) {
            Ok(MrOut::ToMnn(p)) => ctx.send_via(ctx.topo.mnn, p),
            Ok(MrOut::Upstream(p)) => ctx.send(p),
            Err((p, why)) => ctx.drop_pkt(p, why),
        }
    }

    fn on_upstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match mr_tunnel_endpoints(self.coa, self.registered, self.ha, self.mnp, pkt, ctx.params.max_depth) {
            Ok(MrOut::Upstream(p)) => ctx.send(p),
            Ok(MrOut::ToMnn(p)) => ctx.send_via(ctx.topo.mnn, p),
            Err((p, why)) => ctx.drop_pkt(p, why),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Dad { gen } if gen == self.gen && self.dad_pending => {
                self.dad_pending = false;
                self.coa = self.tentative.take();
                ctx.milestone(Milestone::DadDone);
                self.send_bu(ctx);
            }
            Timer::Refresh { gen } if gen == self.gen && self.coa.is_some() => self.send_bu(ctx),
            Timer::BuRetx { gen } if gen == self.gen && !self.registered => self.send_bu(ctx),
            _ => {}
        }
    }

    fn care_of(&self) -> Option<Address> {
        self.coa
    }
}

/// Signals the baseline uses, for coverage checks.
pub const SIGNALS: [SignalKind; 5] = [
    SignalKind::Ra,
    SignalKind::Ns,
    SignalKind::Na,
    SignalKind::Bu,
    SignalKind::Ba,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Topology, TopologyParams, CN_ADDR, DMR_HOA, HA_ADDR, MNN_HOA, MNP};
    use crate::proto::{Action, ProtoParams};

    struct Harness {
        topo: Topology,
        params: ProtoParams,
        uid: u64,
        out: Vec<Action>,
    }

    impl Harness {
        fn new() -> Self {
            Self {
                topo: Topology::build(&TopologyParams::default()),
                params: ProtoParams::default(),
                uid: 0,
                out: Vec::new(),
            }
        }

        fn ctx(&mut self, now: SimTime, node: NodeId) -> Ctx<'_> {
            Ctx::new(now, node, &self.topo, &self.params, false, &mut self.uid, &mut self.out)
        }

        fn take(&mut self) -> Vec<Action> {
            std::mem::take(&mut self.out)
        }
    }

    fn sent(actions: &[Action]) -> Vec<&Packet> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { pkt, .. } | Action::SendVia { pkt, .. } => Some(pkt),
                _ => None,
            })
            .collect()
    }

    fn ra(prefix: Prefix) -> Packet {
        Packet::signal(
            99,
            prefix.with_node(1),
            prefix.with_node(u32::MAX),
            SignalBody::Ra { prefix, map: None },
            SimTime::ZERO,
        )
    }

    #[test]
    fn new_prefix_starts_dad_then_bu() {
        let mut h = Harness::new();
        let dmr = h.topo.dmr;
        let mut mr = MrState::new(DMR_HOA, MNP, HA_ADDR, Detection::Interval);
        let t0 = SimTime::from_secs(21);
        let bs = h.topo.bss[0];
        mr.on_attach(&mut h.ctx(t0, dmr), bs);
        mr.on_downstream(&mut h.ctx(t0, dmr), ra(Prefix::new(2, 1)));
        assert!(mr.dad_pending && mr.coa.is_none());
        let acts = h.take();
        let timer = acts.iter().find_map(|a| match a {
            Action::Timer { delay, timer, .. } => Some((*delay, *timer)),
            _ => None,
        });
        assert_eq!(timer, Some((SimTime::from_millis(500), Timer::Dad { gen: 1 })));
        assert_eq!(sent(&acts)[0].signal_kind(), Some(SignalKind::Ns));

        mr.on_timer(&mut h.ctx(t0 + SimTime::from_millis(500), dmr), Timer::Dad { gen: 1 });
        assert_eq!(mr.coa, Some(Address::new(2, 1, 100)));
        let acts = h.take();
        let bu = sent(&acts)[0];
        assert_eq!(bu.dst, HA_ADDR);
        assert!(matches!(bu.body.as_deref(), Some(SignalBody::Bu { coa, .. }) if *coa == Address::new(2, 1, 100)));
    }

    #[test]
    fn same_prefix_no_action() {
        let mut h = Harness::new();
        let dmr = h.topo.dmr;
        let mut mr = MrState::new(DMR_HOA, MNP, HA_ADDR, Detection::Interval);
        let bs = h.topo.bss[0];
        mr.on_attach(&mut h.ctx(SimTime::ZERO, dmr), bs);
        mr.on_downstream(&mut h.ctx(SimTime::ZERO, dmr), ra(Prefix::new(2, 1)));
        h.take();
        mr.on_downstream(&mut h.ctx(SimTime::ZERO, dmr), ra(Prefix::new(2, 1)));
        assert!(sent(&h.take()).is_empty());
    }

    #[test]
    fn collision_bumps_node_id() {
        let mut h = Harness::new();
        let dmr = h.topo.dmr;
        let mut mr = MrState::new(DMR_HOA, MNP, HA_ADDR, Detection::Interval);
        let bs = h.topo.bss[0];
        mr.on_attach(&mut h.ctx(SimTime::ZERO, dmr), bs);
        mr.on_downstream(&mut h.ctx(SimTime::ZERO, dmr), ra(Prefix::new(2, 1)));
        let na = Packet::signal(5, Address::new(2, 1, 1), Address::new(2, 1, 100), SignalBody::Na { target: Address::new(2, 1, 100) }, SimTime::ZERO);
        mr.on_downstream(&mut h.ctx(SimTime::ZERO, dmr), na);
        assert_eq!(mr.tentative, Some(Address::new(2, 1, 101)));
        // The stale timer from the first attempt is ignored.
        mr.on_timer(&mut h.ctx(SimTime::from_millis(500), dmr), Timer::Dad { gen: 1 });
        assert!(mr.coa.is_none());
        mr.on_timer(&mut h.ctx(SimTime::from_millis(500), dmr), Timer::Dad { gen: 2 });
        assert_eq!(mr.coa, Some(Address::new(2, 1, 101)));
    }

    #[test]
    fn ha_installs_binding_and_acks() {
        let mut h = Harness::new();
        let ha_node = h.topo.ha;
        let mut ha = HomeAgent::new(HA_ADDR);
        let coa = Address::new(2, 1, 100);
        let bu = Packet::signal(
            1,
            coa,
            HA_ADDR,
            SignalBody::Bu { hoa: DMR_HOA, coa, mnps: vec![MNP], lifetime: SimTime::from_secs(60), tokens: None },
            SimTime::ZERO,
        );
        ha.on_packet(&mut h.ctx(SimTime::ZERO, ha_node), bu);
        assert_eq!(ha.cache.lookup(MNN_HOA, SimTime::ZERO).unwrap().coa, coa);
        let acts = h.take();
        let ba = sent(&acts)[0];
        assert_eq!((ba.signal_kind(), ba.dst), (Some(SignalKind::Ba), coa));
    }

    #[test]
    fn intercept_cases() {
        let mut cache = BindingCache::new();
        let coa = Address::new(2, 1, 100);
        let data = Packet::data(1, 1, 0, CN_ADDR, MNN_HOA, 1000, SimTime::ZERO);
        let (p, why) = ha_intercept(&cache, HA_ADDR, data.clone(), SimTime::ZERO, 4).unwrap_err();
        assert_eq!((p.uid, why), (1, DropReason::NoBinding));
        cache.update(DMR_HOA, coa, vec![MNP], SimTime::from_secs(60));
        let t = ha_intercept(&cache, HA_ADDR, data.clone(), SimTime::ZERO, 4).unwrap();
        assert_eq!((t.src, t.dst, t.size_bytes, t.depth()), (HA_ADDR, coa, 1040, 1));
        // Stale binding behaves like none.
        assert!(ha_intercept(&cache, HA_ADDR, data, SimTime::from_secs(61), 4).is_err());
    }

    #[test]
    fn tunnel_endpoint_examples() {
        let coa = Address::new(2, 1, 100);
        let data = Packet::data(1, 1, 0, CN_ADDR, MNN_HOA, 1000, SimTime::ZERO);
        let tunneled = encapsulate(data, HA_ADDR, coa, Default::default(), 4).unwrap();
        assert_eq!(tunneled.size_bytes, 1040);
        match mr_tunnel_endpoints(Some(coa), true, HA_ADDR, MNP, tunneled, 4).unwrap() {
            MrOut::ToMnn(p) => assert_eq!((p.size_bytes, p.dst), (1000, MNN_HOA)),
            other => panic!("{other:?}"),
        }
        let up = Packet::data(2, 2, 0, MNN_HOA, CN_ADDR, 1000, SimTime::ZERO);
        match mr_tunnel_endpoints(Some(coa), true, HA_ADDR, MNP, up.clone(), 4).unwrap() {
            MrOut::Upstream(p) => assert_eq!((p.size_bytes, p.src, p.dst), (1040, coa, HA_ADDR)),
            other => panic!("{other:?}"),
        }
        let (_, why) = mr_tunnel_endpoints(None, false, HA_ADDR, MNP, up, 4).unwrap_err();
        assert_eq!(why, DropReason::NotRegistered);
        let stray = Packet::data(3, 1, 0, CN_ADDR, Address::new(4, 4, 4), 1000, SimTime::ZERO);
        assert!(mr_tunnel_endpoints(Some(coa), true, HA_ADDR, MNP, stray, 4).is_err());
    }

    #[test]
    fn reverse_tunnel_requires_binding() {
        let mut h = Harness::new();
        let ha_node = h.topo.ha;
        let mut ha = HomeAgent::new(HA_ADDR);
        let coa = Address::new(2, 1, 100);
        let up = Packet::data(2, 2, 0, MNN_HOA, CN_ADDR, 1000, SimTime::ZERO);
        let t = encapsulate(up, coa, HA_ADDR, Default::default(), 4).unwrap();
        ha.on_packet(&mut h.ctx(SimTime::ZERO, ha_node), t.clone());
        assert!(matches!(h.take()[0], Action::Drop { reason: DropReason::NotRegistered, .. }));
        ha.cache.update(DMR_HOA, coa, vec![MNP], SimTime::from_secs(60));
        ha.on_packet(&mut h.ctx(SimTime::ZERO, ha_node), t);
        let acts = h.take();
        let fwd = sent(&acts)[0];
        assert_eq!((fwd.src, fwd.dst, fwd.depth()), (MNN_HOA, CN_ADDR, 0));
    }
}
