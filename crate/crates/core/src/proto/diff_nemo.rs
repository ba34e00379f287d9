//! Route-optimising mobile router: after home registration the DMR runs
//! return routability on behalf of the whole mobile network and binds its
//! care-of address at the correspondent.

use super::rr::{RrEvent, RrExchange, RrOutput};
use super::{unwrap_for_delivery, Ctx, DropReason, Milestone, MobileRouter, Timer};
use crate::net::NodeId;
use crate::packet::{Address, Packet, PacketKind, Prefix, SignalBody};

#[derive(Debug, Clone)]
pub struct DmrState {
    pub hoa: Address,
    pub mnp: Prefix,
    pub ha: Address,
    pub cn: Address,
    pub coa: Option<Address>,
    pub tentative: Option<Address>,
    pub dad_pending: bool,
    pub ha_registered: bool,
    /// Care-of address the CN currently holds for us, if it matches `coa`.
    pub cn_bound: Option<Address>,
    pub rr: RrExchange,
    pub attached_bs: Option<NodeId>,
    link_prefix: Option<Prefix>,
    gen: u64,
    rr_gen: u64,
}

/// What the proxy does with one packet.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxyOut {
    ToMnn(Packet),
    /// Route-optimised upstream packet straight to the CN.
    Direct(Packet),
    /// Reverse tunnel through the home agent.
    ViaHa(Packet),
}

/// Downstream: strip tunnels and apply the routing header. Upstream: send
/// from the CoA with a home address option when the CN holds a binding,
/// otherwise reverse-tunnel.
pub fn proxy_forward(
    dmr: &DmrState,
    pkt: Packet,
    from_mnn: bool,
    max_depth: usize,
) -> Result<ProxyOut, (Packet, DropReason)> {
    if !from_mnn {
        let inner = unwrap_for_delivery(pkt);
        return if dmr.mnp.contains(inner.dst) {
            Ok(ProxyOut::ToMnn(inner))
        } else {
            Err((inner, DropReason::WrongDestination))
        };
    }
    match dmr.coa {
        Some(coa) if dmr.cn_bound == Some(coa) && pkt.dst == dmr.cn => {
            let mut p = pkt;
            p.home_addr_option = Some(p.src);
            p.src = coa;
            Ok(ProxyOut::Direct(p))
        }
        Some(coa) if dmr.ha_registered => {
            let dscp = pkt.dscp;
            crate::packet::encapsulate(pkt.clone(), coa, dmr.ha, dscp, max_depth)
                .map(ProxyOut::ViaHa)
                .map_err(|_| (pkt, DropReason::DepthExceeded))
        }
        _ => Err((pkt, DropReason::NotRegistered)),
    }
}

impl DmrState {
    pub fn new(hoa: Address, mnp: Prefix, ha: Address, cn: Address, rr_retries: u32) -> Self {
        Self {
            hoa,
            mnp,
            ha,
            cn,
            coa: None,
            tentative: None,
            dad_pending: false,
            ha_registered: false,
            cn_bound: None,
            rr: RrExchange::new(rr_retries),
            attached_bs: None,
            link_prefix: None,
            gen: 0,
            rr_gen: 0,
        }
    }

    /// Prefix change: tentative CoA, DAD, and on success the HA binding.
    pub fn configure_and_register(&mut self, ctx: &mut Ctx, prefix: Prefix) {
        if self.link_prefix == Some(prefix) {
            return;
        }
        ctx.milestone(Milestone::Detected);
        self.link_prefix = Some(prefix);
        self.coa = None;
        self.ha_registered = false;
        self.cn_bound = None;
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

    fn send_ha_bu(&mut self, ctx: &mut Ctx) {
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
    }

    fn send_inits(&mut self, ctx: &mut Ctx) {
        let Some(coa) = self.coa else { return };
        let cookie = self.rr_gen;
        let hoti = ctx.signal(
            self.hoa,
            self.cn,
            SignalBody::HoTI {
                hoa: self.hoa,
                mnps: vec![self.mnp],
                cookie,
            },
        );
        if let Some(t) = ctx.tunnel(hoti, coa, self.ha) {
            ctx.send(t);
        }
        let coti = ctx.signal(coa, self.cn, SignalBody::CoTI { coa, cookie });
        ctx.send(coti);
        ctx.timer(
            ctx.params.rr_timeout,
            Timer::RrTimeout {
                gen: self.rr_gen,
                attempt: self.rr.attempt,
            },
        );
    }

    fn rr_event(&mut self, ctx: &mut Ctx, ev: RrEvent) {
        match self.rr.step(ev) {
            Some(RrOutput::SendInits) => self.send_inits(ctx),
            Some(RrOutput::Ready(tokens)) => self.register_with_cn(ctx, tokens),
            Some(RrOutput::GaveUp) => ctx.trace("rr-failed", "falling back to home agent".into()),
            None => {}
        }
    }

    /// BU to the CN carrying the three RR tokens.
    pub fn register_with_cn(&mut self, ctx: &mut Ctx, tokens: crate::packet::RrTokens) {
        let Some(coa) = self.coa else { return };
        let bu = ctx.signal(
            coa,
            self.cn,
            SignalBody::Bu {
                hoa: self.hoa,
                coa,
                mnps: vec![self.mnp],
                lifetime: ctx.params.binding_lifetime,
                tokens: Some(tokens),
            },
        );
        ctx.send(bu);
    }

    fn on_signal(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match pkt.body.as_deref() {
            Some(SignalBody::Ra { prefix, .. }) => {
                let p = *prefix;
                if self.attached_bs.is_some() {
                    self.configure_and_register(ctx, p);
                }
            }
            Some(SignalBody::Na { target }) if self.dad_pending && Some(*target) == self.tentative => {
                let t = *target;
                ctx.trace("dad-collision", format!("{t}"));
                self.start_dad(ctx, Address::new(t.domain, t.site, t.node + 1));
            }
            Some(SignalBody::Ba { coa, accepted, .. }) if Some(*coa) == self.coa => {
                let (coa, accepted) = (*coa, *accepted);
                if pkt.src == self.ha && accepted {
                    if !self.ha_registered {
                        self.ha_registered = true;
                        ctx.milestone(Milestone::Registered);
                    }
                    ctx.timer(ctx.params.refresh_interval, Timer::Refresh { gen: self.gen });
                    self.rr_gen += 1;
                    self.rr_event(ctx, RrEvent::Start);
                } else if pkt.src == self.cn {
                    if accepted {
                        if self.cn_bound != Some(coa) {
                            ctx.milestone(Milestone::RouteOptimized);
                        }
                        self.cn_bound = Some(coa);
                    } else {
                        ctx.trace("cn-rejected", format!("{coa}"));
                    }
                }
            }
            Some(SignalBody::HoT { cookie, token, .. }) if *cookie == self.rr_gen => {
                let t = *token;
                self.rr_event(ctx, RrEvent::HoT(t));
            }
            Some(SignalBody::CoT { cookie, token, coa }) if *cookie == self.rr_gen && Some(*coa) == self.coa => {
                let t = *token;
                self.rr_event(ctx, RrEvent::CoT(t));
            }
            Some(SignalBody::Npt { token, .. }) => {
                let t = *token;
                self.rr_event(ctx, RrEvent::Npt(t));
            }
            _ => {}
        }
        ctx.consume(pkt);
    }
}

impl MobileRouter for DmrState {
    fn on_attach(&mut self, ctx: &mut Ctx, bs: NodeId) {
        self.attached_bs = Some(bs);
        let ar = ctx.topo.ar_of_bs(bs);
        let src = self.coa.unwrap_or(self.hoa);
        let rs = ctx.signal(src, ctx.topo.addr(ar), SignalBody::Rs);
        ctx.send(rs);
    }

    fn on_link_down(&mut self, _ctx: &mut Ctx) {
        self.attached_bs = None;
    }

    fn on_downstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        if pkt.innermost().kind != PacketKind::Data {
            let inner = unwrap_for_delivery(pkt);
            self.on_signal(ctx, inner);
            return;
        }
        match proxy_forward(self, pkt, false, ctx.params.max_depth) {
            Ok(ProxyOut::ToMnn(p)) => ctx.send_via(ctx.topo.mnn, p),
            Ok(ProxyOut::Direct(p)) | Ok(ProxyOut::ViaHa(p)) => ctx.send(p),
            Err((p, why)) => ctx.drop_pkt(p, why),
        }
    }

    fn on_upstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match proxy_forward(self, pkt, true, ctx.params.max_depth) {
            Ok(ProxyOut::ToMnn(p)) => ctx.send_via(ctx.topo.mnn, p),
            Ok(ProxyOut::Direct(p)) | Ok(ProxyOut::ViaHa(p)) => ctx.send(p),
            Err((p, why)) => ctx.drop_pkt(p, why),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Dad { gen } if gen == self.gen && self.dad_pending => {
                self.dad_pending = false;
                self.coa = self.tentative.take();
                ctx.milestone(Milestone::DadDone);
                self.send_ha_bu(ctx);
            }
            Timer::Refresh { gen } if gen == self.gen => self.send_ha_bu(ctx),
            Timer::RrTimeout { gen, attempt } if gen == self.rr_gen && attempt == self.rr.attempt => {
                self.rr_event(ctx, RrEvent::Timeout)
            }
            _ => {}
        }
    }

    fn care_of(&self) -> Option<Address> {
        self.coa
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{CN_ADDR, DMR_HOA, HA_ADDR, MNN_HOA, MNP};
    use crate::packet::{apply_home_address_option, encapsulate};
    use crate::sim::SimTime;

    fn bound() -> DmrState {
        let mut d = DmrState::new(DMR_HOA, MNP, HA_ADDR, CN_ADDR, 2);
        d.coa = Some(Address::new(2, 1, 100));
        d.ha_registered = true;
        d.cn_bound = d.coa;
        d
    }

    #[test]
    fn downstream_rewrite_yields_mnn() {
        let d = bound();
        let mut p = Packet::data(1, 1, 0, CN_ADDR, d.coa.unwrap(), 1000, SimTime::ZERO);
        p.rh2_home_addr = Some(MNN_HOA);
        match proxy_forward(&d, p, false, 4).unwrap() {
            ProxyOut::ToMnn(q) => assert_eq!((q.src, q.dst), (CN_ADDR, MNN_HOA)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tunneled_downstream_also_unwrapped() {
        let d = bound();
        let p = Packet::data(1, 1, 0, CN_ADDR, MNN_HOA, 1000, SimTime::ZERO);
        let t = encapsulate(p, HA_ADDR, d.coa.unwrap(), Default::default(), 4).unwrap();
        assert!(matches!(proxy_forward(&d, t, false, 4).unwrap(), ProxyOut::ToMnn(q) if q.depth() == 0));
    }

    #[test]
    fn upstream_with_home_address_option() {
        let d = bound();
        let p = Packet::data(1, 2, 0, MNN_HOA, CN_ADDR, 1000, SimTime::ZERO);
        let ProxyOut::Direct(q) = proxy_forward(&d, p, true, 4).unwrap() else {
            panic!()
        };
        assert_eq!((q.src, q.home_addr_option, q.depth()), (d.coa.unwrap(), Some(MNN_HOA), 0));
        let at_cn = apply_home_address_option(q).unwrap();
        assert_eq!((at_cn.src, at_cn.dst), (MNN_HOA, CN_ADDR));
    }

    #[test]
    fn upstream_without_cn_binding_goes_via_ha() {
        let mut d = bound();
        d.cn_bound = None;
        let p = Packet::data(1, 2, 0, MNN_HOA, CN_ADDR, 1000, SimTime::ZERO);
        let ProxyOut::ViaHa(q) = proxy_forward(&d, p.clone(), true, 4).unwrap() else {
            panic!()
        };
        assert_eq!((q.dst, q.size_bytes), (HA_ADDR, 1040));
        d.ha_registered = false;
        assert_eq!(proxy_forward(&d, p, true, 4).unwrap_err().1, DropReason::NotRegistered);
    }

    #[test]
    fn stale_cn_binding_not_used_after_coa_change() {
        let mut d = bound();
        d.coa = Some(Address::new(2, 2, 100));
        let p = Packet::data(1, 2, 0, MNN_HOA, CN_ADDR, 1000, SimTime::ZERO);
        assert!(matches!(proxy_forward(&d, p, true, 4).unwrap(), ProxyOut::ViaHa(_)));
    }
}
