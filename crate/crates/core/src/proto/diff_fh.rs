//! Fast hierarchical handover agents: the MAP (serving and new-domain
//! roles) and the mobile router. Both drive the machines in `fh_fsm`.

use std::collections::BTreeMap;

use super::fh_fsm::{
    fsm_step, DmrEvent, DmrFsm, Effect, FsmEvent, FsmState, MapEvent, MapFsm, NewMapEvent, NewMapFsm, Peer, StepKind, Tag,
};
use super::rr::{RrEvent, RrExchange, RrOutput};
use super::{unwrap_for_delivery, Ctx, DropReason, Milestone, MobileRouter, Timer};
use crate::net::{NodeId, DMR_IID};
use crate::packet::{Address, FbuInfo, Packet, PacketKind, Prefix, SignalBody, SignalKind};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapBinding {
    pub lcoa: Address,
    pub mnp: Prefix,
    pub expires: SimTime,
}

/// Handover context at the MAP that holds the current binding.
#[derive(Debug, Clone)]
pub struct Serving {
    pub fsm: MapFsm,
    pub fbu: FbuInfo,
    /// NLCoA granted by the NAR.
    pub nlcoa: Address,
}

/// Binding being created at a MAP for a fresh RCoA.
#[derive(Debug, Clone)]
pub struct Fresh {
    pub fsm: NewMapFsm,
    /// FBU contents, previous MAP and NAR from the relayed HI.
    pub hi: Option<(FbuInfo, Address, Address)>,
    pub lbu: Option<(Address, Prefix, SimTime)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapStats {
    pub intercepted: u64,
    pub to_nar: u64,
    pub no_binding: u64,
    pub unexpected: u64,
}

#[derive(Debug, Clone)]
pub struct MapAgent {
    pub node: NodeId,
    pub addr: Address,
    pub prefix: Prefix,
    pub bindings: BTreeMap<Address, MapBinding>,
    pub serving: BTreeMap<Address, Serving>,
    pub fresh: BTreeMap<Address, Fresh>,
    pub stats: MapStats,
}

/// Where the MAP sends traffic for an RCoA: the NLCoA while a handover
/// tunnel is up, otherwise the bound LCoA.
pub fn map_forwarding(serving: Option<&Serving>, binding: Option<&MapBinding>, now: SimTime) -> Option<Address> {
    if let Some(s) = serving.filter(|s| s.fsm == MapFsm::Forwarding) {
        return Some(s.nlcoa);
    }
    binding.filter(|b| b.expires > now).map(|b| b.lcoa)
}

impl MapAgent {
    pub fn new(ctx: &Ctx, node: NodeId) -> Self {
        Self {
            node,
            addr: ctx.topo.addr(node),
            prefix: ctx.topo.rcoa_prefix(node),
            bindings: BTreeMap::new(),
            serving: BTreeMap::new(),
            fresh: BTreeMap::new(),
            stats: MapStats::default(),
        }
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, pkt: Packet) {
        if pkt.dst == self.addr {
            self.on_signal(ctx, &pkt);
            ctx.consume(pkt);
            return;
        }
        if !self.prefix.contains(pkt.dst) {
            ctx.drop_pkt(pkt, DropReason::NoRoute);
            return;
        }
        let rcoa = pkt.dst;
        match map_forwarding(self.serving.get(&rcoa), self.bindings.get(&rcoa), ctx.now) {
            Some(to) => {
                self.stats.intercepted += 1;
                if self.serving.get(&rcoa).is_some_and(|s| s.fsm == MapFsm::Forwarding) {
                    self.stats.to_nar += 1;
                }
                if let Some(t) = ctx.tunnel(pkt, self.addr, to) {
                    ctx.send(t);
                }
            }
            None => {
                self.stats.no_binding += 1;
                ctx.drop_pkt(pkt, DropReason::NoBinding);
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        if let Timer::RcoaDad { key } = timer {
            self.fresh_event(ctx, key, NewMapEvent::DadDone);
        }
    }

    fn unexpected(&mut self, ctx: &mut Ctx, what: String) {
        self.stats.unexpected += 1;
        ctx.trace("map-unexpected", what);
    }

    fn on_signal(&mut self, ctx: &mut Ctx, pkt: &Packet) {
        let now = ctx.now;
        match pkt.body.as_deref().cloned() {
            Some(SignalBody::Lbu {
                rcoa,
                lcoa,
                mnp,
                lifetime,
                relayed,
            }) => {
                if relayed {
                    self.bindings.insert(rcoa, MapBinding { lcoa, mnp, expires: now + lifetime });
                    if self.serving.contains_key(&rcoa) {
                        self.serving_event(ctx, rcoa, MapEvent::Lbu { relayed: true });
                    }
                } else if !self.prefix.contains(rcoa) {
                    self.unexpected(ctx, format!("LBU for foreign {rcoa}"));
                } else if self.bindings.get(&rcoa).is_some_and(|b| b.expires > now) {
                    self.bindings.insert(rcoa, MapBinding { lcoa, mnp, expires: now + lifetime });
                    if self.serving.contains_key(&rcoa) {
                        self.serving_event(ctx, rcoa, MapEvent::Lbu { relayed: false });
                    } else {
                        self.lback(ctx, rcoa, lcoa);
                    }
                } else {
                    let f = self.fresh_entry(rcoa);
                    f.lbu = Some((lcoa, mnp, lifetime));
                    self.fresh_event(ctx, rcoa, NewMapEvent::Lbu);
                }
            }
            Some(SignalBody::Fbu(info)) => {
                let rcoa = info.rcoa;
                if !self.bindings.get(&rcoa).is_some_and(|b| b.expires > now) {
                    self.unexpected(ctx, format!("FBU without binding for {rcoa}"));
                    return;
                }
                let reactive = ctx.topo.ars.iter().any(|&a| ctx.topo.addr(a) == pkt.src);
                let macro_ = info.nrcoa.is_some();
                let restart = self
                    .serving
                    .get(&rcoa)
                    .is_none_or(|s| matches!(s.fsm, MapFsm::Idle | MapFsm::Cleared));
                if restart {
                    self.serving.insert(
                        rcoa,
                        Serving {
                            fsm: MapFsm::Idle,
                            nlcoa: info.nlcoa,
                            fbu: info,
                        },
                    );
                }
                self.serving_event(ctx, rcoa, MapEvent::Fbu { reactive, macro_ });
            }
            Some(SignalBody::HAck {
                nlcoa,
                nrcoa,
                from_new_map,
            }) => {
                let src = pkt.src;
                let key = self
                    .serving
                    .iter()
                    .find(|(_, s)| {
                        if from_new_map {
                            nrcoa.is_some() && s.fbu.nrcoa == nrcoa
                        } else {
                            s.fbu.nlcoa == nlcoa || ctx.topo.addr(NodeId(s.fbu.nar)) == src
                        }
                    })
                    .map(|(k, _)| *k);
                match key {
                    Some(k) => {
                        if !from_new_map {
                            self.serving.get_mut(&k).expect("found").nlcoa = nlcoa;
                        }
                        self.serving_event(ctx, k, MapEvent::HAck { from_new_map });
                    }
                    None => self.unexpected(ctx, format!("HAck for unknown {nlcoa}")),
                }
            }
            Some(SignalBody::Hi { fbu, old_map }) => match fbu.nrcoa {
                Some(nr) if self.prefix.contains(nr) => {
                    let nar = pkt.src;
                    let f = self.fresh_entry(nr);
                    f.hi = Some((fbu, old_map, nar));
                    self.fresh_event(ctx, nr, NewMapEvent::Hi);
                }
                _ => self.unexpected(ctx, "HI without a local RCoA".into()),
            },
            _ => {}
        }
    }

    fn fresh_entry(&mut self, key: Address) -> &mut Fresh {
        self.fresh.entry(key).or_insert(Fresh {
            fsm: NewMapFsm::Idle,
            hi: None,
            lbu: None,
        })
    }

    fn lback(&mut self, ctx: &mut Ctx, rcoa: Address, lcoa: Address) {
        let p = ctx.signal(self.addr, lcoa, SignalBody::LbAck { rcoa, lcoa });
        ctx.send(p);
    }

    fn serving_event(&mut self, ctx: &mut Ctx, rcoa: Address, ev: MapEvent) {
        let s = &self.serving[&rcoa];
        let step = fsm_step(FsmState::Map(s.fsm), FsmEvent::Map(ev));
        if step.kind == StepKind::Unexpected {
            let what = format!("{ev:?} in {:?}", s.fsm);
            self.unexpected(ctx, what);
            return;
        }
        let FsmState::Map(next) = step.next else { unreachable!() };
        self.serving.get_mut(&rcoa).expect("present").fsm = next;
        let s = self.serving[&rcoa].clone();
        for fx in step.effects {
            match fx {
                Effect::Send(e) => match (e.kind, e.to) {
                    (SignalKind::Hi, Peer::Nar) => {
                        let nar = ctx.topo.addr(NodeId(s.fbu.nar));
                        let body = SignalBody::Hi {
                            fbu: s.fbu.clone(),
                            old_map: self.addr,
                        };
                        let p = ctx.signal(self.addr, nar, body);
                        ctx.send(p);
                    }
                    (SignalKind::FBack, to) => {
                        let mut dsts = vec![s.nlcoa];
                        if to == Peer::DmrBoth {
                            dsts.insert(0, s.fbu.plcoa);
                        }
                        for d in dsts {
                            let p = ctx.signal(self.addr, d, SignalBody::FBack { nlcoa: s.nlcoa });
                            ctx.send(p);
                        }
                    }
                    (SignalKind::LbAck, _) => {
                        if let Some(b) = self.bindings.get(&rcoa).cloned() {
                            self.lback(ctx, rcoa, b.lcoa);
                        }
                    }
                    other => self.unexpected(ctx, format!("unrouted {other:?}")),
                },
                Effect::StartForwarding => ctx.trace("map-forwarding", format!("{rcoa} -> {}", s.nlcoa)),
                Effect::StopForwarding => ctx.trace("map-cleared", format!("{rcoa}")),
                _ => {}
            }
        }
    }

    fn fresh_event(&mut self, ctx: &mut Ctx, key: Address, ev: NewMapEvent) {
        let Some(f) = self.fresh.get(&key) else { return };
        let step = fsm_step(FsmState::NewMap(f.fsm), FsmEvent::NewMap(ev));
        if step.kind == StepKind::Unexpected {
            let what = format!("{ev:?} in {:?}", f.fsm);
            self.unexpected(ctx, what);
            return;
        }
        let FsmState::NewMap(next) = step.next else { unreachable!() };
        self.fresh.get_mut(&key).expect("present").fsm = next;
        let f = self.fresh[&key].clone();
        for fx in step.effects {
            match fx {
                Effect::StartDad => ctx.timer(ctx.params.dad_delay, Timer::RcoaDad { key }),
                Effect::Send(e) => match (e.kind, e.to, &f.hi, &f.lbu) {
                    (SignalKind::HAck, to, Some((fbu, old_map, nar)), _) => {
                        let dst = if to == Peer::OldMap { *old_map } else { *nar };
                        let body = SignalBody::HAck {
                            nlcoa: fbu.nlcoa,
                            nrcoa: Some(key),
                            from_new_map: true,
                        };
                        let p = ctx.signal(self.addr, dst, body);
                        ctx.send(p);
                    }
                    (SignalKind::LbAck, _, _, Some((lcoa, mnp, lifetime))) => {
                        self.bindings.insert(
                            key,
                            MapBinding {
                                lcoa: *lcoa,
                                mnp: *mnp,
                                expires: ctx.now + *lifetime,
                            },
                        );
                        self.lback(ctx, key, *lcoa);
                    }
                    (SignalKind::Lbu, _, Some((fbu, old_map, _)), Some((lcoa, mnp, lifetime))) if e.tag == Tag::Relayed => {
                        let body = SignalBody::Lbu {
                            rcoa: fbu.rcoa,
                            lcoa: *lcoa,
                            mnp: *mnp,
                            lifetime: *lifetime,
                            relayed: true,
                        };
                        let p = ctx.signal(self.addr, *old_map, body);
                        ctx.send(p);
                    }
                    other => self.unexpected(ctx, format!("unrouted {:?}", (other.0, other.1))),
                },
                _ => {}
            }
        }
        if next == NewMapFsm::Bound {
            self.fresh.remove(&key);
        }
    }
}

/// Addresses prepared from a proxy router advertisement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub nar: NodeId,
    pub nlcoa: Address,
    /// Present when the new router is in another MAP domain.
    pub nrcoa: Option<Address>,
    pub new_map: Option<(Address, Prefix)>,
}

pub fn handle_prrtadv(body: &SignalBody) -> Option<Prepared> {
    match body {
        SignalBody::PrRtAdv {
            nar,
            nar_prefix,
            new_map,
            ..
        } => Some(Prepared {
            nar: NodeId(*nar),
            nlcoa: nar_prefix.with_node(DMR_IID),
            nrcoa: new_map.map(|(_, p)| p.with_node(DMR_IID)),
            new_map: *new_map,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boot {
    WaitRa,
    Dad,
    WaitLbAck,
    Done,
}

#[derive(Debug, Clone)]
pub struct FhDmr {
    pub hoa: Address,
    pub mnp: Prefix,
    pub ha: Address,
    pub cn: Address,
    pub fsm: DmrFsm,
    pub boot: Boot,
    pub lcoa: Option<Address>,
    pub plcoa: Option<Address>,
    pub rcoa: Option<Address>,
    pub map: Option<(Address, Prefix)>,
    pub prep: Option<Prepared>,
    pub attached_bs: Option<NodeId>,
    /// RCoA registered at the home agent.
    pub ha_coa: Option<Address>,
    /// RCoA bound at the correspondent.
    pub cn_bound: Option<Address>,
    pub rr: RrExchange,
    pub unexpected: u64,
    target_ar: Option<NodeId>,
    tentative: Option<Address>,
    gen: u64,
    rr_gen: u64,
}

impl FhDmr {
    pub fn new(hoa: Address, mnp: Prefix, ha: Address, cn: Address, rr_retries: u32) -> Self {
        Self {
            hoa,
            mnp,
            ha,
            cn,
            fsm: DmrFsm::Idle,
            boot: Boot::WaitRa,
            lcoa: None,
            plcoa: None,
            rcoa: None,
            map: None,
            prep: None,
            attached_bs: None,
            ha_coa: None,
            cn_bound: None,
            rr: RrExchange::new(rr_retries),
            unexpected: 0,
            target_ar: None,
            tentative: None,
            gen: 0,
            rr_gen: 0,
        }
    }

    fn step(&mut self, ctx: &mut Ctx, ev: DmrEvent) {
        let s = fsm_step(FsmState::Dmr(self.fsm), FsmEvent::Dmr(ev));
        match s.kind {
            StepKind::Unexpected => {
                self.unexpected += 1;
                ctx.trace("dmr-unexpected", format!("{ev:?} in {:?}", self.fsm));
                return;
            }
            StepKind::Duplicate => return,
            StepKind::Transition => {}
        }
        let FsmState::Dmr(next) = s.next else { unreachable!() };
        ctx.trace("dmr-state", format!("{:?} -> {next:?}", self.fsm));
        self.fsm = next;
        for fx in s.effects {
            self.apply(ctx, fx);
        }
    }

    fn current_ar(&self, ctx: &Ctx) -> Option<Address> {
        self.attached_bs.map(|b| ctx.topo.addr(ctx.topo.ar_of_bs(b)))
    }

    fn fbu_info(&self) -> Option<FbuInfo> {
        let p = self.prep.as_ref()?;
        Some(FbuInfo {
            rcoa: self.rcoa?,
            plcoa: self.plcoa.or(self.lcoa)?,
            nlcoa: p.nlcoa,
            nrcoa: p.nrcoa,
            nar: p.nar.0,
        })
    }

    /// Moves the link-local care-of address to the prepared one.
    fn switch_lcoa(&mut self) {
        if let Some(p) = &self.prep {
            if self.lcoa != Some(p.nlcoa) {
                self.plcoa = self.lcoa;
                self.lcoa = Some(p.nlcoa);
            }
        }
    }

    fn send_from(&self, ctx: &mut Ctx, src: Option<Address>, dst: Address, body: SignalBody) {
        let src = src.unwrap_or(self.hoa);
        let p = ctx.signal(src, dst, body);
        ctx.send(p);
    }

    fn lbu_body(&self, ctx: &Ctx, rcoa: Address) -> Option<SignalBody> {
        Some(SignalBody::Lbu {
            rcoa,
            lcoa: self.lcoa?,
            mnp: self.mnp,
            lifetime: ctx.params.binding_lifetime,
            relayed: false,
        })
    }

    fn send_ha_bu(&self, ctx: &mut Ctx) {
        let Some(rcoa) = self.rcoa else { return };
        let body = SignalBody::Bu {
            hoa: self.hoa,
            coa: rcoa,
            mnps: vec![self.mnp],
            lifetime: ctx.params.binding_lifetime,
            tokens: None,
        };
        self.send_from(ctx, Some(rcoa), self.ha, body);
    }

    fn send_cn_bu(&self, ctx: &mut Ctx) {
        let (Some(rcoa), Some(tokens)) = (self.rcoa, self.rr.tokens()) else { return };
        let body = SignalBody::Bu {
            hoa: self.hoa,
            coa: rcoa,
            mnps: vec![self.mnp],
            lifetime: ctx.params.binding_lifetime,
            tokens: Some(tokens),
        };
        self.send_from(ctx, Some(rcoa), self.cn, body);
    }

    fn start_rr(&mut self, ctx: &mut Ctx) {
        self.rr_gen += 1;
        self.rr_event(ctx, RrEvent::Start);
    }

    fn send_inits(&mut self, ctx: &mut Ctx) {
        let Some(rcoa) = self.rcoa else { return };
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
        if let Some(t) = ctx.tunnel(hoti, rcoa, self.ha) {
            ctx.send(t);
        }
        self.send_from(ctx, Some(rcoa), self.cn, SignalBody::CoTI { coa: rcoa, cookie });
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
            Some(RrOutput::Ready(_)) => {
                if self.fsm == DmrFsm::ReturnRoutability {
                    self.step(ctx, DmrEvent::RrReady);
                } else {
                    self.send_cn_bu(ctx);
                }
            }
            Some(RrOutput::GaveUp) => {
                ctx.trace("rr-failed", "staying on the home agent path".into());
                if self.fsm == DmrFsm::ReturnRoutability {
                    self.step(ctx, DmrEvent::RrFailed);
                }
            }
            None => {}
        }
    }

    fn apply(&mut self, ctx: &mut Ctx, fx: Effect) {
        match fx {
            Effect::Send(e) => self.emit(ctx, e.kind, e.to, e.tag),
            Effect::ConfigureNcoa => {}
            Effect::AdoptAlternative => {}
            Effect::Done => {
                ctx.milestone(Milestone::Complete);
                self.prep = None;
                self.plcoa = None;
            }
            _ => {}
        }
    }

    fn emit(&mut self, ctx: &mut Ctx, kind: SignalKind, to: Peer, tag: Tag) {
        let topo = ctx.topo;
        match (kind, to) {
            (SignalKind::RtSolPr, _) => {
                if let (Some(ar), Some(t)) = (self.current_ar(ctx), self.target_ar) {
                    self.send_from(ctx, self.lcoa, ar, SignalBody::RtSolPr { target_ar: t.0 });
                }
            }
            (SignalKind::Fbu, _) => {
                if let (Some(info), Some((map, _))) = (self.fbu_info(), self.map) {
                    self.send_from(ctx, self.lcoa, map, SignalBody::Fbu(info));
                }
            }
            (SignalKind::Fna, _) => {
                let fbu = if tag == Tag::CarriesFbu { self.fbu_info() } else { None };
                if tag == Tag::CarriesFbu && fbu.is_none() {
                    return;
                }
                self.switch_lcoa();
                let Some(p) = &self.prep else { return };
                let (nar, nlcoa) = (topo.addr(p.nar), p.nlcoa);
                self.send_from(ctx, Some(nlcoa), nar, SignalBody::Fna { nlcoa, fbu });
            }
            (SignalKind::Rs, _) => {
                if let Some(ar) = self.current_ar(ctx) {
                    self.send_from(ctx, self.lcoa, ar, SignalBody::Rs);
                }
            }
            (SignalKind::Lbu, _) => {
                let target = match &self.prep {
                    Some(Prepared {
                        nrcoa: Some(nr),
                        new_map: Some((m, _)),
                        ..
                    }) => Some((*nr, *m)),
                    _ => self.rcoa.zip(self.map.map(|m| m.0)),
                };
                if let Some((rcoa, map)) = target {
                    if let Some(body) = self.lbu_body(ctx, rcoa) {
                        self.send_from(ctx, self.lcoa, map, body);
                    }
                }
            }
            (SignalKind::Bu, Peer::Ha) => self.send_ha_bu(ctx),
            (SignalKind::HoTI, _) => self.start_rr(ctx),
            (SignalKind::CoTI, _) => {}
            (SignalKind::Bu, Peer::Cn) => self.send_cn_bu(ctx),
            other => {
                self.unexpected += 1;
                ctx.trace("dmr-unrouted", format!("{other:?}"));
            }
        }
    }

    fn start_dad(&mut self, ctx: &mut Ctx, tentative: Address) {
        self.gen += 1;
        self.tentative = Some(tentative);
        let ns = ctx.signal(tentative, tentative.prefix().with_node(1), SignalBody::Ns { target: tentative });
        ctx.send(ns);
        ctx.timer(ctx.params.dad_delay, Timer::Dad { gen: self.gen });
    }

    fn on_signal(&mut self, ctx: &mut Ctx, pkt: Packet) {
        let from = pkt.src;
        match pkt.body.as_deref().cloned() {
            Some(SignalBody::Ra { prefix, map }) => {
                if self.attached_bs.is_none() {
                    // Stale advertisement from a cell we already left.
                } else if self.boot == Boot::WaitRa {
                    let Some(m) = map else { return };
                    ctx.milestone(Milestone::Detected);
                    self.map = Some(m);
                    self.rcoa = Some(m.1.with_node(DMR_IID));
                    self.boot = Boot::Dad;
                    self.start_dad(ctx, prefix.with_node(DMR_IID));
                } else if self.fsm == DmrFsm::ReactiveAttach {
                    let nar = ctx.topo.ar_of_bs(self.attached_bs.expect("attached"));
                    let other_domain = map.filter(|m| Some(m.0) != self.map.map(|x| x.0));
                    self.prep = Some(Prepared {
                        nar,
                        nlcoa: prefix.with_node(DMR_IID),
                        nrcoa: other_domain.map(|m| m.1.with_node(DMR_IID)),
                        new_map: other_domain,
                    });
                    ctx.milestone(Milestone::Detected);
                    self.step(ctx, DmrEvent::Ra);
                }
            }
            Some(SignalBody::Na { target }) if self.boot == Boot::Dad && Some(target) == self.tentative => {
                ctx.trace("dad-collision", format!("{target}"));
                self.start_dad(ctx, Address::new(target.domain, target.site, target.node + 1));
            }
            Some(body @ SignalBody::PrRtAdv { .. }) => {
                if self.fsm == DmrFsm::SentRtSolPr {
                    self.prep = handle_prrtadv(&body);
                }
                self.step(ctx, DmrEvent::PrRtAdv);
                if self.fsm == DmrFsm::ConfiguredNCoA {
                    self.step(ctx, DmrEvent::NcoaReady);
                }
            }
            Some(SignalBody::FBack { nlcoa }) => {
                let fresh = matches!(self.fsm, DmrFsm::SentFbu | DmrFsm::SentFna { awaiting_fback: true });
                if fresh {
                    if let Some(p) = &mut self.prep {
                        if self.lcoa == Some(p.nlcoa) {
                            self.lcoa = Some(nlcoa);
                        }
                        p.nlcoa = nlcoa;
                    }
                    ctx.milestone(Milestone::FastAck);
                }
                self.step(ctx, DmrEvent::FBack);
            }
            Some(SignalBody::Naack { alternative, .. }) => {
                if matches!(self.fsm, DmrFsm::SentFna { awaiting_fback: true }) {
                    if let Some(p) = &mut self.prep {
                        p.nlcoa = alternative;
                    }
                    self.lcoa = Some(alternative);
                }
                self.step(ctx, DmrEvent::Naack);
            }
            Some(SignalBody::LbAck { rcoa, .. }) => {
                if self.boot == Boot::WaitLbAck && Some(rcoa) == self.rcoa {
                    self.boot = Boot::Done;
                    self.fsm = DmrFsm::LocalRegistered;
                    self.send_ha_bu(ctx);
                    ctx.timer(ctx.params.refresh_interval, Timer::Refresh { gen: 0 });
                } else if self.fsm == (DmrFsm::SentFna { awaiting_fback: false }) {
                    let macro_ = self.prep.as_ref().and_then(|p| p.nrcoa).is_some();
                    if macro_ {
                        let p = self.prep.clone().expect("macro has prep");
                        self.rcoa = p.nrcoa;
                        self.map = p.new_map;
                    }
                    self.step(ctx, DmrEvent::LbAck { macro_ });
                }
            }
            Some(SignalBody::Ba { coa, accepted, .. }) => {
                if from == self.ha && accepted {
                    if self.ha_coa != Some(coa) {
                        ctx.milestone(Milestone::Registered);
                    }
                    self.ha_coa = Some(coa);
                    if self.fsm == DmrFsm::LocalRegistered && Some(coa) == self.rcoa {
                        self.step(ctx, DmrEvent::Ba);
                    }
                } else if from == self.cn {
                    if accepted {
                        if self.cn_bound != Some(coa) {
                            ctx.milestone(Milestone::RouteOptimized);
                        }
                        self.cn_bound = Some(coa);
                        if self.fsm == DmrFsm::CnBinding {
                            self.step(ctx, DmrEvent::CnBa);
                        }
                    } else {
                        ctx.trace("cn-rejected", format!("{coa}"));
                    }
                }
            }
            Some(SignalBody::HoT { cookie, token, .. }) if cookie == self.rr_gen => {
                self.rr_event(ctx, RrEvent::HoT(token))
            }
            Some(SignalBody::CoT { cookie, token, coa }) if cookie == self.rr_gen && Some(coa) == self.rcoa => {
                self.rr_event(ctx, RrEvent::CoT(token))
            }
            Some(SignalBody::Npt { token, .. }) => self.rr_event(ctx, RrEvent::Npt(token)),
            _ => {}
        }
        ctx.consume(pkt);
    }

    /// Upstream: direct with a home address option once the CN holds a
    /// binding, else reverse-tunnelled from the registered RCoA.
    pub fn upstream(&self, pkt: Packet, max_depth: usize) -> Result<Packet, (Packet, DropReason)> {
        if let Some(c) = self.cn_bound.filter(|_| pkt.dst == self.cn) {
            let mut p = pkt;
            p.home_addr_option = Some(p.src);
            p.src = c;
            return Ok(p);
        }
        match self.ha_coa {
            Some(coa) => {
                let dscp = pkt.dscp;
                crate::packet::encapsulate(pkt.clone(), coa, self.ha, dscp, max_depth)
                    .map_err(|_| (pkt, DropReason::DepthExceeded))
            }
            None => Err((pkt, DropReason::NotRegistered)),
        }
    }
}

impl MobileRouter for FhDmr {
    fn on_attach(&mut self, ctx: &mut Ctx, bs: NodeId) {
        self.attached_bs = Some(bs);
        if self.boot != Boot::Done {
            self.boot = Boot::WaitRa;
            let ar = ctx.topo.addr(ctx.topo.ar_of_bs(bs));
            self.send_from(ctx, None, ar, SignalBody::Rs);
            return;
        }
        let ar = ctx.topo.ar_of_bs(bs);
        let ncoa_valid = self.prep.as_ref().is_some_and(|p| p.nar == ar);
        self.step(ctx, DmrEvent::L2Up { ncoa_valid });
    }

    fn on_link_down(&mut self, ctx: &mut Ctx) {
        self.attached_bs = None;
        if self.boot == Boot::Done {
            self.step(ctx, DmrEvent::L2LinkDown);
        }
    }

    fn on_l2_trigger(&mut self, ctx: &mut Ctx, next_bs: NodeId) {
        if self.boot != Boot::Done || !matches!(self.fsm, DmrFsm::Idle | DmrFsm::Complete) {
            ctx.trace("trigger-ignored", format!("{:?}", self.fsm));
            return;
        }
        self.target_ar = Some(ctx.topo.ar_of_bs(next_bs));
        self.step(ctx, DmrEvent::L2Trigger);
    }

    fn on_downstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        let inner = unwrap_for_delivery(pkt);
        if inner.kind != PacketKind::Data {
            self.on_signal(ctx, inner);
        } else if self.mnp.contains(inner.dst) {
            ctx.send_via(ctx.topo.mnn, inner);
        } else {
            ctx.drop_pkt(inner, DropReason::WrongDestination);
        }
    }

    fn on_upstream(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match self.upstream(pkt, ctx.params.max_depth) {
            Ok(p) => ctx.send(p),
            Err((p, why)) => ctx.drop_pkt(p, why),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Dad { gen } if gen == self.gen && self.boot == Boot::Dad => {
                self.lcoa = self.tentative.take();
                self.boot = Boot::WaitLbAck;
                ctx.milestone(Milestone::DadDone);
                if let (Some(rcoa), Some((map, _))) = (self.rcoa, self.map) {
                    if let Some(body) = self.lbu_body(ctx, rcoa) {
                        self.send_from(ctx, self.lcoa, map, body);
                    }
                }
            }
            Timer::Refresh { .. } => {
                ctx.timer(ctx.params.refresh_interval, Timer::Refresh { gen: 0 });
                // Mid-handover bindings are refreshed by the handover itself.
                if self.fsm != DmrFsm::Complete {
                    return;
                }
                if let (Some(rcoa), Some((map, _))) = (self.rcoa, self.map) {
                    if let Some(body) = self.lbu_body(ctx, rcoa) {
                        self.send_from(ctx, self.lcoa, map, body);
                    }
                }
                self.send_ha_bu(ctx);
                if self.cn_bound.is_some() {
                    self.start_rr(ctx);
                }
            }
            Timer::RrTimeout { gen, attempt } if gen == self.rr_gen && attempt == self.rr.attempt => {
                self.rr_event(ctx, RrEvent::Timeout)
            }
            _ => {}
        }
    }

    fn care_of(&self) -> Option<Address> {
        self.lcoa
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Topology, TopologyParams, CN_ADDR, DMR_HOA, HA_ADDR, MNP};
    use crate::proto::{Action, ProtoParams};

    struct H {
        topo: Topology,
        params: ProtoParams,
        uid: u64,
    }

    impl H {
        fn new() -> Self {
            Self {
                topo: Topology::build(&TopologyParams::default()),
                params: ProtoParams::default(),
                uid: 0,
            }
        }
        fn run<F: FnOnce(&mut Ctx)>(&mut self, node: NodeId, f: F) -> Vec<Action> {
            let mut out = Vec::new();
            let mut ctx = Ctx::new(SimTime::from_secs(30), node, &self.topo, &self.params, true, &mut self.uid, &mut out);
            f(&mut ctx);
            out
        }
        fn map(&mut self, i: usize) -> MapAgent {
            let n = self.topo.maps[i];
            let mut a = None;
            self.run(n, |c| a = Some(MapAgent::new(c, n)));
            a.unwrap()
        }
    }

    fn sends(a: &[Action]) -> Vec<Packet> {
        a.iter()
            .filter_map(|x| match x {
                Action::Send { pkt, .. } | Action::SendVia { pkt, .. } => Some(pkt.clone()),
                _ => None,
            })
            .collect()
    }

    fn sig(src: Address, dst: Address, body: SignalBody) -> Packet {
        Packet::signal(77, src, dst, body, SimTime::ZERO)
    }

    fn bound_map(h: &mut H) -> MapAgent {
        let mut m = h.map(0);
        m.bindings.insert(
            Address::new(2, 0, 100),
            MapBinding {
                lcoa: Address::new(2, 1, 100),
                mnp: MNP,
                expires: SimTime::from_secs(90),
            },
        );
        m
    }

    #[test]
    fn prrtadv_prepares_addresses() {
        let p = handle_prrtadv(&SignalBody::PrRtAdv {
            nar: 7,
            nar_prefix: Prefix::new(3, 1),
            new_map: Some((Address::new(3, 0, 1), Prefix::new(3, 0))),
            qos_profile: 3,
        })
        .unwrap();
        assert_eq!(p.nlcoa, Address::new(3, 1, 100));
        assert_eq!(p.nrcoa, Some(Address::new(3, 0, 100)));
        assert!(handle_prrtadv(&SignalBody::Rs).is_none());
    }

    #[test]
    fn map_intercepts_and_forwards_per_fsm_state() {
        let mut h = H::new();
        let mut m = bound_map(&mut h);
        let node = m.node;
        let d = Packet::data(1, 0, 0, CN_ADDR, Address::new(2, 0, 100), 1000, SimTime::ZERO);
        let out = sends(&h.run(node, |c| m.on_packet(c, d.clone())));
        assert_eq!(out[0].dst, Address::new(2, 1, 100));
        assert_eq!(out[0].inner.as_ref().unwrap().dst, Address::new(2, 0, 100));

        let info = FbuInfo {
            rcoa: Address::new(2, 0, 100),
            plcoa: Address::new(2, 1, 100),
            nlcoa: Address::new(2, 2, 100),
            nrcoa: None,
            nar: h.topo.ars[1].0,
        };
        let out = sends(&h.run(node, |c| {
            m.on_packet(c, sig(info.plcoa, Address::new(2, 0, 1), SignalBody::Fbu(info.clone())))
        }));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].dst, Address::new(2, 2, 1));
        let hack = SignalBody::HAck {
            nlcoa: info.nlcoa,
            nrcoa: None,
            from_new_map: false,
        };
        let out = sends(&h.run(node, |c| m.on_packet(c, sig(Address::new(2, 2, 1), Address::new(2, 0, 1), hack))));
        let dsts: Vec<Address> = out.iter().map(|p| p.dst).collect();
        assert_eq!(dsts, vec![info.plcoa, info.nlcoa]);
        let out = sends(&h.run(node, |c| m.on_packet(c, d.clone())));
        assert_eq!(out[0].dst, info.nlcoa);

        let lbu = SignalBody::Lbu {
            rcoa: info.rcoa,
            lcoa: info.nlcoa,
            mnp: MNP,
            lifetime: SimTime::from_secs(60),
            relayed: false,
        };
        let out = sends(&h.run(node, |c| m.on_packet(c, sig(info.nlcoa, Address::new(2, 0, 1), lbu))));
        assert!(matches!(out[0].body.as_deref(), Some(SignalBody::LbAck { .. })));
        assert_eq!(m.serving[&info.rcoa].fsm, MapFsm::Cleared);
        let out = sends(&h.run(node, |c| m.on_packet(c, d)));
        assert_eq!(out[0].dst, info.nlcoa);
    }

    #[test]
    fn map_without_binding_drops() {
        let mut h = H::new();
        let mut m = h.map(0);
        let node = m.node;
        let d = Packet::data(1, 0, 0, CN_ADDR, Address::new(2, 0, 100), 1000, SimTime::ZERO);
        let acts = h.run(node, |c| m.on_packet(c, d));
        assert!(matches!(acts[0], Action::Drop { reason: DropReason::NoBinding, .. }));
    }

    #[test]
    fn new_map_runs_rcoa_dad_then_acks_both() {
        let mut h = H::new();
        let mut m = h.map(1);
        let node = m.node;
        let info = FbuInfo {
            rcoa: Address::new(2, 0, 100),
            plcoa: Address::new(2, 2, 100),
            nlcoa: Address::new(3, 1, 100),
            nrcoa: Some(Address::new(3, 0, 100)),
            nar: h.topo.ars[2].0,
        };
        let hi = SignalBody::Hi {
            fbu: info.clone(),
            old_map: Address::new(2, 0, 1),
        };
        let acts = h.run(node, |c| m.on_packet(c, sig(Address::new(3, 1, 1), Address::new(3, 0, 1), hi)));
        let dad = acts
            .iter()
            .find_map(|a| match a {
                Action::Timer { delay, timer: Timer::RcoaDad { .. }, .. } => Some(*delay),
                _ => None,
            })
            .unwrap();
        assert_eq!(dad, h.params.dad_delay);
        let key = Address::new(3, 0, 100);
        let out = sends(&h.run(node, |c| m.on_timer(c, Timer::RcoaDad { key })));
        let dsts: Vec<Address> = out.iter().map(|p| p.dst).collect();
        assert_eq!(dsts, vec![Address::new(2, 0, 1), Address::new(3, 1, 1)]);
        let lbu = SignalBody::Lbu {
            rcoa: key,
            lcoa: info.nlcoa,
            mnp: MNP,
            lifetime: SimTime::from_secs(60),
            relayed: false,
        };
        let out = sends(&h.run(node, |c| m.on_packet(c, sig(info.nlcoa, Address::new(3, 0, 1), lbu))));
        assert_eq!(out.len(), 2);
        assert!(matches!(out[1].body.as_deref(), Some(SignalBody::Lbu { relayed: true, rcoa, .. }) if *rcoa == info.rcoa));
        assert_eq!(m.bindings[&key].lcoa, info.nlcoa);
    }

    #[test]
    fn dmr_boot_sequence() {
        let mut h = H::new();
        let dmr = h.topo.dmr;
        let bs = h.topo.bss[0];
        let mut d = FhDmr::new(DMR_HOA, MNP, HA_ADDR, CN_ADDR, 2);
        let out = sends(&h.run(dmr, |c| d.on_attach(c, bs)));
        assert!(matches!(out[0].body.as_deref(), Some(SignalBody::Rs)));
        let ra = SignalBody::Ra {
            prefix: Prefix::new(2, 1),
            map: Some((Address::new(2, 0, 1), Prefix::new(2, 0))),
        };
        let out = sends(&h.run(dmr, |c| d.on_downstream(c, sig(Address::new(2, 1, 1), DMR_HOA, ra))));
        assert!(matches!(out[0].body.as_deref(), Some(SignalBody::Ns { .. })));
        let out = sends(&h.run(dmr, |c| d.on_timer(c, Timer::Dad { gen: 1 })));
        assert_eq!(out[0].dst, Address::new(2, 0, 1));
        let ack = SignalBody::LbAck {
            rcoa: Address::new(2, 0, 100),
            lcoa: Address::new(2, 1, 100),
        };
        let out = sends(&h.run(dmr, |c| d.on_downstream(c, sig(Address::new(2, 0, 1), Address::new(2, 1, 100), ack))));
        assert!(matches!(out[0].body.as_deref(), Some(SignalBody::Bu { coa, .. }) if *coa == Address::new(2, 0, 100)));
        assert_eq!(d.fsm, DmrFsm::LocalRegistered);
    }

    #[test]
    fn upstream_prefers_cn_binding() {
        let mut d = FhDmr::new(DMR_HOA, MNP, HA_ADDR, CN_ADDR, 2);
        let p = Packet::data(1, 1, 0, crate::net::MNN_HOA, CN_ADDR, 500, SimTime::ZERO);
        assert!(matches!(d.upstream(p.clone(), 4), Err((_, DropReason::NotRegistered))));
        d.ha_coa = Some(Address::new(2, 0, 100));
        let t = d.upstream(p.clone(), 4).unwrap();
        assert_eq!(t.dst, HA_ADDR);
        d.cn_bound = Some(Address::new(2, 0, 100));
        let o = d.upstream(p, 4).unwrap();
        assert_eq!(o.src, Address::new(2, 0, 100));
        assert_eq!(o.home_addr_option, Some(crate::net::MNN_HOA));
    }
}
