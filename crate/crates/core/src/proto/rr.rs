//! Return routability with the network prefix test, and the correspondent
//! node's binding cache.

use std::collections::BTreeMap;

use super::{BindingCache, Ctx};
use crate::packet::{Address, Packet, Prefix, RrTokens, SignalBody, SignalKind};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RrState {
    Idle,
    SentHoTICoTI,
    GotHoT,
    GotCoT,
    GotNpt,
    Ready,
    /// All retries used up.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RrEvent {
    Start,
    HoT(u64),
    CoT(u64),
    Npt(u64),
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrOutput {
    /// Send HoTI (via the home agent) and CoTI (direct).
    SendInits,
    Ready(RrTokens),
    GaveUp,
}

/// Mobile-router side of one exchange with one correspondent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RrExchange {
    pub state: RrState,
    pub home: Option<u64>,
    pub careof: Option<u64>,
    pub prefix: Option<u64>,
    pub attempt: u32,
    pub max_retries: u32,
}

impl RrExchange {
    pub fn new(max_retries: u32) -> Self {
        Self {
            state: RrState::Idle,
            home: None,
            careof: None,
            prefix: None,
            attempt: 0,
            max_retries,
        }
    }

    pub fn tokens(&self) -> Option<RrTokens> {
        Some(RrTokens {
            home: self.home?,
            careof: self.careof?,
            prefix: self.prefix?,
        })
    }

    pub fn step(&mut self, ev: RrEvent) -> Option<RrOutput> {
        use RrState::*;
        let waiting = matches!(self.state, SentHoTICoTI | GotHoT | GotCoT | GotNpt);
        match ev {
            RrEvent::Start => {
                *self = RrExchange::new(self.max_retries);
                self.state = SentHoTICoTI;
                Some(RrOutput::SendInits)
            }
            RrEvent::HoT(t) | RrEvent::CoT(t) | RrEvent::Npt(t) if waiting => {
                let (slot, st) = match ev {
                    RrEvent::HoT(_) => (&mut self.home, GotHoT),
                    RrEvent::CoT(_) => (&mut self.careof, GotCoT),
                    _ => (&mut self.prefix, GotNpt),
                };
                *slot = Some(t);
                self.state = st;
                match self.tokens() {
                    Some(tok) => {
                        self.state = Ready;
                        Some(RrOutput::Ready(tok))
                    }
                    None => None,
                }
            }
            RrEvent::Timeout if waiting => {
                if self.attempt < self.max_retries {
                    self.attempt += 1;
                    self.state = SentHoTICoTI;
                    Some(RrOutput::SendInits)
                } else {
                    self.state = Failed;
                    Some(RrOutput::GaveUp)
                }
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TokenKind {
    Home,
    CareOf,
}

/// Correspondent node protocol state.
#[derive(Debug, Clone)]
pub struct CnState {
    pub address: Address,
    pub cache: BindingCache,
    issued: BTreeMap<(TokenKind, Address), (u64, SimTime)>,
    issued_prefix: BTreeMap<Vec<Prefix>, (u64, SimTime)>,
    nonce: u64,
    pub rejected_bus: u64,
    pub accepted_bus: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuVerdict {
    Accepted,
    MissingTokens,
    InvalidTokens,
    StaleTokens,
}

impl CnState {
    pub fn new(address: Address) -> Self {
        Self {
            address,
            cache: BindingCache::new(),
            issued: BTreeMap::new(),
            issued_prefix: BTreeMap::new(),
            nonce: 0x51ed_c0de,
            rejected_bus: 0,
            accepted_bus: 0,
        }
    }

    fn fresh_token(&mut self) -> u64 {
        // splitmix64 over a counter: opaque and deterministic.
        self.nonce = self.nonce.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.nonce;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn issue_home(&mut self, hoa: Address, now: SimTime) -> u64 {
        let t = self.fresh_token();
        self.issued.insert((TokenKind::Home, hoa), (t, now));
        t
    }

    pub fn issue_careof(&mut self, coa: Address, now: SimTime) -> u64 {
        let t = self.fresh_token();
        self.issued.insert((TokenKind::CareOf, coa), (t, now));
        t
    }

    pub fn issue_prefix(&mut self, mnps: &[Prefix], now: SimTime) -> u64 {
        let t = self.fresh_token();
        self.issued_prefix.insert(mnps.to_vec(), (t, now));
        t
    }

    pub fn verify(
        &self,
        hoa: Address,
        coa: Address,
        mnps: &[Prefix],
        tokens: Option<RrTokens>,
        now: SimTime,
        lifetime: SimTime,
    ) -> BuVerdict {
        let Some(tok) = tokens else {
            return BuVerdict::MissingTokens;
        };
        let checks = [
            self.issued.get(&(TokenKind::Home, hoa)).map(|x| (x.0 == tok.home, x.1)),
            self.issued.get(&(TokenKind::CareOf, coa)).map(|x| (x.0 == tok.careof, x.1)),
            self.issued_prefix.get(mnps).map(|x| (x.0 == tok.prefix, x.1)),
        ];
        let mut stale = false;
        for c in checks {
            match c {
                Some((true, at)) => stale |= now.saturating_sub(at) > lifetime,
                _ => return BuVerdict::InvalidTokens,
            }
        }
        if stale {
            BuVerdict::StaleTokens
        } else {
            BuVerdict::Accepted
        }
    }

    /// Handles RR inits and BUs addressed to the CN. Returns false for
    /// anything else so the caller can treat it as application traffic.
    pub fn on_signal(&mut self, ctx: &mut Ctx, pkt: &Packet) -> bool {
        let now = ctx.now;
        match pkt.body.as_deref() {
            Some(SignalBody::HoTI { hoa, mnps, cookie }) => {
                let (hoa, cookie, mnps) = (*hoa, *cookie, mnps.clone());
                let token = self.issue_home(hoa, now);
                let hot = ctx.signal(self.address, hoa, SignalBody::HoT { hoa, cookie, token });
                ctx.send(hot);
                let ptoken = self.issue_prefix(&mnps, now);
                let npt = ctx.signal(self.address, hoa, SignalBody::Npt { mnps, token: ptoken });
                ctx.send(npt);
                true
            }
            Some(SignalBody::CoTI { coa, cookie }) => {
                let (coa, cookie) = (*coa, *cookie);
                let token = self.issue_careof(coa, now);
                let cot = ctx.signal(self.address, coa, SignalBody::CoT { coa, cookie, token });
                ctx.send(cot);
                true
            }
            Some(SignalBody::Bu {
                hoa,
                coa,
                mnps,
                lifetime,
                tokens,
            }) => {
                let verdict = self.verify(*hoa, *coa, mnps, *tokens, now, ctx.params.token_lifetime);
                let accepted = verdict == BuVerdict::Accepted;
                if accepted {
                    self.cache.update(*hoa, *coa, mnps.clone(), now + *lifetime);
                    self.accepted_bus += 1;
                    ctx.trace("binding", format!("CN {hoa}->{coa}"));
                } else {
                    self.rejected_bus += 1;
                    ctx.trace("bu-rejected", format!("{verdict:?} {hoa}->{coa}"));
                }
                let ba = ctx.signal(
                    self.address,
                    *coa,
                    SignalBody::Ba {
                        hoa: *hoa,
                        coa: *coa,
                        accepted,
                    },
                );
                ctx.send(ba);
                true
            }
            _ => false,
        }
    }

    /// Addressing for a CN→MNN packet: direct to the CoA with a type 2
    /// routing header when bound, otherwise to the home address.
    pub fn address_data(&self, mut pkt: Packet, now: SimTime) -> Packet {
        if let Some(e) = self.cache.lookup(pkt.dst, now) {
            pkt.rh2_home_addr = Some(pkt.dst);
            pkt.dst = e.coa;
        }
        pkt
    }
}

/// The five signals an exchange plus registration uses.
pub const SIGNALS: [SignalKind; 5] = [
    SignalKind::HoTI,
    SignalKind::HoT,
    SignalKind::CoTI,
    SignalKind::CoT,
    SignalKind::Npt,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DMR_HOA, MNN_HOA, MNP};

    #[test]
    fn ready_only_with_all_three() {
        let mut rr = RrExchange::new(2);
        assert_eq!(rr.step(RrEvent::Start), Some(RrOutput::SendInits));
        assert_eq!(rr.step(RrEvent::CoT(2)), None);
        assert_eq!(rr.state, RrState::GotCoT);
        assert_eq!(rr.step(RrEvent::HoT(1)), None);
        let out = rr.step(RrEvent::Npt(3));
        assert_eq!(
            out,
            Some(RrOutput::Ready(RrTokens {
                home: 1,
                careof: 2,
                prefix: 3
            }))
        );
        assert_eq!(rr.state, RrState::Ready);
    }

    #[test]
    fn timeout_retries_then_gives_up() {
        let mut rr = RrExchange::new(2);
        rr.step(RrEvent::Start);
        rr.step(RrEvent::HoT(1));
        assert_eq!(rr.step(RrEvent::Timeout), Some(RrOutput::SendInits));
        assert_eq!(rr.step(RrEvent::Timeout), Some(RrOutput::SendInits));
        assert_eq!(rr.step(RrEvent::Timeout), Some(RrOutput::GaveUp));
        assert_eq!(rr.state, RrState::Failed);
        assert_eq!(rr.step(RrEvent::CoT(5)), None);
    }

    #[test]
    fn retry_after_lost_cot_succeeds() {
        let mut rr = RrExchange::new(2);
        rr.step(RrEvent::Start);
        rr.step(RrEvent::HoT(1));
        rr.step(RrEvent::Npt(3));
        assert_eq!(rr.step(RrEvent::Timeout), Some(RrOutput::SendInits));
        assert!(matches!(rr.step(RrEvent::CoT(7)), Some(RrOutput::Ready(_))));
    }

    // Exhaustive: every event sequence of length ≤ 6 keeps Ready ⇔ all tokens.
    #[test]
    fn ready_iff_all_tokens_exhaustive() {
        let events = [
            RrEvent::Start,
            RrEvent::HoT(1),
            RrEvent::CoT(2),
            RrEvent::Npt(3),
            RrEvent::Timeout,
        ];
        let mut frontier = vec![RrExchange::new(2)];
        for _ in 0..6 {
            let mut next = Vec::new();
            for s in &frontier {
                for e in events {
                    let mut t = s.clone();
                    t.step(e);
                    let all = t.home.is_some() && t.careof.is_some() && t.prefix.is_some();
                    assert_eq!(t.state == RrState::Ready, all, "{t:?}");
                    next.push(t);
                }
            }
            next.sort_by_key(|r| (r.state, r.home, r.careof, r.prefix, r.attempt));
            next.dedup();
            frontier = next;
        }
    }

    #[test]
    fn cn_verification() {
        let mut cn = CnState::new(Address::new(0, 0, 0));
        let coa = Address::new(2, 1, 100);
        let t0 = SimTime::from_secs(30);
        let life = SimTime::from_secs(10);
        assert_eq!(cn.verify(DMR_HOA, coa, &[MNP], None, t0, life), BuVerdict::MissingTokens);
        let tok = RrTokens {
            home: cn.issue_home(DMR_HOA, t0),
            careof: cn.issue_careof(coa, t0),
            prefix: cn.issue_prefix(&[MNP], t0),
        };
        assert_eq!(cn.verify(DMR_HOA, coa, &[MNP], Some(tok), t0, life), BuVerdict::Accepted);
        let forged = RrTokens { home: tok.home ^ 1, ..tok };
        assert_eq!(cn.verify(DMR_HOA, coa, &[MNP], Some(forged), t0, life), BuVerdict::InvalidTokens);
        let other = Address::new(2, 2, 100);
        assert_eq!(cn.verify(DMR_HOA, other, &[MNP], Some(tok), t0, life), BuVerdict::InvalidTokens);
        let late = t0 + SimTime::from_secs(11);
        assert_eq!(cn.verify(DMR_HOA, coa, &[MNP], Some(tok), late, life), BuVerdict::StaleTokens);
        assert_eq!(cn.verify(DMR_HOA, coa, &[MNP], Some(tok), t0 + life, life), BuVerdict::Accepted);
    }

    #[test]
    fn cn_addresses_by_binding() {
        let mut cn = CnState::new(Address::new(0, 0, 0));
        let p = Packet::data(1, 1, 0, cn.address, MNN_HOA, 1000, SimTime::ZERO);
        assert_eq!(cn.address_data(p.clone(), SimTime::ZERO).dst, MNN_HOA);
        let coa = Address::new(2, 1, 100);
        cn.cache.update(DMR_HOA, coa, vec![MNP], SimTime::from_secs(60));
        let q = cn.address_data(p, SimTime::ZERO);
        assert_eq!((q.dst, q.rh2_home_addr, q.depth()), (coa, Some(MNN_HOA), 0));
    }
}
