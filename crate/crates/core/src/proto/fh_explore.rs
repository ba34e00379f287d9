//! Exhaustive exploration of one handover across the DMR, old MAP, NAR and
//! new MAP machines, over every ordering of in-flight messages.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use super::fh_fsm::*;
use super::rr::{RrEvent, RrExchange, RrOutput};
use crate::packet::SignalKind;

/// Signals the handover machines are expected to exchange.
pub const NAMED_SIGNALS: [SignalKind; 19] = [
    SignalKind::RtSolPr,
    SignalKind::PrRtAdv,
    SignalKind::Fbu,
    SignalKind::FBack,
    SignalKind::Hi,
    SignalKind::HAck,
    SignalKind::Fna,
    SignalKind::Naack,
    SignalKind::Rs,
    SignalKind::Ra,
    SignalKind::Lbu,
    SignalKind::LbAck,
    SignalKind::Bu,
    SignalKind::Ba,
    SignalKind::HoTI,
    SignalKind::HoT,
    SignalKind::CoTI,
    SignalKind::CoT,
    SignalKind::Npt,
];

#[derive(Debug, Clone, Default)]
pub struct Exploration {
    pub states: usize,
    pub terminals: usize,
    /// Terminal worlds the DMR did not finish in, rendered.
    pub stuck: Vec<String>,
    pub signals: BTreeSet<SignalKind>,
}

impl Exploration {
    pub fn missing_signals(&self) -> Vec<SignalKind> {
        NAMED_SIGNALS.iter().copied().filter(|k| !self.signals.contains(k)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reachability {
    pub reachable: usize,
    /// Reachable DMR states from which Complete cannot be reached.
    pub dead: Vec<DmrFsm>,
}

/// DMR states reachable from Idle, and whether each can still complete.
pub fn dmr_reachability() -> Reachability {
    let events: Vec<DmrEvent> = all_events()
        .into_iter()
        .filter_map(|e| match e {
            FsmEvent::Dmr(d) => Some(d),
            _ => None,
        })
        .collect();
    let mut edges: HashMap<DmrFsm, Vec<DmrFsm>> = HashMap::new();
    let mut seen = HashSet::from([DmrFsm::Idle]);
    let mut q = VecDeque::from([DmrFsm::Idle]);
    while let Some(s) = q.pop_front() {
        for &e in &events {
            let step = dmr_step(s, e);
            if step.kind == StepKind::Transition {
                let FsmState::Dmr(n) = step.next else { unreachable!() };
                edges.entry(s).or_default().push(n);
                if seen.insert(n) {
                    q.push_back(n);
                }
            }
        }
    }
    let mut dead = Vec::new();
    for &s in &seen {
        let mut reach = HashSet::from([s]);
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in edges.get(&u).into_iter().flatten() {
                if reach.insert(v) {
                    q.push_back(v);
                }
            }
        }
        if !reach.contains(&DmrFsm::Complete) {
            dead.push(s);
        }
    }
    dead.sort_by_key(|s| format!("{s:?}"));
    Reachability { reachable: seen.len(), dead }
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Link {
    Old,
    Down,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Msg {
    ToDmr { ev: DmrEvent, new_link: bool },
    ToOar,
    ToOldMap(MapEvent),
    ToNar(NarEvent),
    ToNewMap(NewMapEvent),
    /// HA or CN replying to the DMR.
    Rr(RrEvent),
    /// AR link-layer answer for an RS.
    RsAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct World {
    dmr: DmrFsm,
    old_map: MapFsm,
    nar: NarFsm,
    new_map: NewMapFsm,
    rr: RrExchange,
    link: Link,
    trigger_pending: bool,
    collision_left: bool,
    pending: Vec<Msg>,
}

#[derive(Debug, Clone, Copy)]
struct Scenario {
    macro_: bool,
    predictive: bool,
    collision: bool,
}

fn route(w: &mut World, sc: Scenario, from_nar: bool, fx: &[Effect], seen: &mut BTreeSet<SignalKind>) {
    for f in fx {
        let Effect::Send(e) = f else {
            if *f == Effect::StartDad {
                // Timer completion is modelled as a pending message.
                if from_nar {
                    w.pending.push(Msg::ToNar(NarEvent::DadDone));
                } else {
                    w.pending.push(Msg::ToNewMap(NewMapEvent::DadDone));
                }
            }
            continue;
        };
        seen.insert(e.kind);
        if e.tag == Tag::CarriesFbu {
            seen.insert(SignalKind::Fbu);
        }
        let m = sc.macro_;
        let msgs: Vec<Msg> = match (e.kind, e.to) {
            (SignalKind::RtSolPr, _) => vec![Msg::ToOar],
            (SignalKind::PrRtAdv, _) => vec![Msg::ToDmr { ev: DmrEvent::PrRtAdv, new_link: false }],
            (SignalKind::Fbu, Peer::OldMap) => vec![Msg::ToOldMap(MapEvent::Fbu { reactive: from_nar, macro_: m })],
            (SignalKind::Hi, Peer::Nar) => vec![Msg::ToNar(NarEvent::Hi { macro_: m })],
            (SignalKind::Hi, Peer::NewMap) => vec![Msg::ToNewMap(NewMapEvent::Hi)],
            (SignalKind::HAck, Peer::OldMap) => {
                vec![Msg::ToOldMap(MapEvent::HAck { from_new_map: e.tag == Tag::FromNewMap })]
            }
            (SignalKind::HAck, Peer::Nar) => vec![Msg::ToNar(NarEvent::HAckFromNewMap)],
            (SignalKind::FBack, Peer::DmrBoth) => vec![
                Msg::ToDmr { ev: DmrEvent::FBack, new_link: false },
                Msg::ToDmr { ev: DmrEvent::FBack, new_link: true },
            ],
            (SignalKind::FBack, _) => vec![Msg::ToDmr { ev: DmrEvent::FBack, new_link: true }],
            (SignalKind::Fna, _) => {
                let with_fbu = e.tag == Tag::CarriesFbu;
                let collision = with_fbu && w.collision_left && w.nar == NarFsm::Idle;
                if collision {
                    w.collision_left = false;
                }
                vec![Msg::ToNar(NarEvent::Fna { with_fbu, collision })]
            }
            (SignalKind::Rs, _) => vec![Msg::ToNar(NarEvent::Rs), Msg::RsAnswer],
            (SignalKind::Naack, _) => vec![Msg::ToDmr { ev: DmrEvent::Naack, new_link: true }],
            (SignalKind::Lbu, Peer::AnchorMap) if m => vec![Msg::ToNewMap(NewMapEvent::Lbu)],
            (SignalKind::Lbu, Peer::AnchorMap) => vec![Msg::ToOldMap(MapEvent::Lbu { relayed: false })],
            (SignalKind::Lbu, Peer::OldMap) => vec![Msg::ToOldMap(MapEvent::Lbu { relayed: true })],
            (SignalKind::LbAck, _) => vec![Msg::ToDmr { ev: DmrEvent::LbAck { macro_: m }, new_link: true }],
            (SignalKind::Bu, Peer::Ha) => {
                seen.insert(SignalKind::Ba);
                vec![Msg::ToDmr { ev: DmrEvent::Ba, new_link: true }]
            }
            (SignalKind::HoTI, _) => {
                seen.extend([SignalKind::HoT, SignalKind::Npt]);
                w.rr.step(RrEvent::Start);
                vec![Msg::Rr(RrEvent::HoT(1)), Msg::Rr(RrEvent::Npt(3))]
            }
            (SignalKind::CoTI, _) => {
                seen.insert(SignalKind::CoT);
                vec![Msg::Rr(RrEvent::CoT(2))]
            }
            (SignalKind::Bu, Peer::Cn) => {
                seen.insert(SignalKind::Ba);
                vec![Msg::ToDmr { ev: DmrEvent::CnBa, new_link: true }]
            }
            other => panic!("unrouted emit {other:?}"),
        };
        w.pending.extend(msgs);
    }
    w.pending.sort();
}

fn deliverable(w: &World, m: &Msg) -> bool {
    match m {
        Msg::ToDmr { new_link: false, .. } => w.link == Link::Old,
        // Sent on-link by the NAR itself, not through the NLCoA buffer.
        Msg::ToDmr { ev: DmrEvent::Naack, .. } | Msg::RsAnswer => w.link == Link::New,
        Msg::ToDmr { new_link: true, .. } | Msg::Rr(_) => {
            w.link == Link::New && matches!(w.nar, NarFsm::Idle | NarFsm::Flushed)
        }
        _ => true,
    }
}

fn dmr(w: &mut World, sc: Scenario, ev: DmrEvent, seen: &mut BTreeSet<SignalKind>) {
    let s = dmr_step(w.dmr, ev);
    let FsmState::Dmr(n) = s.next else { unreachable!() };
    w.dmr = n;
    if s.effects.contains(&Effect::ConfigureNcoa) && ev == DmrEvent::PrRtAdv {
        w.pending.push(Msg::ToDmr { ev: DmrEvent::NcoaReady, new_link: false });
    }
    route(w, sc, false, &s.effects, seen);
}

fn successors(w: &World, sc: Scenario, seen: &mut BTreeSet<SignalKind>) -> Vec<World> {
    let mut out = Vec::new();
    if w.trigger_pending {
        let mut n = w.clone();
        n.trigger_pending = false;
        dmr(&mut n, sc, DmrEvent::L2Trigger, seen);
        out.push(n);
    } else if w.link == Link::Old {
        let mut n = w.clone();
        n.link = Link::Down;
        n.pending.retain(|m| !matches!(m, Msg::ToDmr { new_link: false, .. }));
        dmr(&mut n, sc, DmrEvent::L2LinkDown, seen);
        out.push(n);
    }
    if w.link == Link::Down {
        let mut n = w.clone();
        n.link = Link::New;
        dmr(&mut n, sc, DmrEvent::L2Up { ncoa_valid: true }, seen);
        out.push(n);
    }
    let mut tried = HashSet::new();
    for (i, m) in w.pending.iter().enumerate() {
        if !tried.insert(*m) || !deliverable(w, m) {
            continue;
        }
        let mut n = w.clone();
        n.pending.remove(i);
        match *m {
            Msg::ToDmr { ev, .. } => dmr(&mut n, sc, ev, seen),
            Msg::ToOar => {
                let s = fsm_step(FsmState::Oar, FsmEvent::OarRtSolPr);
                route(&mut n, sc, false, &s.effects, seen);
            }
            Msg::ToOldMap(e) => {
                let s = map_step(n.old_map, e);
                let FsmState::Map(x) = s.next else { unreachable!() };
                n.old_map = x;
                route(&mut n, sc, false, &s.effects, seen);
            }
            Msg::ToNar(e) => {
                let s = nar_step(n.nar, e);
                let FsmState::Nar(x) = s.next else { unreachable!() };
                n.nar = x;
                route(&mut n, sc, true, &s.effects, seen);
            }
            Msg::ToNewMap(e) => {
                let s = new_map_step(n.new_map, e);
                let FsmState::NewMap(x) = s.next else { unreachable!() };
                n.new_map = x;
                route(&mut n, sc, false, &s.effects, seen);
            }
            Msg::Rr(e) => {
                let out = n.rr.step(e);
                if let Some(RrOutput::Ready(_)) = out {
                    dmr(&mut n, sc, DmrEvent::RrReady, seen);
                }
            }
            Msg::RsAnswer => {
                seen.insert(SignalKind::Ra);
                dmr(&mut n, sc, DmrEvent::Ra, seen);
            }
        }
        n.pending.sort();
        out.push(n);
    }
    out
}

fn explore(sc: Scenario, seen: &mut BTreeSet<SignalKind>, report: &mut Exploration) {
    let start = World {
        dmr: DmrFsm::Idle,
        old_map: MapFsm::Idle,
        nar: NarFsm::Idle,
        new_map: NewMapFsm::Idle,
        rr: RrExchange::new(0),
        link: Link::Old,
        trigger_pending: sc.predictive,
        collision_left: sc.collision,
        pending: Vec::new(),
    };
    let mut visited = HashSet::from([start.clone()]);
    let mut q = VecDeque::from([start]);
    while let Some(w) = q.pop_front() {
        let next = successors(&w, sc, seen);
        if next.is_empty() {
            if w.dmr != DmrFsm::Complete {
                report.stuck.push(format!("{sc:?}: {w:?}"));
            }
            report.terminals += 1;
        }
        for n in next {
            if visited.insert(n.clone()) {
                q.push_back(n);
            }
        }
        if visited.len() > 2_000_000 {
            report.stuck.push(format!("{sc:?}: state space blew up"));
            break;
        }
    }
    report.states += visited.len();
}

/// Micro and macro, predictive and reactive, with and without an address
/// collision at the NAR.
pub fn explore_all() -> Exploration {
    let mut report = Exploration::default();
    let mut seen = BTreeSet::new();
    for macro_ in [false, true] {
        for predictive in [true, false] {
            for collision in [false, true] {
                explore(Scenario { macro_, predictive, collision }, &mut seen, &mut report);
            }
        }
    }
    report.signals = seen;
    report
}
