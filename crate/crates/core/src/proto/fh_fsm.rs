//! Pure transition functions for the fast hierarchical handover.
//!
//! Each role has a small state enum and an event enum. [`fsm_step`] maps a
//! `(state, event)` pair to the next state and a list of [`Effect`]s; it
//! has no access to packets or time, so the machines can be enumerated
//! exhaustively.

use crate::diffserv::Dscp;
use crate::packet::SignalKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DmrFsm {
    Idle,
    SentRtSolPr,
    ConfiguredNCoA,
    SentFbu,
    GotFBack,
    /// Link lost. `ncoa_known`: a new address was prepared; `fback`: the
    /// fast binding was acknowledged before the link went away.
    L2Switching { ncoa_known: bool, fback: bool },
    SentFna { awaiting_fback: bool },
    /// Attached without a prepared address; RS sent.
    ReactiveAttach,
    /// New MAP acknowledged the local binding; home BU sent.
    LocalRegistered,
    ReturnRoutability,
    CnBinding,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DmrEvent {
    L2Trigger,
    PrRtAdv,
    /// Internal: prospective addresses are configured.
    NcoaReady,
    FBack,
    L2LinkDown,
    /// Link up on the new cell; `ncoa_valid` is false if it is not the
    /// router the prepared address belongs to.
    L2Up { ncoa_valid: bool },
    Ra,
    Naack,
    LbAck { macro_: bool },
    Ba,
    RrReady,
    RrFailed,
    CnBa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapFsm {
    Idle,
    SentHi { macro_: bool },
    /// One of the two acknowledgments of a macro handover received.
    GotHAck { waiting_new_map: bool },
    Forwarding,
    Cleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapEvent {
    Fbu { reactive: bool, macro_: bool },
    HAck { from_new_map: bool },
    Lbu { relayed: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NarFsm {
    Idle,
    DadRunning,
    TunnelUpBuffering,
    Flushed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NarEvent {
    Hi { macro_: bool },
    DadDone,
    Fna { with_fbu: bool, collision: bool },
    Rs,
    HAckFromNewMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NewMapFsm {
    Idle,
    RcoaDad { hi: bool, lbu: bool },
    HAckSent,
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NewMapEvent {
    Hi,
    DadDone,
    Lbu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FsmState {
    Dmr(DmrFsm),
    Map(MapFsm),
    /// The previous access router answers proxy solicitations and keeps no state.
    Oar,
    Nar(NarFsm),
    NewMap(NewMapFsm),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FsmEvent {
    Dmr(DmrEvent),
    Map(MapEvent),
    OarRtSolPr,
    Nar(NarEvent),
    NewMap(NewMapEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    Oar,
    Nar,
    OldMap,
    NewMap,
    /// The MAP that serves the new binding: the old one for a micro
    /// handover, the new one for a macro handover.
    AnchorMap,
    Dmr,
    /// Both the previous and the new care-of address.
    DmrBoth,
    Ha,
    Cn,
    /// Reverse-tunnelled through the home agent.
    CnViaHa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Plain,
    /// FNA that carries an FBU.
    CarriesFbu,
    /// LBU forwarded by the new MAP to the old one.
    Relayed,
    /// HAck from the new MAP.
    FromNewMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Emit {
    pub kind: SignalKind,
    pub to: Peer,
    pub dscp: Dscp,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Effect {
    Send(Emit),
    /// DMR: derive NLCoA (and NRCoA) from the advertisement.
    ConfigureNcoa,
    /// DMR: take the alternative address from NAACK.
    AdoptAlternative,
    /// NAR or new MAP: start duplicate address detection.
    StartDad,
    /// NAR: release buffered packets to the DMR.
    Flush,
    /// MAP: tunnel RCoA traffic to the NLCoA through the NAR.
    StartForwarding,
    /// MAP: drop the NAR tunnel; route to the new binding directly.
    StopForwarding,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Transition,
    /// Repeated input absorbed by idempotence.
    Duplicate,
    /// Input not valid in this state; ignored and counted.
    Unexpected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub next: FsmState,
    pub effects: Vec<Effect>,
    pub kind: StepKind,
}

fn send(kind: SignalKind, to: Peer) -> Effect {
    Effect::Send(Emit {
        kind,
        to,
        dscp: Dscp::EF,
        tag: Tag::Plain,
    })
}

fn send_tagged(kind: SignalKind, to: Peer, tag: Tag) -> Effect {
    Effect::Send(Emit {
        kind,
        to,
        dscp: Dscp::EF,
        tag,
    })
}

fn go(next: FsmState, effects: Vec<Effect>) -> Step {
    Step {
        next,
        effects,
        kind: StepKind::Transition,
    }
}

fn same(state: FsmState, kind: StepKind) -> Step {
    Step {
        next: state,
        effects: Vec::new(),
        kind,
    }
}

pub fn fsm_step(state: FsmState, event: FsmEvent) -> Step {
    match (state, event) {
        (FsmState::Dmr(s), FsmEvent::Dmr(e)) => dmr_step(s, e),
        (FsmState::Map(s), FsmEvent::Map(e)) => map_step(s, e),
        (FsmState::Oar, FsmEvent::OarRtSolPr) => go(FsmState::Oar, vec![send(SignalKind::PrRtAdv, Peer::Dmr)]),
        (FsmState::Nar(s), FsmEvent::Nar(e)) => nar_step(s, e),
        (FsmState::NewMap(s), FsmEvent::NewMap(e)) => new_map_step(s, e),
        _ => same(state, StepKind::Unexpected),
    }
}

pub(super) fn dmr_step(s: DmrFsm, e: DmrEvent) -> Step {
    use DmrEvent as E;
    use DmrFsm as S;
    let st = FsmState::Dmr;
    match (s, e) {
        (S::Idle | S::Complete, E::L2Trigger) => {
            go(st(S::SentRtSolPr), vec![send(SignalKind::RtSolPr, Peer::Oar)])
        }
        (S::SentRtSolPr, E::PrRtAdv) => go(st(S::ConfiguredNCoA), vec![Effect::ConfigureNcoa]),
        (S::ConfiguredNCoA, E::NcoaReady) => {
            go(st(S::SentFbu), vec![send(SignalKind::Fbu, Peer::OldMap)])
        }
        (S::SentFbu, E::FBack) => go(st(S::GotFBack), vec![]),

        // Link loss at any point of the preparation.
        (S::Idle | S::Complete | S::SentRtSolPr, E::L2LinkDown) => go(
            st(S::L2Switching {
                ncoa_known: false,
                fback: false,
            }),
            vec![],
        ),
        (S::ConfiguredNCoA | S::SentFbu, E::L2LinkDown) => go(
            st(S::L2Switching {
                ncoa_known: true,
                fback: false,
            }),
            vec![],
        ),
        (S::GotFBack, E::L2LinkDown) => go(
            st(S::L2Switching {
                ncoa_known: true,
                fback: true,
            }),
            vec![],
        ),
        // Losing the new link before finishing abandons this handover.
        (
            S::SentFna { .. }
            | S::ReactiveAttach
            | S::LocalRegistered
            | S::ReturnRoutability
            | S::CnBinding,
            E::L2LinkDown,
        ) => go(
            st(S::L2Switching {
                ncoa_known: false,
                fback: false,
            }),
            vec![],
        ),

        (S::L2Switching { ncoa_known, fback }, E::L2Up { ncoa_valid }) => {
            match (ncoa_known && ncoa_valid, fback) {
                (true, true) => go(
                    st(S::SentFna {
                        awaiting_fback: false,
                    }),
                    vec![
                        send(SignalKind::Fna, Peer::Nar),
                        send(SignalKind::Lbu, Peer::AnchorMap),
                    ],
                ),
                (true, false) => go(
                    st(S::SentFna {
                        awaiting_fback: true,
                    }),
                    vec![send_tagged(SignalKind::Fna, Peer::Nar, Tag::CarriesFbu)],
                ),
                (false, _) => go(st(S::ReactiveAttach), vec![send(SignalKind::Rs, Peer::Nar)]),
            }
        }
        (S::ReactiveAttach, E::Ra) => go(
            st(S::SentFna {
                awaiting_fback: true,
            }),
            vec![
                Effect::ConfigureNcoa,
                send_tagged(SignalKind::Fna, Peer::Nar, Tag::CarriesFbu),
            ],
        ),
        (S::SentFna { awaiting_fback: true }, E::FBack) => go(
            st(S::SentFna {
                awaiting_fback: false,
            }),
            vec![send(SignalKind::Lbu, Peer::AnchorMap)],
        ),
        (S::SentFna { awaiting_fback: true }, E::Naack) => go(
            st(S::SentFna {
                awaiting_fback: true,
            }),
            vec![
                Effect::AdoptAlternative,
                send_tagged(SignalKind::Fna, Peer::Nar, Tag::CarriesFbu),
            ],
        ),
        (S::SentFna { awaiting_fback: false }, E::LbAck { macro_: false }) => {
            go(st(S::Complete), vec![Effect::Done])
        }
        (S::SentFna { awaiting_fback: false }, E::LbAck { macro_: true }) => {
            go(st(S::LocalRegistered), vec![send(SignalKind::Bu, Peer::Ha)])
        }
        (S::LocalRegistered, E::Ba) => go(
            st(S::ReturnRoutability),
            vec![
                send(SignalKind::HoTI, Peer::CnViaHa),
                send(SignalKind::CoTI, Peer::Cn),
            ],
        ),
        (S::ReturnRoutability, E::RrReady) => {
            go(st(S::CnBinding), vec![send(SignalKind::Bu, Peer::Cn)])
        }
        (S::ReturnRoutability, E::RrFailed) => go(st(S::Complete), vec![Effect::Done]),
        (S::CnBinding, E::CnBa) => go(st(S::Complete), vec![Effect::Done]),

        // Acknowledgments that arrive twice (FBack goes to both addresses).
        (
            S::GotFBack
            | S::SentFna {
                awaiting_fback: false,
            }
            | S::LocalRegistered
            | S::ReturnRoutability
            | S::CnBinding
            | S::Complete,
            E::FBack,
        ) => same(st(s), StepKind::Duplicate),
        (S::Complete | S::LocalRegistered | S::ReturnRoutability | S::CnBinding, E::LbAck { .. }) => {
            same(st(s), StepKind::Duplicate)
        }
        (S::ReturnRoutability | S::CnBinding | S::Complete, E::Ba) => same(st(s), StepKind::Duplicate),
        _ => same(st(s), StepKind::Unexpected),
    }
}

pub(super) fn map_step(s: MapFsm, e: MapEvent) -> Step {
    use MapEvent as E;
    use MapFsm as S;
    let st = FsmState::Map;
    let start = || {
        vec![
            Effect::StartForwarding,
            send(SignalKind::FBack, Peer::DmrBoth),
        ]
    };
    match (s, e) {
        (S::Idle | S::Cleared, E::Fbu { reactive: false, macro_ }) => go(
            st(S::SentHi { macro_ }),
            vec![send(SignalKind::Hi, Peer::Nar)],
        ),
        (S::Idle | S::Cleared, E::Fbu { reactive: true, .. }) => go(
            st(S::Forwarding),
            vec![Effect::StartForwarding, send(SignalKind::FBack, Peer::Dmr)],
        ),
        (S::SentHi { macro_: false }, E::HAck { from_new_map: false }) => go(st(S::Forwarding), start()),
        (S::SentHi { macro_: true }, E::HAck { from_new_map }) => go(
            st(S::GotHAck {
                waiting_new_map: !from_new_map,
            }),
            vec![],
        ),
        (S::GotHAck { waiting_new_map }, E::HAck { from_new_map }) if waiting_new_map == from_new_map => {
            go(st(S::Forwarding), start())
        }
        (S::GotHAck { .. }, E::HAck { .. }) => same(st(s), StepKind::Duplicate),
        // The DMR moved before the acknowledgments came back; stop waiting.
        (S::SentHi { .. } | S::GotHAck { .. }, E::Fbu { reactive: true, .. }) => go(
            st(S::Forwarding),
            vec![Effect::StartForwarding, send(SignalKind::FBack, Peer::Dmr)],
        ),
        (S::SentHi { .. } | S::GotHAck { .. }, E::Fbu { .. }) => same(st(s), StepKind::Duplicate),
        (S::Forwarding, E::Fbu { .. }) => go(st(S::Forwarding), vec![send(SignalKind::FBack, Peer::Dmr)]),
        (S::Forwarding, E::HAck { .. }) => same(st(s), StepKind::Duplicate),
        (S::Forwarding, E::Lbu { relayed }) => {
            let mut fx = vec![Effect::StopForwarding];
            if !relayed {
                fx.push(send(SignalKind::LbAck, Peer::Dmr));
            }
            go(st(S::Cleared), fx)
        }
        (S::Idle | S::Cleared, E::Lbu { relayed: false }) => {
            go(st(s), vec![send(SignalKind::LbAck, Peer::Dmr)])
        }
        _ => same(st(s), StepKind::Unexpected),
    }
}

pub(super) fn nar_step(s: NarFsm, e: NarEvent) -> Step {
    use NarEvent as E;
    use NarFsm as S;
    let st = FsmState::Nar;
    let relay = |macro_: bool, fx: &mut Vec<Effect>| {
        if macro_ {
            fx.push(send(SignalKind::Hi, Peer::NewMap));
        }
    };
    match (s, e) {
        (S::Idle, E::Hi { macro_ }) => {
            let mut fx = vec![Effect::StartDad];
            relay(macro_, &mut fx);
            go(st(S::DadRunning), fx)
        }
        // The host already announced itself here; its address is in use by it.
        (S::Flushed, E::Hi { macro_ }) => {
            let mut fx = vec![send(SignalKind::HAck, Peer::OldMap)];
            relay(macro_, &mut fx);
            go(st(S::Flushed), fx)
        }
        (S::DadRunning | S::TunnelUpBuffering, E::Hi { .. }) => same(st(s), StepKind::Duplicate),
        (S::DadRunning, E::DadDone) => go(
            st(S::TunnelUpBuffering),
            vec![send(SignalKind::HAck, Peer::OldMap)],
        ),
        (S::Flushed, E::DadDone) => go(st(S::Flushed), vec![send(SignalKind::HAck, Peer::OldMap)]),
        (S::DadRunning | S::TunnelUpBuffering, E::Fna { with_fbu, .. }) => {
            let mut fx = vec![Effect::Flush];
            if with_fbu {
                fx.push(send(SignalKind::Fbu, Peer::OldMap));
            }
            go(st(S::Flushed), fx)
        }
        (S::DadRunning | S::TunnelUpBuffering, E::Rs) => go(st(S::Flushed), vec![Effect::Flush]),
        (S::Idle, E::Fna { with_fbu: true, collision: true }) => {
            go(st(S::Idle), vec![send(SignalKind::Naack, Peer::Dmr)])
        }
        (S::Idle, E::Fna { with_fbu: true, collision: false }) => {
            go(st(S::Flushed), vec![send(SignalKind::Fbu, Peer::OldMap)])
        }
        (S::Flushed, E::Fna { with_fbu: true, .. }) => {
            go(st(S::Flushed), vec![send(SignalKind::Fbu, Peer::OldMap)])
        }
        (S::Flushed, E::Fna { with_fbu: false, .. }) => same(st(s), StepKind::Duplicate),
        (S::Idle | S::Flushed, E::Rs) => same(st(s), StepKind::Duplicate),
        (_, E::HAckFromNewMap) => same(st(s), StepKind::Duplicate),
        _ => same(st(s), StepKind::Unexpected),
    }
}

pub(super) fn new_map_step(s: NewMapFsm, e: NewMapEvent) -> Step {
    use NewMapEvent as E;
    use NewMapFsm as S;
    let st = FsmState::NewMap;
    let hacks = || {
        vec![
            send_tagged(SignalKind::HAck, Peer::OldMap, Tag::FromNewMap),
            send_tagged(SignalKind::HAck, Peer::Nar, Tag::FromNewMap),
        ]
    };
    let bind = |relay: bool| {
        let mut fx = vec![send(SignalKind::LbAck, Peer::Dmr)];
        if relay {
            fx.push(send_tagged(SignalKind::Lbu, Peer::OldMap, Tag::Relayed));
        }
        fx
    };
    match (s, e) {
        (S::Idle, E::Hi) => go(st(S::RcoaDad { hi: true, lbu: false }), vec![Effect::StartDad]),
        (S::Idle, E::Lbu) => go(st(S::RcoaDad { hi: false, lbu: true }), vec![Effect::StartDad]),
        (S::RcoaDad { hi, lbu: false }, E::Lbu) => go(st(S::RcoaDad { hi, lbu: true }), vec![]),
        (S::RcoaDad { hi: true, lbu: false }, E::DadDone) => go(st(S::HAckSent), hacks()),
        (S::RcoaDad { hi, lbu: true }, E::DadDone) => {
            let mut fx = if hi { hacks() } else { Vec::new() };
            fx.extend(bind(hi));
            go(st(S::Bound), fx)
        }
        (S::HAckSent, E::Lbu) => go(st(S::Bound), bind(true)),
        (S::Bound, E::Lbu) => go(st(S::Bound), vec![send(SignalKind::LbAck, Peer::Dmr)]),
        (S::RcoaDad { .. } | S::HAckSent | S::Bound, E::Hi) => same(st(s), StepKind::Duplicate),
        (S::RcoaDad { lbu: true, .. }, E::Lbu) => same(st(s), StepKind::Duplicate),
        _ => same(st(s), StepKind::Unexpected),
    }
}

/// Every state of every role, for enumeration.
pub fn all_states() -> Vec<FsmState> {
    let mut v = Vec::new();
    for s in [
        DmrFsm::Idle,
        DmrFsm::SentRtSolPr,
        DmrFsm::ConfiguredNCoA,
        DmrFsm::SentFbu,
        DmrFsm::GotFBack,
        DmrFsm::SentFna { awaiting_fback: true },
        DmrFsm::SentFna { awaiting_fback: false },
        DmrFsm::ReactiveAttach,
        DmrFsm::LocalRegistered,
        DmrFsm::ReturnRoutability,
        DmrFsm::CnBinding,
        DmrFsm::Complete,
    ] {
        v.push(FsmState::Dmr(s));
    }
    for k in [false, true] {
        for f in [false, true] {
            v.push(FsmState::Dmr(DmrFsm::L2Switching { ncoa_known: k, fback: f }));
        }
    }
    v.extend(
        [
            MapFsm::Idle,
            MapFsm::SentHi { macro_: false },
            MapFsm::SentHi { macro_: true },
            MapFsm::GotHAck { waiting_new_map: false },
            MapFsm::GotHAck { waiting_new_map: true },
            MapFsm::Forwarding,
            MapFsm::Cleared,
        ]
        .map(FsmState::Map),
    );
    v.push(FsmState::Oar);
    v.extend(
        [
            NarFsm::Idle,
            NarFsm::DadRunning,
            NarFsm::TunnelUpBuffering,
            NarFsm::Flushed,
        ]
        .map(FsmState::Nar),
    );
    for (hi, lbu) in [(false, false), (false, true), (true, false), (true, true)] {
        v.push(FsmState::NewMap(NewMapFsm::RcoaDad { hi, lbu }));
    }
    v.extend([NewMapFsm::Idle, NewMapFsm::HAckSent, NewMapFsm::Bound].map(FsmState::NewMap));
    v
}

/// Every event of every role, for enumeration.
pub fn all_events() -> Vec<FsmEvent> {
    let mut v = Vec::new();
    let b = [false, true];
    for e in [
        DmrEvent::L2Trigger,
        DmrEvent::PrRtAdv,
        DmrEvent::NcoaReady,
        DmrEvent::FBack,
        DmrEvent::L2LinkDown,
        DmrEvent::Ra,
        DmrEvent::Naack,
        DmrEvent::Ba,
        DmrEvent::RrReady,
        DmrEvent::RrFailed,
        DmrEvent::CnBa,
    ] {
        v.push(FsmEvent::Dmr(e));
    }
    for x in b {
        v.push(FsmEvent::Dmr(DmrEvent::L2Up { ncoa_valid: x }));
        v.push(FsmEvent::Dmr(DmrEvent::LbAck { macro_: x }));
        v.push(FsmEvent::Map(MapEvent::HAck { from_new_map: x }));
        v.push(FsmEvent::Map(MapEvent::Lbu { relayed: x }));
        v.push(FsmEvent::Nar(NarEvent::Hi { macro_: x }));
        for y in b {
            v.push(FsmEvent::Map(MapEvent::Fbu { reactive: x, macro_: y }));
            v.push(FsmEvent::Nar(NarEvent::Fna { with_fbu: x, collision: y }));
        }
    }
    v.push(FsmEvent::OarRtSolPr);
    v.extend([NarEvent::DadDone, NarEvent::Rs, NarEvent::HAckFromNewMap].map(FsmEvent::Nar));
    v.extend([NewMapEvent::Hi, NewMapEvent::DadDone, NewMapEvent::Lbu].map(FsmEvent::NewMap));
    v
}
