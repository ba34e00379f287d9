//! Hierarchical addresses, packets, extension headers and tunnelling.
//!
//! Extension headers are plain optional fields; nothing is serialized to
//! bytes. Each encapsulation level adds a fixed 40-byte outer header.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffserv::Dscp;
use crate::sim::SimTime;

/// Outer IPv6 header added by one level of tunnelling.
pub const TUNNEL_OVERHEAD_BYTES: u32 = 40;
/// Size of every signalling packet.
pub const SIGNAL_SIZE_BYTES: u32 = 64;
pub const DEFAULT_MAX_DEPTH: usize = 4;

/// Three-level hierarchical address: domain, site, node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Address {
    pub domain: u32,
    pub site: u32,
    pub node: u32,
}

impl Address {
    pub const fn new(domain: u32, site: u32, node: u32) -> Self {
        Self { domain, site, node }
    }

    pub const fn prefix(self) -> Prefix {
        Prefix {
            domain: self.domain,
            site: self.site,
        }
    }

    pub fn in_prefix(self, p: Prefix) -> bool {
        p.contains(self)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.domain, self.site, self.node)
    }
}

/// Domain + site; the node component is wildcarded.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Prefix {
    pub domain: u32,
    pub site: u32,
}

impl Prefix {
    pub const fn new(domain: u32, site: u32) -> Self {
        Self { domain, site }
    }

    pub fn contains(self, a: Address) -> bool {
        a.domain == self.domain && a.site == self.site
    }

    pub const fn with_node(self, node: u32) -> Address {
        Address::new(self.domain, self.site, node)
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.*", self.domain, self.site)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalKind {
    RtSolPr,
    PrRtAdv,
    Fbu,
    FBack,
    Hi,
    HAck,
    Fna,
    Rs,
    Ra,
    Ns,
    Na,
    Lbu,
    LbAck,
    Bu,
    Ba,
    HoTI,
    HoT,
    CoTI,
    CoT,
    Npt,
    Naack,
}

impl SignalKind {
    pub const ALL: [SignalKind; 21] = [
        SignalKind::RtSolPr,
        SignalKind::PrRtAdv,
        SignalKind::Fbu,
        SignalKind::FBack,
        SignalKind::Hi,
        SignalKind::HAck,
        SignalKind::Fna,
        SignalKind::Rs,
        SignalKind::Ra,
        SignalKind::Ns,
        SignalKind::Na,
        SignalKind::Lbu,
        SignalKind::LbAck,
        SignalKind::Bu,
        SignalKind::Ba,
        SignalKind::HoTI,
        SignalKind::HoT,
        SignalKind::CoTI,
        SignalKind::CoT,
        SignalKind::Npt,
        SignalKind::Naack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignalKind::RtSolPr => "RtSolPr",
            SignalKind::PrRtAdv => "PrRtAdv",
            SignalKind::Fbu => "FBU",
            SignalKind::FBack => "FBack",
            SignalKind::Hi => "HI",
            SignalKind::HAck => "HAck",
            SignalKind::Fna => "FNA",
            SignalKind::Rs => "RS",
            SignalKind::Ra => "RA",
            SignalKind::Ns => "NS",
            SignalKind::Na => "NA",
            SignalKind::Lbu => "LBU",
            SignalKind::LbAck => "LBAck",
            SignalKind::Bu => "BU",
            SignalKind::Ba => "BA",
            SignalKind::HoTI => "HoTI",
            SignalKind::HoT => "HoT",
            SignalKind::CoTI => "CoTI",
            SignalKind::CoT => "CoT",
            SignalKind::Npt => "NPT",
            SignalKind::Naack => "NAACK",
        }
    }

    pub fn from_name(s: &str) -> Option<SignalKind> {
        SignalKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fast binding update contents, also carried inside an FNA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FbuInfo {
    pub rcoa: Address,
    pub plcoa: Address,
    pub nlcoa: Address,
    pub nrcoa: Option<Address>,
    pub nar: u32,
}

/// Return-routability tokens presented with a binding update to a CN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RrTokens {
    pub home: u64,
    pub careof: u64,
    pub prefix: u64,
}

/// Per-kind signalling payload. The packet kind is derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalBody {
    RtSolPr { target_ar: u32 },
    PrRtAdv {
        nar: u32,
        nar_prefix: Prefix,
        /// New MAP address and its RCoA prefix, present for inter-domain moves.
        new_map: Option<(Address, Prefix)>,
        /// SLA rule-set identifier of the new domain; informational only.
        qos_profile: u32,
    },
    Fbu(FbuInfo),
    FBack { nlcoa: Address },
    Hi {
        fbu: FbuInfo,
        old_map: Address,
    },
    HAck {
        nlcoa: Address,
        nrcoa: Option<Address>,
        from_new_map: bool,
    },
    Fna {
        nlcoa: Address,
        fbu: Option<FbuInfo>,
    },
    Rs,
    Ra {
        prefix: Prefix,
        map: Option<(Address, Prefix)>,
    },
    Ns { target: Address },
    Na { target: Address },
    Naack { rejected: Address, alternative: Address },
    Lbu {
        rcoa: Address,
        lcoa: Address,
        mnp: Prefix,
        lifetime: SimTime,
        /// Set when a new MAP relays the update to the previous MAP.
        relayed: bool,
    },
    LbAck { rcoa: Address, lcoa: Address },
    Bu {
        hoa: Address,
        coa: Address,
        mnps: Vec<Prefix>,
        lifetime: SimTime,
        tokens: Option<RrTokens>,
    },
    Ba {
        hoa: Address,
        coa: Address,
        accepted: bool,
    },
    HoTI { hoa: Address, mnps: Vec<Prefix>, cookie: u64 },
    CoTI { coa: Address, cookie: u64 },
    HoT { hoa: Address, cookie: u64, token: u64 },
    CoT { coa: Address, cookie: u64, token: u64 },
    Npt { mnps: Vec<Prefix>, token: u64 },
}

impl SignalBody {
    pub fn kind(&self) -> SignalKind {
        match self {
            SignalBody::RtSolPr { .. } => SignalKind::RtSolPr,
            SignalBody::PrRtAdv { .. } => SignalKind::PrRtAdv,
            SignalBody::Fbu(_) => SignalKind::Fbu,
            SignalBody::FBack { .. } => SignalKind::FBack,
            SignalBody::Hi { .. } => SignalKind::Hi,
            SignalBody::HAck { .. } => SignalKind::HAck,
            SignalBody::Fna { .. } => SignalKind::Fna,
            SignalBody::Rs => SignalKind::Rs,
            SignalBody::Ra { .. } => SignalKind::Ra,
            SignalBody::Ns { .. } => SignalKind::Ns,
            SignalBody::Na { .. } => SignalKind::Na,
            SignalBody::Naack { .. } => SignalKind::Naack,
            SignalBody::Lbu { .. } => SignalKind::Lbu,
            SignalBody::LbAck { .. } => SignalKind::LbAck,
            SignalBody::Bu { .. } => SignalKind::Bu,
            SignalBody::Ba { .. } => SignalKind::Ba,
            SignalBody::HoTI { .. } => SignalKind::HoTI,
            SignalBody::CoTI { .. } => SignalKind::CoTI,
            SignalBody::HoT { .. } => SignalKind::HoT,
            SignalBody::CoT { .. } => SignalKind::CoT,
            SignalBody::Npt { .. } => SignalKind::Npt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    Data,
    Signal(SignalKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    /// Unique per originated packet; outer headers reuse the inner uid.
    pub uid: u64,
    pub flow: u32,
    pub seq: u64,
    pub src: Address,
    pub dst: Address,
    pub dscp: Dscp,
    pub size_bytes: u32,
    pub kind: PacketKind,
    pub body: Option<Box<SignalBody>>,
    pub rh2_home_addr: Option<Address>,
    pub home_addr_option: Option<Address>,
    pub inner: Option<Box<Packet>>,
    pub created_at: SimTime,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("encapsulation depth {depth} would exceed the limit of {max}")]
    DepthExceeded { depth: usize, max: usize },
    #[error("packet is not tunnelled")]
    NotTunneled,
    #[error("packet carries no type 2 routing header")]
    MissingRoutingHeader,
    #[error("packet carries no home address option")]
    MissingHomeAddressOption,
}

impl Packet {
    pub fn data(
        uid: u64,
        flow: u32,
        seq: u64,
        src: Address,
        dst: Address,
        size_bytes: u32,
        created_at: SimTime,
    ) -> Self {
        Self {
            uid,
            flow,
            seq,
            src,
            dst,
            dscp: Dscp::BE,
            size_bytes,
            kind: PacketKind::Data,
            body: None,
            rh2_home_addr: None,
            home_addr_option: None,
            inner: None,
            created_at,
        }
    }

    pub fn signal(uid: u64, src: Address, dst: Address, body: SignalBody, now: SimTime) -> Self {
        Self {
            uid,
            flow: 0,
            seq: 0,
            src,
            dst,
            dscp: Dscp::BE,
            size_bytes: SIGNAL_SIZE_BYTES,
            kind: PacketKind::Signal(body.kind()),
            body: Some(Box::new(body)),
            rh2_home_addr: None,
            home_addr_option: None,
            inner: None,
            created_at: now,
        }
    }

    pub fn is_data(&self) -> bool {
        matches!(self.kind, PacketKind::Data)
    }

    pub fn signal_kind(&self) -> Option<SignalKind> {
        match self.kind {
            PacketKind::Signal(k) => Some(k),
            PacketKind::Data => None,
        }
    }

    /// Number of outer headers wrapped around the original packet.
    pub fn depth(&self) -> usize {
        let mut d = 0;
        let mut p = self;
        while let Some(inner) = &p.inner {
            d += 1;
            p = inner;
        }
        d
    }

    pub fn innermost(&self) -> &Packet {
        let mut p = self;
        while let Some(inner) = &p.inner {
            p = inner;
        }
        p
    }

    /// `seq/src→dst/dscp/depth`, as printed in traces.
    pub fn render(&self) -> String {
        let inner = self.innermost();
        let label = match inner.kind {
            PacketKind::Data => format!("{}", inner.seq),
            PacketKind::Signal(k) => k.name().to_string(),
        };
        format!(
            "{}/{}\u{2192}{}/{}/{}",
            label,
            self.src,
            self.dst,
            self.dscp.0,
            self.depth()
        )
    }
}

/// Wraps `pkt` in an outer header from `tun_src` to `tun_dst`.
pub fn encapsulate(
    pkt: Packet,
    tun_src: Address,
    tun_dst: Address,
    dscp: Dscp,
    max_depth: usize,
) -> Result<Packet, PacketError> {
    let depth = pkt.depth() + 1;
    if depth > max_depth {
        return Err(PacketError::DepthExceeded {
            depth,
            max: max_depth,
        });
    }
    Ok(Packet {
        uid: pkt.uid,
        flow: pkt.flow,
        seq: pkt.seq,
        src: tun_src,
        dst: tun_dst,
        dscp,
        size_bytes: pkt.size_bytes + TUNNEL_OVERHEAD_BYTES,
        kind: pkt.kind,
        body: None,
        rh2_home_addr: None,
        home_addr_option: None,
        created_at: pkt.created_at,
        inner: Some(Box::new(pkt)),
    })
}

pub fn decapsulate(pkt: Packet) -> Result<Packet, PacketError> {
    pkt.inner.map(|b| *b).ok_or(PacketError::NotTunneled)
}

/// Processes a type 2 routing header: the destination becomes the home
/// address it carries.
pub fn apply_type2_routing(mut pkt: Packet) -> Result<Packet, PacketError> {
    let hoa = pkt
        .rh2_home_addr
        .take()
        .ok_or(PacketError::MissingRoutingHeader)?;
    pkt.dst = hoa;
    Ok(pkt)
}

/// Processes a home address destination option: the source becomes the
/// home address it carries.
pub fn apply_home_address_option(mut pkt: Packet) -> Result<Packet, PacketError> {
    let hoa = pkt
        .home_addr_option
        .take()
        .ok_or(PacketError::MissingHomeAddressOption)?;
    pkt.src = hoa;
    Ok(pkt)
}
