//! Topology, link timing, wireless cells and mobile-router motion.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::packet::{Address, Prefix};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Cn,
    Er,
    Ha,
    Map,
    Ar,
    Bs,
    Dmr,
    Mnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub name: String,
    pub addr: Option<Address>,
}

/// One direction of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth_bps: u64,
    pub prop_delay: SimTime,
}

/// Serialization time, rounded up to the microsecond.
pub fn serialization_delay(size_bytes: u32, bandwidth_bps: u64) -> SimTime {
    let bits = u64::from(size_bytes) * 8 * 1_000_000;
    SimTime(bits.div_ceil(bandwidth_bps))
}

pub fn transmit(link: &Link, size_bytes: u32, depart: SimTime) -> SimTime {
    depart + serialization_delay(size_bytes, link.bandwidth_bps) + link.prop_delay
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pos {
    pub x: f64,
    pub y: f64,
}

impl Pos {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Pos) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirelessCell {
    pub bs: NodeId,
    pub center: Pos,
    pub radius: f64,
    pub air_rate_bps: u64,
    pub air_delay: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityTrack {
    pub waypoints: Vec<Pos>,
    /// Meters per second.
    pub speed: f64,
    pub start_time: SimTime,
}

impl MobilityTrack {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Position after travelling `s` meters along the path, clamped.
    pub fn point_at_distance(&self, mut s: f64) -> Pos {
        for w in self.waypoints.windows(2) {
            let len = w[0].dist(w[1]);
            if s <= len && len > 0.0 {
                let f = s / len;
                return Pos::new(w[0].x + f * (w[1].x - w[0].x), w[0].y + f * (w[1].y - w[0].y));
            }
            s -= len;
        }
        *self.waypoints.last().expect("track has at least one waypoint")
    }

    /// Time at which the track reaches arc length `s`. `None` if never.
    pub fn time_at_distance(&self, s: f64) -> Option<SimTime> {
        if s <= 0.0 {
            return Some(self.start_time);
        }
        if self.speed <= 0.0 {
            return None;
        }
        Some(self.start_time + SimTime::from_secs_f64(s / self.speed))
    }
}

pub fn position_at(track: &MobilityTrack, t: SimTime) -> Pos {
    if t <= track.start_time {
        return track.waypoints[0];
    }
    let travelled = track.speed * (t - track.start_time).as_secs_f64();
    track.point_at_distance(travelled)
}

/// Nearest in-range cell; equal distances go to the lower NodeId.
pub fn strongest_bs<'a, I>(pos: Pos, cells: I) -> Option<NodeId>
where
    I: IntoIterator<Item = &'a WirelessCell>,
{
    cells
        .into_iter()
        .map(|c| (pos.dist(c.center), c))
        .filter(|(d, c)| *d <= c.radius)
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then(a.bs.cmp(&b.bs)))
        .map(|(_, c)| c.bs)
}

/// Arc-length intervals `[enter, exit]` over which the track is inside `cell`.
pub fn coverage_intervals(track: &MobilityTrack, cell: &WirelessCell) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    if track.waypoints.len() == 1 {
        if track.waypoints[0].dist(cell.center) <= cell.radius {
            out.push((0.0, f64::INFINITY));
        }
        return out;
    }
    let mut base = 0.0;
    for w in track.waypoints.windows(2) {
        let (p, q) = (w[0], w[1]);
        let len = p.dist(q);
        if len > 0.0 {
            let (ux, uy) = ((q.x - p.x) / len, (q.y - p.y) / len);
            let (fx, fy) = (p.x - cell.center.x, p.y - cell.center.y);
            // |f + s·u|² = r²  →  s² + 2(f·u)s + |f|² − r² = 0
            let b = fx * ux + fy * uy;
            let c = fx * fx + fy * fy - cell.radius * cell.radius;
            let disc = b * b - c;
            if disc >= 0.0 {
                let root = disc.sqrt();
                let (s0, s1) = ((-b - root).max(0.0), (-b + root).min(len));
                if s0 <= s1 {
                    let iv = (base + s0, base + s1);
                    match out.last_mut() {
                        Some(last) if (iv.0 - last.1).abs() < 1e-9 => last.1 = iv.1,
                        _ => out.push(iv),
                    }
                }
            }
        }
        base += len;
    }
    // Ending inside the last cell means staying there forever.
    let total = base;
    if let Some(last) = out.last_mut() {
        if (last.1 - total).abs() < 1e-9 {
            last.1 = f64::INFINITY;
        }
    }
    out
}

/// One loss of link and where the mobile router goes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2Handover {
    pub index: usize,
    pub old_bs: NodeId,
    pub exit_at: SimTime,
    /// New BS and the time it is first usable (exit time if already in range,
    /// otherwise the next cell entry).
    pub next: Option<(NodeId, SimTime)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct L2Schedule {
    pub initial: Option<(NodeId, SimTime)>,
    pub handovers: Vec<L2Handover>,
}

/// Attachment plan for the whole track: stay on a cell until leaving it,
/// then move to the strongest cell at the exit point.
pub fn l2_schedule(track: &MobilityTrack, cells: &[WirelessCell], horizon: SimTime) -> L2Schedule {
    let ivs: Vec<Vec<(f64, f64)>> = cells.iter().map(|c| coverage_intervals(track, c)).collect();
    let mut sched = L2Schedule::default();

    // Earliest cell entry; ties by strength at that point.
    let first = ivs.iter().flatten().map(|iv| iv.0).fold(f64::INFINITY, f64::min);
    if !first.is_finite() {
        return sched;
    }
    let pick_at = |s: f64, exclude: Option<usize>| -> Option<usize> {
        let pos = track.point_at_distance(s);
        let eligible: Vec<&WirelessCell> = cells
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .filter(|(i, _)| ivs[*i].iter().any(|iv| iv.0 <= s + 1e-9 && s < iv.1))
            .map(|(_, c)| c)
            .collect();
        strongest_bs(pos, eligible.iter().copied())
            .or_else(|| {
                eligible
                    .iter()
                    .min_by(|a, b| pos.dist(a.center).total_cmp(&pos.dist(b.center)))
                    .map(|c| c.bs)
            })
            .and_then(|bs| cells.iter().position(|c| c.bs == bs))
    };

    let Some(mut cur) = pick_at(first, None) else {
        return sched;
    };
    let Some(t0) = track.time_at_distance(first) else {
        return sched;
    };
    if t0 > horizon {
        return sched;
    }
    sched.initial = Some((cells[cur].bs, t0));
    let mut s = first;
    loop {
        let Some(&(_, exit)) = ivs[cur].iter().find(|iv| iv.0 <= s + 1e-9 && s < iv.1) else {
            break;
        };
        if !exit.is_finite() {
            break;
        }
        let Some(exit_at) = track.time_at_distance(exit) else {
            break;
        };
        if exit_at > horizon {
            break;
        }
        let index = sched.handovers.len();
        let (next, next_s) = match pick_at(exit, Some(cur)) {
            Some(n) => (Some(n), exit),
            None => {
                // Out of coverage; wait for the next entry anywhere.
                let entry = ivs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, v)| v.iter().map(move |iv| (iv.0, i)))
                    .filter(|(e, _)| *e > exit + 1e-9)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                match entry {
                    Some((e, _)) => (pick_at(e, None), e),
                    None => (None, exit),
                }
            }
        };
        let next_info = next.and_then(|n| {
            track
                .time_at_distance(next_s)
                .filter(|t| *t <= horizon)
                .map(|t| (cells[n].bs, t))
        });
        sched.handovers.push(L2Handover {
            index,
            old_bs: cells[cur].bs,
            exit_at,
            next: next_info,
        });
        match (next, next_info) {
            (Some(n), Some(_)) => {
                cur = n;
                s = next_s;
            }
            _ => break,
        }
    }
    sched
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub bandwidth_bps: u64,
    pub delay_ms: f64,
}

impl LinkParams {
    pub const fn new(bandwidth_bps: u64, delay_ms: f64) -> Self {
        Self {
            bandwidth_bps,
            delay_ms,
        }
    }

    pub fn delay(&self) -> SimTime {
        SimTime::from_secs_f64(self.delay_ms / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyParams {
    pub cn_er: LinkParams,
    pub ha_er: LinkParams,
    pub er_map: LinkParams,
    pub map_ar: LinkParams,
    pub ar_bs: LinkParams,
    pub air: LinkParams,
    pub dmr_mnn: LinkParams,
    pub cell_radius_m: f64,
    /// Centers of BS1..BS4.
    pub cell_centers: Vec<Pos>,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            cn_er: LinkParams::new(100_000_000, 2.0),
            ha_er: LinkParams::new(100_000_000, 2.0),
            er_map: LinkParams::new(100_000_000, 20.0),
            map_ar: LinkParams::new(10_000_000, 5.0),
            ar_bs: LinkParams::new(1_000_000, 2.0),
            air: LinkParams::new(2_000_000, 1.0),
            dmr_mnn: LinkParams::new(100_000_000, 1.0),
            cell_radius_m: 50.0,
            cell_centers: vec![
                Pos::new(200.0, 800.0),
                Pos::new(290.0, 800.0),
                Pos::new(380.0, 800.0),
                Pos::new(470.0, 800.0),
            ],
        }
    }
}

pub const CN_ADDR: Address = Address::new(0, 0, 0);
pub const ER_ADDR: Address = Address::new(0, 9, 1);
pub const HA_ADDR: Address = Address::new(1, 0, 1);
pub const DMR_HOA: Address = Address::new(1, 0, 2);
pub const MNP: Prefix = Prefix::new(1, 1);
pub const MNN_HOA: Address = Address::new(1, 1, 1);
/// Interface identifier the mobile router uses in every foreign prefix.
pub const DMR_IID: u32 = 100;

/// The fixed simulation topology with per-role lookups and routing.
#[derive(Debug, Clone)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub cells: Vec<WirelessCell>,
    pub cn: NodeId,
    pub er: NodeId,
    pub ha: NodeId,
    pub maps: Vec<NodeId>,
    pub ars: Vec<NodeId>,
    pub bss: Vec<NodeId>,
    pub dmr: NodeId,
    pub mnn: NodeId,
    link_index: HashMap<(NodeId, NodeId), usize>,
    next_hop: Vec<Vec<Option<NodeId>>>,
    addr_owner: BTreeMap<Address, NodeId>,
    prefix_owner: BTreeMap<Prefix, NodeId>,
    ar_map: HashMap<NodeId, NodeId>,
    ar_bs: HashMap<NodeId, NodeId>,
    bs_ar: HashMap<NodeId, NodeId>,
    ar_prefix: HashMap<NodeId, Prefix>,
    map_domain: HashMap<NodeId, u32>,
}

impl Topology {
    pub fn build(p: &TopologyParams) -> Topology {
        let mut nodes = Vec::new();
        let mut add = |role: Role, name: &str, addr: Option<Address>| {
            let id = NodeId(nodes.len() as u32);
            nodes.push(Node {
                id,
                role,
                name: name.to_string(),
                addr,
            });
            id
        };
        let cn = add(Role::Cn, "CN", Some(CN_ADDR));
        let er = add(Role::Er, "ER", Some(ER_ADDR));
        let ha = add(Role::Ha, "HA", Some(HA_ADDR));
        let maps = vec![
            add(Role::Map, "MAP1", Some(Address::new(2, 0, 1))),
            add(Role::Map, "MAP2", Some(Address::new(3, 0, 1))),
        ];
        let ar_sites = [(2, 1), (2, 2), (3, 1), (3, 2)];
        let ars: Vec<NodeId> = ar_sites
            .iter()
            .enumerate()
            .map(|(i, &(d, s))| add(Role::Ar, &format!("AR{}", i + 1), Some(Address::new(d, s, 1))))
            .collect();
        let n_cells = p.cell_centers.len().min(ars.len());
        let bss: Vec<NodeId> = (0..n_cells)
            .map(|i| add(Role::Bs, &format!("BS{}", i + 1), None))
            .collect();
        let dmr = add(Role::Dmr, "DMR", Some(DMR_HOA));
        let mnn = add(Role::Mnn, "MNN", Some(MNN_HOA));

        let mut links = Vec::new();
        let mut duplex = |a: NodeId, b: NodeId, lp: LinkParams| {
            for (from, to) in [(a, b), (b, a)] {
                links.push(Link {
                    from,
                    to,
                    bandwidth_bps: lp.bandwidth_bps,
                    prop_delay: lp.delay(),
                });
            }
        };
        duplex(cn, er, p.cn_er);
        duplex(ha, er, p.ha_er);
        for &m in &maps {
            duplex(er, m, p.er_map);
        }
        for (i, &ar) in ars.iter().enumerate() {
            duplex(maps[i / 2], ar, p.map_ar);
        }
        for (i, &bs) in bss.iter().enumerate() {
            duplex(ars[i], bs, p.ar_bs);
            duplex(bs, dmr, p.air);
        }
        duplex(dmr, mnn, p.dmr_mnn);

        let cells = bss
            .iter()
            .enumerate()
            .map(|(i, &bs)| WirelessCell {
                bs,
                center: p.cell_centers[i],
                radius: p.cell_radius_m,
                air_rate_bps: p.air.bandwidth_bps,
                air_delay: p.air.delay(),
            })
            .collect();

        let mut addr_owner = BTreeMap::new();
        for n in &nodes {
            if let Some(a) = n.addr {
                if n.role != Role::Dmr && n.role != Role::Mnn {
                    addr_owner.insert(a, n.id);
                }
            }
        }
        let mut prefix_owner = BTreeMap::new();
        prefix_owner.insert(CN_ADDR.prefix(), cn);
        prefix_owner.insert(ER_ADDR.prefix(), er);
        prefix_owner.insert(HA_ADDR.prefix(), ha);
        prefix_owner.insert(MNP, ha);
        let mut map_domain = HashMap::new();
        for (i, &m) in maps.iter().enumerate() {
            let d = 2 + i as u32;
            prefix_owner.insert(Prefix::new(d, 0), m);
            map_domain.insert(m, d);
        }
        let mut ar_map = HashMap::new();
        let mut ar_prefix = HashMap::new();
        for (i, &ar) in ars.iter().enumerate() {
            let (d, s) = ar_sites[i];
            prefix_owner.insert(Prefix::new(d, s), ar);
            ar_map.insert(ar, maps[i / 2]);
            ar_prefix.insert(ar, Prefix::new(d, s));
        }
        let mut ar_bs = HashMap::new();
        let mut bs_ar = HashMap::new();
        for (i, &bs) in bss.iter().enumerate() {
            ar_bs.insert(ars[i], bs);
            bs_ar.insert(bs, ars[i]);
        }

        let link_index = links
            .iter()
            .enumerate()
            .map(|(i, l)| ((l.from, l.to), i))
            .collect();

        let mut topo = Topology {
            nodes,
            links,
            cells,
            cn,
            er,
            ha,
            maps,
            ars,
            bss,
            dmr,
            mnn,
            link_index,
            next_hop: Vec::new(),
            addr_owner,
            prefix_owner,
            ar_map,
            ar_bs,
            bs_ar,
            ar_prefix,
            map_domain,
        };
        topo.next_hop = topo.compute_next_hops();
        topo
    }

    fn is_wired(&self, n: NodeId) -> bool {
        !matches!(self.nodes[n.index()].role, Role::Dmr | Role::Mnn)
    }

    /// BFS next hop over the fixed infrastructure (mobile nodes excluded).
    fn compute_next_hops(&self) -> Vec<Vec<Option<NodeId>>> {
        let n = self.nodes.len();
        let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for l in &self.links {
            if self.is_wired(l.from) && self.is_wired(l.to) {
                adj[l.from.index()].push(l.to);
            }
        }
        let mut table = vec![vec![None; n]; n];
        for dst in 0..n {
            // BFS from the destination gives each node its parent toward it.
            let mut seen = vec![false; n];
            let mut q = VecDeque::new();
            seen[dst] = true;
            q.push_back(NodeId(dst as u32));
            while let Some(u) = q.pop_front() {
                for &v in &adj[u.index()] {
                    if !seen[v.index()] {
                        seen[v.index()] = true;
                        table[v.index()][dst] = Some(u);
                        q.push_back(v);
                    }
                }
            }
        }
        table
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[id.index()].role
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn addr(&self, id: NodeId) -> Address {
        self.nodes[id.index()]
            .addr
            .unwrap_or_else(|| panic!("{} has no address", self.name(id)))
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Option<(usize, &Link)> {
        self.link_index
            .get(&(from, to))
            .map(|&i| (i, &self.links[i]))
    }

    pub fn next_hop(&self, from: NodeId, to: NodeId) -> Option<NodeId> {
        self.next_hop[from.index()][to.index()]
    }

    /// Infrastructure node responsible for `a`: exact address first, then
    /// the owner of its site prefix.
    pub fn owner_of(&self, a: Address) -> Option<NodeId> {
        self.addr_owner
            .get(&a)
            .or_else(|| self.prefix_owner.get(&a.prefix()))
            .copied()
    }

    pub fn map_of_ar(&self, ar: NodeId) -> NodeId {
        self.ar_map[&ar]
    }

    pub fn bs_of_ar(&self, ar: NodeId) -> Option<NodeId> {
        self.ar_bs.get(&ar).copied()
    }

    pub fn ar_of_bs(&self, bs: NodeId) -> NodeId {
        self.bs_ar[&bs]
    }

    pub fn ar_prefix(&self, ar: NodeId) -> Prefix {
        self.ar_prefix[&ar]
    }

    pub fn ar_by_prefix(&self, p: Prefix) -> Option<NodeId> {
        self.ar_prefix
            .iter()
            .find(|(_, q)| **q == p)
            .map(|(ar, _)| *ar)
    }

    /// Site prefix of regional care-of addresses under `map`.
    pub fn rcoa_prefix(&self, map: NodeId) -> Prefix {
        Prefix::new(self.map_domain[&map], 0)
    }

    pub fn lcoa_for(&self, ar: NodeId) -> Address {
        self.ar_prefix(ar).with_node(DMR_IID)
    }

    pub fn rcoa_for(&self, map: NodeId) -> Address {
        self.rcoa_prefix(map).with_node(DMR_IID)
    }

    pub fn cell(&self, bs: NodeId) -> Option<&WirelessCell> {
        self.cells.iter().find(|c| c.bs == bs)
    }

    /// Wired path as a node list, inclusive of both ends.
    pub fn wired_path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            cur = self.next_hop(cur, to)?;
            path.push(cur);
        }
        Some(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(bw: u64, ms: u64) -> Link {
        Link {
            from: NodeId(0),
            to: NodeId(1),
            bandwidth_bps: bw,
            prop_delay: SimTime::from_millis(ms),
        }
    }

    #[test]
    fn transmit_examples() {
        let t0 = SimTime::from_secs(1);
        assert_eq!(transmit(&link(1_000_000, 2), 1000, t0), t0 + SimTime::from_millis(10));
        assert_eq!(
            transmit(&link(100_000_000, 20), 1000, t0),
            t0 + SimTime::from_micros(20_080)
        );
        assert_eq!(transmit(&link(1_000_000, 2), 0, t0), t0 + SimTime::from_millis(2));
    }

    #[test]
    fn serialization_rounds_up() {
        // 64 B at 3 Mb/s = 170.67 us
        assert_eq!(serialization_delay(64, 3_000_000), SimTime(171));
    }

    fn straight(speed: f64) -> MobilityTrack {
        MobilityTrack {
            waypoints: vec![Pos::new(0.0, 0.0), Pos::new(100.0, 0.0)],
            speed,
            start_time: SimTime::from_secs(5),
        }
    }

    #[test]
    fn position_examples() {
        let tr = straight(1.0);
        assert_eq!(position_at(&tr, SimTime::from_secs(2)), Pos::new(0.0, 0.0));
        assert_eq!(position_at(&tr, SimTime::from_secs(15)), Pos::new(10.0, 0.0));
        assert_eq!(position_at(&tr, SimTime::from_secs(500)), Pos::new(100.0, 0.0));
    }

    fn cell(id: u32, x: f64, y: f64) -> WirelessCell {
        WirelessCell {
            bs: NodeId(id),
            center: Pos::new(x, y),
            radius: 50.0,
            air_rate_bps: 2_000_000,
            air_delay: SimTime::from_millis(1),
        }
    }

    #[test]
    fn strongest_examples() {
        let p = Pos::new(0.0, 0.0);
        assert_eq!(strongest_bs(p, &[cell(1, 60.0, 0.0), cell(2, 0.0, 60.0)]), None);
        assert_eq!(strongest_bs(p, &[cell(1, 45.0, 0.0), cell(2, 0.0, 30.0)]), Some(NodeId(2)));
        assert_eq!(strongest_bs(p, &[cell(5, 40.0, 0.0), cell(3, 0.0, 40.0)]), Some(NodeId(3)));
    }

    #[test]
    fn coverage_of_straight_pass() {
        let tr = straight(1.0);
        let iv = coverage_intervals(&tr, &cell(0, 60.0, 0.0));
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 - 10.0).abs() < 1e-9);
        assert!((iv[0].1 - 100.0).abs() < 1e-9 || iv[0].1.is_infinite());
    }

    #[test]
    fn default_schedule_visits_all_cells() {
        let p = TopologyParams::default();
        let topo = Topology::build(&p);
        let tr = MobilityTrack {
            waypoints: vec![Pos::new(149.5, 800.0), Pos::new(1500.0, 800.0)],
            speed: 60.0 / 3.6,
            start_time: SimTime::from_secs(21),
        };
        let s = l2_schedule(&tr, &topo.cells, SimTime::from_secs(200));
        assert_eq!(s.initial.map(|x| x.0), Some(topo.bss[0]));
        assert_eq!(s.handovers.len(), 4);
        for i in 0..3 {
            let h = s.handovers[i];
            assert_eq!(h.old_bs, topo.bss[i]);
            assert_eq!(h.next.map(|n| n.0), Some(topo.bss[i + 1]));
            assert_eq!(h.next.unwrap().1, h.exit_at);
        }
        assert_eq!(s.handovers[3].next, None);
        // BS1 exit at x = 250.
        let expect = SimTime::from_secs(21) + SimTime::from_secs_f64(100.5 / (60.0 / 3.6));
        assert!(s.handovers[0].exit_at.as_micros().abs_diff(expect.as_micros()) <= 1);
    }

    #[test]
    fn default_topology_routes() {
        let topo = Topology::build(&TopologyParams::default());
        let path = topo.wired_path(topo.cn, topo.bss[0]).unwrap();
        let names: Vec<&str> = path.iter().map(|&n| topo.name(n)).collect();
        assert_eq!(names, vec!["CN", "ER", "MAP1", "AR1", "BS1"]);
        assert_eq!(topo.owner_of(MNN_HOA), Some(topo.ha));
        assert_eq!(topo.owner_of(Address::new(2, 2, 100)), Some(topo.ars[1]));
        assert_eq!(topo.owner_of(Address::new(3, 0, 100)), Some(topo.maps[1]));
        assert_eq!(topo.map_of_ar(topo.ars[2]), topo.maps[1]);
        assert_eq!(topo.lcoa_for(topo.ars[0]), Address::new(2, 1, 100));
        assert_eq!(topo.rcoa_for(topo.maps[0]), Address::new(2, 0, 100));
    }

    proptest! {
        #[test]
        fn position_stays_on_segment(t in 0u64..400_000_000, speed in 0.0f64..40.0) {
            let tr = straight(speed);
            let p = position_at(&tr, SimTime(t));
            prop_assert!(p.x >= 0.0 && p.x <= 100.0 && p.y == 0.0);
        }

        #[test]
        fn schedule_attachments_are_in_range(speed_kmh in 5.0f64..120.0) {
            let topo = Topology::build(&TopologyParams::default());
            let tr = MobilityTrack {
                waypoints: vec![Pos::new(149.5, 800.0), Pos::new(1500.0, 800.0)],
                speed: speed_kmh / 3.6,
                start_time: SimTime::from_secs(21),
            };
            let s = l2_schedule(&tr, &topo.cells, SimTime::from_secs(200));
            let mut last = SimTime::ZERO;
            for h in &s.handovers {
                prop_assert!(h.exit_at >= last);
                if let Some((bs, at)) = h.next {
                    let c = topo.cell(bs).unwrap();
                    prop_assert!(position_at(&tr, at).dist(c.center) <= c.radius + 1e-3);
                    last = at;
                }
            }
        }
    }
}
