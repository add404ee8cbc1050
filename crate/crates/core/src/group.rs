//! Group formation by hashrate matching and nonce-space division with secret
//! overlap segments.
//!
//! Formation is a per-node state machine ([`Formation`]). A seeking node
//! broadcasts a [`CollabRequest`]; peers with a compatible hashrate accept the
//! first request they see. When two initiators race, the one whose request
//! sorts later by `(sent_at, sender)` releases its acceptors and joins the
//! earlier one, so formation converges on a single group per compatible
//! cluster.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Address;
use crate::mining::{HashrateEstimate, MiningError, NonceRange, ScanPlan};
use crate::{NodeId, Tick};

pub const DEFAULT_TOLERANCE: f64 = 1.5;
pub const DEFAULT_TARGET_SIZE: usize = 6;
pub const DEFAULT_OVERLAP_FRACTION: f64 = 0.01;
pub const DEFAULT_NONCE_WINDOW: u64 = 1 << 24;
/// Default dense-recorded prefix of a base range, in overlap-segment lengths.
pub const DEFAULT_AUDIT_SEGMENTS: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("a group needs at least 2 members, have {0}")]
    GroupTooSmall(usize),
    #[error("overlap of {fraction} x {base} nonces is below one nonce")]
    OverlapTooSmall { fraction: String, base: u64 },
    #[error("formation deadline passed with {0} member(s)")]
    FormationTimeout(usize),
    #[error("{0} is not a member of the group")]
    NotAMember(NodeId),
    #[error("group is not mining")]
    NotMining,
    #[error(transparent)]
    Range(#[from] MiningError),
}

/// Maximum accepted ratio between two hashrates.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Tolerance(f64);

impl Tolerance {
    pub fn new(ratio: f64) -> Option<Self> {
        (ratio.is_finite() && ratio >= 1.0).then_some(Tolerance(ratio))
    }

    pub fn ratio(self) -> f64 {
        self.0
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance(DEFAULT_TOLERANCE)
    }
}

/// `max / min ≤ tolerance`.
pub fn should_accept(local: HashrateEstimate, remote: HashrateEstimate, tolerance: Tolerance) -> bool {
    let (a, b) = (local.nonces_per_second(), remote.nonces_per_second());
    a.max(b) / a.min(b) <= tolerance.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabRequest {
    pub sender: NodeId,
    pub hashrate: HashrateEstimate,
    pub sent_at: Tick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub leader: NodeId,
    pub epoch: u32,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}.{}", self.leader.0, self.epoch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupStatus {
    Forming,
    Mining,
    Settling,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDescriptor {
    pub group_id: GroupId,
    /// Ascending by id; a member's index is its position here.
    pub members: Vec<NodeId>,
    pub shared_etherbase: Option<Address>,
    pub status: GroupStatus,
    pub target_size: usize,
}

impl GroupDescriptor {
    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.binary_search(&node).is_ok()
    }

    /// Records the shared account and moves the group to `Mining`.
    pub fn activate(&mut self, etherbase: Address) {
        self.shared_etherbase = Some(etherbase);
        self.status = GroupStatus::Mining;
    }

    pub fn is_consistent(&self) -> bool {
        let distinct = self.members.windows(2).all(|w| w[0] < w[1]);
        let sized = self.members.len() <= self.target_size;
        let base = self.shared_etherbase.is_some() == (self.status != GroupStatus::Forming);
        distinct && sized && base
    }
}

/// Closes formation. Requires at least two members, whether `target_size`
/// was reached or the deadline expired.
pub fn finalize_group(
    group_id: GroupId,
    members: impl IntoIterator<Item = NodeId>,
    target_size: usize,
) -> Result<GroupDescriptor, GroupError> {
    let mut members: Vec<NodeId> = members.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if members.len() < 2 {
        return Err(GroupError::FormationTimeout(members.len()));
    }
    members.truncate(target_size.max(2));
    Ok(GroupDescriptor { group_id, members, shared_etherbase: None, status: GroupStatus::Forming, target_size })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSet {
    pub trusted: BTreeSet<NodeId>,
}

impl PeerSet {
    pub fn extend_with_group(&mut self, me: NodeId, group: &GroupDescriptor) {
        self.trusted.extend(group.members.iter().copied().filter(|m| *m != me));
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormationRole {
    Idle,
    Initiating { epoch: u32, request: CollabRequestKey, acceptors: BTreeSet<NodeId> },
    Pending { leader: NodeId },
    Grouped(GroupId),
    Solo,
}

/// Ordering key of a request; floats are kept out of the state machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CollabRequestKey {
    pub sent_at: Tick,
    pub sender: NodeId,
}

/// What a node must do after a formation transition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FormationEffect {
    Accept { leader: NodeId },
    Release { to: Vec<NodeId> },
    Finalize { group_id: GroupId, members: Vec<NodeId> },
    GoSolo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Formation {
    me: NodeId,
    rate: HashrateEstimate,
    tolerance: Tolerance,
    target_size: usize,
    role: FormationRole,
    epoch: u32,
    /// Compatible requests in delivery order.
    seen: Vec<CollabRequestKey>,
    /// Initiators that released us or gave up.
    dead: BTreeSet<NodeId>,
}

impl Formation {
    pub fn new(me: NodeId, rate: HashrateEstimate, tolerance: Tolerance, target_size: usize) -> Self {
        Formation {
            me,
            rate,
            tolerance,
            target_size: target_size.max(2),
            role: FormationRole::Idle,
            epoch: 0,
            seen: Vec::new(),
            dead: BTreeSet::new(),
        }
    }

    pub fn role(&self) -> &FormationRole {
        &self.role
    }

    pub fn group(&self) -> Option<GroupId> {
        match self.role {
            FormationRole::Grouped(g) => Some(g),
            _ => None,
        }
    }

    /// Starts a search for collaborators. Returns the request to broadcast,
    /// or `None` if this node already accepted someone else's request.
    pub fn initiate(&mut self, now: Tick) -> Option<CollabRequest> {
        if self.role != FormationRole::Idle {
            return None;
        }
        self.epoch += 1;
        let request = CollabRequest { sender: self.me, hashrate: self.rate, sent_at: now };
        self.role = FormationRole::Initiating {
            epoch: self.epoch,
            request: CollabRequestKey { sent_at: now, sender: self.me },
            acceptors: BTreeSet::new(),
        };
        Some(request)
    }

    /// Accepts the first compatible request; ignores everything while
    /// already pending, grouped or mining solo.
    pub fn handle_request(&mut self, req: &CollabRequest) -> Vec<FormationEffect> {
        if req.sender == self.me || !should_accept(self.rate, req.hashrate, self.tolerance) {
            return vec![];
        }
        let key = CollabRequestKey { sent_at: req.sent_at, sender: req.sender };
        match &self.role {
            FormationRole::Idle => {
                self.seen.push(key);
                self.role = FormationRole::Pending { leader: req.sender };
                vec![FormationEffect::Accept { leader: req.sender }]
            }
            FormationRole::Initiating { request, acceptors, .. } => {
                self.seen.push(key);
                if key >= *request {
                    return vec![];
                }
                let release: Vec<NodeId> = acceptors.iter().copied().collect();
                self.dead.insert(self.me);
                self.role = FormationRole::Pending { leader: req.sender };
                let mut out = vec![];
                if !release.is_empty() {
                    out.push(FormationEffect::Release { to: release });
                }
                out.push(FormationEffect::Accept { leader: req.sender });
                out
            }
            FormationRole::Pending { .. } => {
                self.seen.push(key);
                vec![]
            }
            FormationRole::Grouped(_) | FormationRole::Solo => vec![],
        }
    }

    /// An acceptance reached us.
    pub fn handle_accept(&mut self, from: NodeId) -> Vec<FormationEffect> {
        let target = self.target_size;
        let me = self.me;
        match &mut self.role {
            FormationRole::Initiating { epoch, acceptors, .. } if acceptors.len() + 1 < target => {
                acceptors.insert(from);
                if acceptors.len() + 1 == target {
                    let group_id = GroupId { leader: me, epoch: *epoch };
                    let members = std::iter::once(me).chain(acceptors.iter().copied()).collect();
                    return vec![FormationEffect::Finalize { group_id, members }];
                }
                vec![]
            }
            _ => vec![FormationEffect::Release { to: vec![from] }],
        }
    }

    /// Our leader gave up; fall through to the next remembered request.
    pub fn handle_release(&mut self, from: NodeId) -> Vec<FormationEffect> {
        self.dead.insert(from);
        match self.role {
            FormationRole::Pending { leader } if leader == from => {
                let next = self.seen.iter().find(|k| !self.dead.contains(&k.sender)).copied();
                match next {
                    Some(k) => {
                        self.role = FormationRole::Pending { leader: k.sender };
                        vec![FormationEffect::Accept { leader: k.sender }]
                    }
                    None => {
                        self.role = FormationRole::Idle;
                        vec![]
                    }
                }
            }
            _ => vec![],
        }
    }

    /// Formation deadline. An initiator with at least one acceptor closes its
    /// group; a node that found nobody reverts to solo mining. Pending nodes
    /// keep waiting for their leader.
    pub fn handle_deadline(&mut self) -> Vec<FormationEffect> {
        match &self.role {
            FormationRole::Initiating { epoch, acceptors, .. } if !acceptors.is_empty() => {
                let group_id = GroupId { leader: self.me, epoch: *epoch };
                let members = std::iter::once(self.me).chain(acceptors.iter().copied()).collect();
                vec![FormationEffect::Finalize { group_id, members }]
            }
            FormationRole::Initiating { .. } | FormationRole::Idle => {
                self.role = FormationRole::Solo;
                vec![FormationEffect::GoSolo]
            }
            _ => vec![],
        }
    }

    pub fn joined(&mut self, group: GroupId) {
        self.role = FormationRole::Grouped(group);
    }

    pub fn go_solo(&mut self) {
        self.role = FormationRole::Solo;
    }
}

/// An overlap segment: `carver` is handed a slice of `owner`'s base range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub carver: NodeId,
    pub owner: NodeId,
    pub segment: NonceRange,
}

impl Overlap {
    pub fn involves(&self, node: NodeId) -> bool {
        self.carver == node || self.owner == node
    }

    pub fn partner_of(&self, node: NodeId) -> Option<NodeId> {
        if self.carver == node {
            Some(self.owner)
        } else if self.owner == node {
            Some(self.carver)
        } else {
            None
        }
    }
}

/// What a miner is told about its work: one contiguous base range, extra
/// segments with no indication of whose they are, and how many leading base
/// nonces to record densely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredRange {
    pub base: NonceRange,
    pub extra: Vec<NonceRange>,
    pub audit_window: u64,
}

impl DeliveredRange {
    /// Extra segments first, then the base; every nonce in the extras and in
    /// the first `audit_window` base nonces is recorded.
    pub fn scan_plan(&self, stride: u64) -> Result<ScanPlan, MiningError> {
        let mut segments = self.extra.clone();
        segments.push(self.base);
        let mut dense = self.extra.clone();
        if self.audit_window > 0 {
            let end = self.base.end().min(self.base.start() + self.audit_window);
            dense.push(NonceRange::new(self.base.start(), end)?);
        }
        ScanPlan::new(segments, dense, stride)
    }

    pub fn contains(&self, nonce: u64) -> bool {
        self.base.contains(nonce) || self.extra.iter().any(|e| e.contains(nonce))
    }
}

/// Full nonce-space division, including the overlap map that only the
/// verifier may hold. Deliberately not serializable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeAssignment {
    pub n_total: u64,
    pub members: Vec<NodeId>,
    pub base: BTreeMap<NodeId, NonceRange>,
    pub overlaps: Vec<Overlap>,
    pub audit_window: u64,
}

impl RangeAssignment {
    pub fn delivered(&self, node: NodeId) -> Option<DeliveredRange> {
        let base = *self.base.get(&node)?;
        let mut extra: Vec<NonceRange> =
            self.overlaps.iter().filter(|o| o.carver == node).map(|o| o.segment).collect();
        extra.sort();
        Some(DeliveredRange { base, extra, audit_window: self.audit_window })
    }

    pub fn overlaps_of(&self, node: NodeId) -> impl Iterator<Item = &Overlap> {
        self.overlaps.iter().filter(move |o| o.involves(node))
    }

    /// True when the delivered ranges jointly cover exactly `[0, n_total)`.
    pub fn covers_exactly(&self) -> bool {
        let mut spans: Vec<(u64, u64)> = self
            .members
            .iter()
            .filter_map(|m| self.delivered(*m))
            .flat_map(|d| std::iter::once(d.base).chain(d.extra))
            .map(|r| (r.start(), r.end()))
            .collect();
        spans.sort_unstable();
        let mut reach = 0;
        for (s, e) in spans {
            if s > reach || e > self.n_total {
                return false;
            }
            reach = reach.max(e);
        }
        reach == self.n_total
    }
}

/// Contiguous near-equal split of `[0, n_total)`; the first
/// `n_total % parts` ranges get one extra nonce.
pub fn partition_bases(n_total: u64, parts: usize) -> Result<Vec<NonceRange>, GroupError> {
    if parts == 0 {
        return Err(GroupError::GroupTooSmall(0));
    }
    let k = parts as u64;
    let (size, rem) = (n_total / k, n_total % k);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..k {
        let len = size + u64::from(i < rem);
        out.push(NonceRange::new(start, start + len)?);
        start += len;
    }
    Ok(out)
}

/// Splits `[0, n_total)` among `members` and carves, for every member, one
/// overlap segment of ⌈fraction × base⌉ nonces out of a partner's base. The
/// partner ring is a seeded shuffle (member at ring slot i carves from slot
/// i + 1); segment offsets are seeded and fall within the partner's first
/// `audit_window` nonces (default four segment lengths), which every miner
/// records densely.
pub fn divide_nonce_range(
    n_total: u64,
    members: &[NodeId],
    overlap_fraction: f64,
    audit_window: Option<u64>,
    seed: u64,
) -> Result<RangeAssignment, GroupError> {
    let mut members: Vec<NodeId> = members.to_vec();
    members.sort_unstable();
    members.dedup();
    if members.len() < 2 {
        return Err(GroupError::GroupTooSmall(members.len()));
    }
    let bases = partition_bases(n_total, members.len())?;
    let smallest = bases.iter().map(NonceRange::len).min().expect("non-empty");
    let raw = overlap_fraction * smallest as f64;
    if !(overlap_fraction > 0.0 && overlap_fraction < 1.0) || raw < 1.0 {
        return Err(GroupError::OverlapTooSmall { fraction: overlap_fraction.to_string(), base: smallest });
    }
    let seg_len = (raw.ceil() as u64).min(smallest);
    let window = audit_window.unwrap_or(DEFAULT_AUDIT_SEGMENTS * seg_len).clamp(seg_len, smallest);

    let base: BTreeMap<NodeId, NonceRange> = members.iter().copied().zip(bases).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ring = members.clone();
    ring.shuffle(&mut rng);
    let overlaps = (0..ring.len())
        .map(|i| {
            let carver = ring[i];
            let owner = ring[(i + 1) % ring.len()];
            let owner_base = base[&owner];
            let offset = rng.gen_range(0..=window - seg_len);
            let start = owner_base.start() + offset;
            let segment = NonceRange::new(start, start + seg_len).expect("seg_len >= 1");
            Overlap { carver, owner, segment }
        })
        .collect();
    Ok(RangeAssignment { n_total, members, base, overlaps, audit_window: window })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeaveOutcome {
    /// The group continues; the new assignment applies from the next block.
    Continue { descriptor: GroupDescriptor, assignment: RangeAssignment },
    /// Fewer than two members remain; everyone returns to solo mining.
    Dissolved { former_members: Vec<NodeId> },
}

/// Removes `node` from a mining group. Every block boundary starts a fresh
/// header, so the leaver's whole range is unexhausted there and is
/// re-divided among the survivors.
pub fn leave_group(
    group: &GroupDescriptor,
    node: NodeId,
    n_total: u64,
    overlap_fraction: f64,
    audit_window: Option<u64>,
    seed: u64,
) -> Result<LeaveOutcome, GroupError> {
    if !group.is_member(node) {
        return Err(GroupError::NotAMember(node));
    }
    if group.status != GroupStatus::Mining {
        return Err(GroupError::NotMining);
    }
    let survivors: Vec<NodeId> = group.members.iter().copied().filter(|m| *m != node).collect();
    if survivors.len() < 2 {
        return Ok(LeaveOutcome::Dissolved { former_members: group.members.clone() });
    }
    let assignment = divide_nonce_range(n_total, &survivors, overlap_fraction, audit_window, seed)?;
    let mut descriptor = group.clone();
    descriptor.members = survivors;
    Ok(LeaveOutcome::Continue { descriptor, assignment })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rate(r: f64) -> HashrateEstimate {
        HashrateEstimate::new(r).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|i| NodeId(*i)).collect()
    }

    #[test]
    fn hashrate_matching() {
        let tol = Tolerance::new(1.5).unwrap();
        assert!(should_accept(rate(10.0), rate(10.0), tol));
        assert!(!should_accept(rate(8.0), rate(1.0), tol));
        assert!(should_accept(rate(1.4), rate(1.0), tol));
        assert!(should_accept(rate(1.0), rate(1.4), tol));
        assert!(Tolerance::new(0.9).is_none());
    }

    fn req(sender: u32, at: Tick, r: f64) -> CollabRequest {
        CollabRequest { sender: NodeId(sender), hashrate: rate(r), sent_at: at }
    }

    #[test]
    fn first_compatible_request_wins() {
        let mut f = Formation::new(NodeId(9), rate(1.0), Tolerance::default(), 6);
        assert_eq!(f.handle_request(&req(1, 5, 1.0)), vec![FormationEffect::Accept { leader: NodeId(1) }]);
        assert_eq!(f.handle_request(&req(2, 7, 1.0)), vec![]);
        assert_eq!(f.role(), &FormationRole::Pending { leader: NodeId(1) });
    }

    #[test]
    fn incompatible_or_busy_requests_are_ignored() {
        let mut f = Formation::new(NodeId(9), rate(1.0), Tolerance::default(), 6);
        assert_eq!(f.handle_request(&req(1, 5, 8.0)), vec![]);
        assert_eq!(f.role(), &FormationRole::Idle);
        f.joined(GroupId { leader: NodeId(3), epoch: 1 });
        assert_eq!(f.handle_request(&req(2, 6, 1.0)), vec![]);
    }

    #[test]
    fn later_initiator_yields_to_earlier() {
        let mut a = Formation::new(NodeId(1), rate(1.0), Tolerance::default(), 6);
        let mut b = Formation::new(NodeId(2), rate(1.0), Tolerance::default(), 6);
        let ra = a.initiate(10).unwrap();
        let rb = b.initiate(11).unwrap();
        // c accepted b before hearing from a.
        assert_eq!(b.handle_accept(NodeId(3)), vec![]);
        assert_eq!(a.handle_request(&rb), vec![]);
        let effects = b.handle_request(&ra);
        assert_eq!(
            effects,
            vec![FormationEffect::Release { to: vec![NodeId(3)] }, FormationEffect::Accept { leader: NodeId(1) }]
        );
        let mut c = Formation::new(NodeId(3), rate(1.0), Tolerance::default(), 6);
        c.handle_request(&rb);
        c.handle_request(&ra);
        assert_eq!(c.handle_release(NodeId(2)), vec![FormationEffect::Accept { leader: NodeId(1) }]);
    }

    #[test]
    fn target_size_finalizes() {
        let mut a = Formation::new(NodeId(0), rate(1.0), Tolerance::default(), 3);
        a.initiate(0).unwrap();
        assert_eq!(a.handle_accept(NodeId(4)), vec![]);
        let fx = a.handle_accept(NodeId(2));
        assert_eq!(
            fx,
            vec![FormationEffect::Finalize { group_id: GroupId { leader: NodeId(0), epoch: 1 }, members: ids(&[0, 2, 4]) }]
        );
        // A late acceptance is turned away.
        assert_eq!(a.handle_accept(NodeId(5)), vec![FormationEffect::Release { to: vec![NodeId(5)] }]);
    }

    #[test]
    fn lone_node_times_out_to_solo() {
        let mut a = Formation::new(NodeId(0), rate(1.0), Tolerance::default(), 6);
        a.initiate(0).unwrap();
        assert_eq!(a.handle_deadline(), vec![FormationEffect::GoSolo]);
        assert_eq!(
            finalize_group(GroupId { leader: NodeId(0), epoch: 1 }, ids(&[0]), 6),
            Err(GroupError::FormationTimeout(1))
        );
    }

    #[test]
    fn deadline_with_partial_group_proceeds() {
        let mut a = Formation::new(NodeId(0), rate(1.0), Tolerance::default(), 6);
        a.initiate(0).unwrap();
        for i in 1..5 {
            a.handle_accept(NodeId(i));
        }
        let fx = a.handle_deadline();
        let FormationEffect::Finalize { group_id, members } = &fx[0] else { panic!("{fx:?}") };
        let g = finalize_group(*group_id, members.clone(), 6).unwrap();
        assert_eq!(g.members.len(), 5);
        assert!(g.is_consistent());
    }

    #[test]
    fn equal_partition_without_overlap() {
        let got = partition_bases(1000, 4).unwrap();
        let want: Vec<NonceRange> =
            [(0, 250), (250, 500), (500, 750), (750, 1000)].iter().map(|(a, b)| NonceRange::new(*a, *b).unwrap()).collect();
        assert_eq!(got, want);
        let uneven = partition_bases(10, 3).unwrap();
        assert_eq!(uneven.iter().map(NonceRange::len).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn two_member_overlap_set_algebra() {
        let a = divide_nonce_range(1000, &ids(&[0, 1]), 0.01, None, 42).unwrap();
        for (me, partner) in [(NodeId(0), NodeId(1)), (NodeId(1), NodeId(0))] {
            let d = a.delivered(me).unwrap();
            assert_eq!(d.extra.len(), 1);
            assert_eq!(d.extra[0].len(), 5);
            assert!(a.base[&partner].contains_range(&d.extra[0]));
        }
        // Enumerate every nonce: the union of delivered ranges is [0, 1000).
        let mut covered = vec![false; 1000];
        for m in &a.members {
            let d = a.delivered(*m).unwrap();
            for n in 0..1000u64 {
                if d.contains(n) {
                    covered[n as usize] = true;
                }
            }
        }
        assert!(covered.iter().all(|c| *c));
        assert!(a.covers_exactly());
    }

    #[test]
    fn division_is_seed_deterministic() {
        let m = ids(&[3, 7, 8, 11]);
        let a = divide_nonce_range(1 << 16, &m, 0.01, Some(2000), 5).unwrap();
        let b = divide_nonce_range(1 << 16, &m, 0.01, Some(2000), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn division_guards() {
        assert_eq!(divide_nonce_range(1000, &ids(&[0]), 0.01, None, 1), Err(GroupError::GroupTooSmall(1)));
        assert!(matches!(divide_nonce_range(100, &ids(&[0, 1]), 0.01, None, 1), Err(GroupError::OverlapTooSmall { .. })));
    }

    #[test]
    fn delivered_payload_has_no_partner_labels() {
        let a = divide_nonce_range(60_000, &ids(&[0, 1, 2, 3, 4, 5]), 0.01, Some(400), 9).unwrap();
        for m in &a.members {
            let json = serde_json::to_value(a.delivered(*m).unwrap()).unwrap();
            let obj = json.as_object().unwrap();
            let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
            assert_eq!(keys, BTreeSet::from(["base", "extra", "audit_window"]));
            let text = json.to_string();
            for other in &a.members {
                assert!(!text.contains(&format!("\"n{}\"", other.0)));
            }
            assert!(!text.contains("owner") && !text.contains("carver"));
        }
    }

    #[test]
    fn three_member_leave_preserves_union() {
        let mut g = finalize_group(GroupId { leader: NodeId(0), epoch: 1 }, ids(&[0, 1, 2]), 6).unwrap();
        g.activate(Address::for_node(99));
        let before = divide_nonce_range(3000, &g.members, 0.01, None, 1).unwrap();
        let leaver_base = before.base[&NodeId(1)];
        let LeaveOutcome::Continue { descriptor, assignment } = leave_group(&g, NodeId(1), 3000, 0.01, None, 2).unwrap()
        else {
            panic!("group should survive")
        };
        assert_eq!(descriptor.members, ids(&[0, 2]));
        assert!(assignment.covers_exactly());
        for n in leaver_base.iter() {
            assert!(assignment.members.iter().any(|m| assignment.delivered(*m).unwrap().contains(n)));
        }
    }

    #[test]
    fn two_member_leave_dissolves() {
        let mut g = finalize_group(GroupId { leader: NodeId(0), epoch: 1 }, ids(&[0, 1]), 6).unwrap();
        g.activate(Address::for_node(99));
        assert_eq!(
            leave_group(&g, NodeId(0), 1000, 0.01, None, 1).unwrap(),
            LeaveOutcome::Dissolved { former_members: ids(&[0, 1]) }
        );
        assert_eq!(leave_group(&g, NodeId(5), 1000, 0.01, None, 1), Err(GroupError::NotAMember(NodeId(5))));
    }

    proptest! {
        #[test]
        fn assignments_cover_and_overlap_inside_partners(
            n in 2usize..9,
            total in 2_000u64..200_000,
            frac in 0.005f64..0.2,
            window in proptest::option::of(1u64..5_000),
            seed in any::<u64>(),
        ) {
            let members: Vec<NodeId> = (0..n as u32).map(|i| NodeId(i * 3 + 1)).collect();
            let a = divide_nonce_range(total, &members, frac, window, seed).unwrap();
            prop_assert!(a.covers_exactly());
            let sizes: Vec<u64> = a.base.values().map(NonceRange::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for m in &members {
                prop_assert!(a.overlaps_of(*m).count() >= 1);
            }
            for o in &a.overlaps {
                prop_assert!(o.carver != o.owner);
                prop_assert!(a.base[&o.owner].contains_range(&o.segment));
                prop_assert!(a.delivered(o.carver).unwrap().extra.contains(&o.segment));
                prop_assert!(o.segment.start() - a.base[&o.owner].start() + o.segment.len() <= a.audit_window);
            }
        }
    }
}
