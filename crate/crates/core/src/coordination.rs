//! Shared transaction pool ordering under Ricart–Agrawala mutual exclusion,
//! and coordinator-less Berkeley clock synchronization.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{HashDigest, Transaction};
use crate::{NodeId, Tick};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordinationError {
    #[error("mutex already requested or held")]
    AlreadyWanted,
    #[error("pool insertion outside the critical section")]
    NotHoldingMutex,
    #[error("release without holding the mutex")]
    NotHeld,
    #[error("clock sync needs at least one sample")]
    NoSamples,
    #[error("sync was computed for height {synced}, header is for {wanted}")]
    SyncStale { synced: u64, wanted: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LamportStamp {
    pub counter: u64,
    pub node: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MutexPhase {
    Released,
    Wanted,
    Held,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MutexMsg {
    Request(LamportStamp),
    Reply,
}

/// One node's view of the group's Ricart–Agrawala mutex.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MutexState {
    me: NodeId,
    peers: BTreeSet<NodeId>,
    phase: MutexPhase,
    clock: u64,
    pending_replies: BTreeSet<NodeId>,
    deferred: BTreeSet<NodeId>,
    my_request: Option<LamportStamp>,
}

impl MutexState {
    pub fn new(me: NodeId, peers: impl IntoIterator<Item = NodeId>) -> Self {
        MutexState {
            me,
            peers: peers.into_iter().filter(|p| *p != me).collect(),
            phase: MutexPhase::Released,
            clock: 0,
            pending_replies: BTreeSet::new(),
            deferred: BTreeSet::new(),
            my_request: None,
        }
    }

    pub fn phase(&self) -> MutexPhase {
        self.phase
    }

    pub fn is_held(&self) -> bool {
        self.phase == MutexPhase::Held
    }

    pub fn my_request(&self) -> Option<LamportStamp> {
        self.my_request
    }

    pub fn deferred(&self) -> &BTreeSet<NodeId> {
        &self.deferred
    }

    pub fn pending_replies(&self) -> &BTreeSet<NodeId> {
        &self.pending_replies
    }

    /// Enters `Wanted` and returns the requests to broadcast. With no peers
    /// the mutex is granted at once.
    pub fn request(&mut self) -> Result<Vec<(NodeId, MutexMsg)>, CoordinationError> {
        if self.phase != MutexPhase::Released {
            return Err(CoordinationError::AlreadyWanted);
        }
        self.clock += 1;
        let stamp = LamportStamp { counter: self.clock, node: self.me };
        self.my_request = Some(stamp);
        self.pending_replies = self.peers.clone();
        if self.pending_replies.is_empty() {
            self.phase = MutexPhase::Held;
            return Ok(vec![]);
        }
        self.phase = MutexPhase::Wanted;
        Ok(self.peers.iter().map(|p| (*p, MutexMsg::Request(stamp))).collect())
    }

    /// Returns `Some(Reply)` to send back now, or `None` if deferred.
    pub fn on_request(&mut self, from: NodeId, stamp: LamportStamp) -> Option<MutexMsg> {
        self.clock = self.clock.max(stamp.counter) + 1;
        let defer = match self.phase {
            MutexPhase::Held => true,
            MutexPhase::Wanted => self.my_request.is_some_and(|mine| mine < stamp),
            MutexPhase::Released => false,
        };
        if defer {
            self.deferred.insert(from);
            None
        } else {
            Some(MutexMsg::Reply)
        }
    }

    /// Returns true when this reply completed the grant.
    pub fn on_reply(&mut self, from: NodeId) -> bool {
        if self.phase != MutexPhase::Wanted || !self.pending_replies.remove(&from) {
            return false;
        }
        if self.pending_replies.is_empty() {
            self.phase = MutexPhase::Held;
            return true;
        }
        false
    }

    /// Leaves the critical section; returns the deferred replies to send.
    pub fn release(&mut self) -> Result<Vec<(NodeId, MutexMsg)>, CoordinationError> {
        if self.phase != MutexPhase::Held {
            return Err(CoordinationError::NotHeld);
        }
        self.phase = MutexPhase::Released;
        self.my_request = None;
        let out = std::mem::take(&mut self.deferred).into_iter().map(|p| (p, MutexMsg::Reply)).collect();
        Ok(out)
    }

    pub fn is_consistent(&self) -> bool {
        let held_ok = self.phase != MutexPhase::Held || self.pending_replies.is_empty();
        let deferred_ok = self.deferred.is_empty() || self.phase != MutexPhase::Released;
        held_ok && deferred_ok
    }
}

/// Append-only log of group transactions. The holder of the mutex assigns
/// each insertion the next log index; replicas place remote insertions by
/// index, so delivery order across different senders does not matter.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTxPool {
    ordered: Vec<Transaction>,
    seen: BTreeSet<HashDigest>,
    early: BTreeMap<u64, Transaction>,
}

impl SharedTxPool {
    pub fn ordered(&self) -> &[Transaction] {
        &self.ordered
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    pub fn contains(&self, digest: &HashDigest) -> bool {
        self.seen.contains(digest)
    }

    /// Local insertion inside the critical section. Returns the assigned
    /// index, or `None` for a duplicate.
    pub fn pool_insert(&mut self, tx: Transaction, mutex: &MutexState) -> Result<Option<u64>, CoordinationError> {
        if !mutex.is_held() {
            return Err(CoordinationError::NotHoldingMutex);
        }
        if !self.seen.insert(tx.digest()) {
            return Ok(None);
        }
        self.ordered.push(tx);
        Ok(Some(self.ordered.len() as u64 - 1))
    }

    /// Applies an insertion replicated from the holder.
    pub fn insert_at(&mut self, index: u64, tx: Transaction) {
        if index < self.ordered.len() as u64 {
            return;
        }
        self.early.insert(index, tx);
        while let Some(tx) = self.early.remove(&(self.ordered.len() as u64)) {
            self.seen.insert(tx.digest());
            self.ordered.push(tx);
        }
    }

    /// Log entries for which nothing is still missing.
    pub fn has_gaps(&self) -> bool {
        !self.early.is_empty()
    }

    /// Entries not yet included on chain, in log order.
    pub fn pending<'a>(&'a self, included: &'a BTreeSet<HashDigest>) -> impl Iterator<Item = &'a Transaction> + 'a {
        self.ordered.iter().filter(move |tx| !included.contains(&tx.digest()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockSample {
    pub node: NodeId,
    pub reported_time: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResult {
    pub reference: Tick,
    pub offsets: BTreeMap<NodeId, i64>,
    pub discarded: BTreeSet<NodeId>,
    /// Block height the samples were taken for.
    pub height: u64,
}

impl SyncResult {
    pub fn adjusted(&self, sample: &ClockSample) -> Option<Tick> {
        let off = self.offsets.get(&sample.node)?;
        Some((sample.reported_time as i128 + *off as i128) as Tick)
    }
}

fn median(sorted: &[Tick]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Ten times the median absolute deviation of the reported times.
pub fn default_outlier_bound(samples: &[ClockSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut times: Vec<Tick> = samples.iter().map(|s| s.reported_time).collect();
    times.sort_unstable();
    let med = median(&times);
    let mut dev: Vec<f64> = times.iter().map(|t| (*t as f64 - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let n = dev.len();
    let mad = if n % 2 == 1 { dev[n / 2] } else { (dev[n / 2 - 1] + dev[n / 2]) / 2.0 };
    10.0 * mad
}

/// Every member runs this on the same broadcast samples and gets the same
/// answer. Samples farther than `outlier_bound` from the median are left out
/// of the mean; `None` uses [`default_outlier_bound`]. The mean is floored to
/// a whole tick. Discarded nodes still receive an offset.
pub fn berkeley_sync(
    samples: &[ClockSample],
    outlier_bound: Option<f64>,
    height: u64,
) -> Result<SyncResult, CoordinationError> {
    if samples.is_empty() {
        return Err(CoordinationError::NoSamples);
    }
    let bound = outlier_bound.unwrap_or_else(|| default_outlier_bound(samples));
    let mut times: Vec<Tick> = samples.iter().map(|s| s.reported_time).collect();
    times.sort_unstable();
    let med = median(&times);
    let (kept, dropped): (Vec<&ClockSample>, Vec<&ClockSample>) =
        samples.iter().partition(|s| (s.reported_time as f64 - med).abs() <= bound);
    // An empty keep set can only come from a negative bound; fall back to all.
    let kept = if kept.is_empty() { samples.iter().collect() } else { kept };
    let sum: u128 = kept.iter().map(|s| s.reported_time as u128).sum();
    let reference = (sum / kept.len() as u128) as Tick;
    let offsets = samples.iter().map(|s| (s.node, reference as i64 - s.reported_time as i64)).collect();
    let discarded = dropped.iter().map(|s| s.node).collect();
    Ok(SyncResult { reference, offsets, discarded, height })
}

/// The header timestamp for `height`, identical at every member. Never
/// earlier than the parent's timestamp.
pub fn group_timestamp(sync: &SyncResult, height: u64, parent_timestamp: Tick) -> Result<Tick, CoordinationError> {
    if sync.height != height {
        return Err(CoordinationError::SyncStale { synced: sync.height, wanted: height });
    }
    Ok(sync.reference.max(parent_timestamp))
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::chain::Address;

    fn s(node: u32, t: Tick) -> ClockSample {
        ClockSample { node: NodeId(node), reported_time: t }
    }

    #[test]
    fn lone_member_is_granted_immediately() {
        let mut m = MutexState::new(NodeId(0), [NodeId(0)]);
        assert_eq!(m.request().unwrap(), vec![]);
        assert!(m.is_held());
        assert_eq!(m.request(), Err(CoordinationError::AlreadyWanted));
    }

    #[test]
    fn equal_counters_break_ties_by_node() {
        assert!(LamportStamp { counter: 3, node: NodeId(1) } < LamportStamp { counter: 3, node: NodeId(2) });
        let mut a = MutexState::new(NodeId(1), [NodeId(2)]);
        let mut b = MutexState::new(NodeId(2), [NodeId(1)]);
        let ra = a.request().unwrap();
        let rb = b.request().unwrap();
        let (MutexMsg::Request(sa), MutexMsg::Request(sb)) = (&ra[0].1, &rb[0].1) else { panic!() };
        assert_eq!(sa.counter, sb.counter);
        // b yields to a; a defers b.
        assert_eq!(b.on_request(NodeId(1), *sa), Some(MutexMsg::Reply));
        assert_eq!(a.on_request(NodeId(2), *sb), None);
        assert!(a.on_reply(NodeId(2)));
        assert!(a.is_held() && !b.is_held());
        assert_eq!(a.release().unwrap(), vec![(NodeId(2), MutexMsg::Reply)]);
        assert!(b.on_reply(NodeId(1)));
        assert!(b.is_consistent() && a.is_consistent());
    }

    /// Randomized message interleavings over a small group: never two
    /// holders, every requester eventually enters, and every replica ends
    /// with the same log.
    #[test]
    fn mutex_and_pool_under_random_interleaving() {
        use rand::{Rng, SeedableRng};
        for seed in 0..200u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<NodeId> = (0..4).map(NodeId).collect();
            let mut mx: Vec<MutexState> = ids.iter().map(|i| MutexState::new(*i, ids.clone())).collect();
            let mut pools = vec![SharedTxPool::default(); 4];
            // Per-pair FIFO channels.
            let mut chan: BTreeMap<(u32, u32), VecDeque<Wire>> = BTreeMap::new();
            #[derive(Clone)]
            enum Wire {
                M(MutexMsg),
                Ins(u64, Transaction),
            }
            let mut todo = [2usize; 4];
            let mut entered = vec![0usize; 4];
            let mut seq = [0u64; 4];
            for step in 0..10_000 {
                for (i, m) in mx.iter_mut().enumerate() {
                    if todo[i] > 0 && m.phase() == MutexPhase::Released && rng.gen_bool(0.3) {
                        for (p, msg) in m.request().unwrap() {
                            chan.entry((i as u32, p.0)).or_default().push_back(Wire::M(msg));
                        }
                    }
                }
                assert!(mx.iter().filter(|m| m.is_held()).count() <= 1, "seed {seed} step {step}");
                for i in 0..4 {
                    if mx[i].is_held() {
                        seq[i] += 1;
                        let tx = Transaction {
                            from: Address::for_node(i as u32),
                            to: Address::for_node(9),
                            amount: 0,
                            seq: seq[i],
                            payload_digest: HashDigest::ZERO,
                        };
                        let idx = pools[i].pool_insert(tx.clone(), &mx[i]).unwrap().unwrap();
                        for p in 0..4u32 {
                            if p as usize != i {
                                chan.entry((i as u32, p)).or_default().push_back(Wire::Ins(idx, tx.clone()));
                            }
                        }
                        entered[i] += 1;
                        todo[i] -= 1;
                        for (p, msg) in mx[i].release().unwrap() {
                            chan.entry((i as u32, p.0)).or_default().push_back(Wire::M(msg));
                        }
                    }
                }
                let live: Vec<(u32, u32)> = chan.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| *k).collect();
                if live.is_empty() {
                    if todo.iter().all(|t| *t == 0) {
                        break;
                    }
                    continue;
                }
                let (src, dst) = live[rng.gen_range(0..live.len())];
                let w = chan.get_mut(&(src, dst)).unwrap().pop_front().unwrap();
                let d = dst as usize;
                match w {
                    Wire::M(MutexMsg::Request(st)) => {
                        if let Some(r) = mx[d].on_request(NodeId(src), st) {
                            chan.entry((dst, src)).or_default().push_back(Wire::M(r));
                        }
                    }
                    Wire::M(MutexMsg::Reply) => {
                        mx[d].on_reply(NodeId(src));
                    }
                    Wire::Ins(idx, tx) => pools[d].insert_at(idx, tx),
                }
            }
            assert_eq!(entered, vec![2; 4], "seed {seed}");
            assert!(pools.iter().all(|p| p.ordered() == pools[0].ordered() && !p.has_gaps()));
            assert_eq!(pools[0].len(), 8);
        }
    }

    #[test]
    fn pool_insert_rules() {
        let mut m = MutexState::new(NodeId(0), []);
        let mut pool = SharedTxPool::default();
        let tx = Transaction {
            from: Address::for_node(0),
            to: Address::for_node(1),
            amount: 3,
            seq: 1,
            payload_digest: HashDigest::ZERO,
        };
        assert_eq!(pool.pool_insert(tx.clone(), &m), Err(CoordinationError::NotHoldingMutex));
        m.request().unwrap();
        assert_eq!(pool.pool_insert(tx.clone(), &m), Ok(Some(0)));
        assert_eq!(pool.pool_insert(tx.clone(), &m), Ok(None));
        assert_eq!(pool.ordered(), &[tx]);
    }

    #[test]
    fn berkeley_mean_and_offsets() {
        let r = berkeley_sync(&[s(0, 10), s(1, 20), s(2, 30)], None, 1).unwrap();
        assert_eq!(r.reference, 20);
        assert_eq!(r.offsets.values().copied().collect::<Vec<_>>(), vec![10, 0, -10]);
        let one = berkeley_sync(&[s(4, 777)], None, 1).unwrap();
        assert_eq!(one.offsets[&NodeId(4)], 0);
        assert_eq!(berkeley_sync(&[], None, 1), Err(CoordinationError::NoSamples));
    }

    #[test]
    fn berkeley_discards_outliers() {
        let samples = [s(0, 10), s(1, 20), s(2, 30), s(3, 10_000)];
        let r = berkeley_sync(&samples, Some(100.0), 1).unwrap();
        assert_eq!(r.reference, 20);
        assert_eq!(r.discarded, BTreeSet::from([NodeId(3)]));
        let d = berkeley_sync(&samples, None, 1).unwrap();
        assert_eq!(d.reference, 20);
    }

    #[test]
    fn adjusted_clocks_agree_exactly() {
        let samples: Vec<ClockSample> = (0..6).map(|i| s(i, 1_000_000 + (i as u64 * 37) % 101 - 50)).collect();
        let r = berkeley_sync(&samples, Some(f64::INFINITY), 3).unwrap();
        for x in &samples {
            assert_eq!(r.adjusted(x), Some(r.reference));
        }
        let mean = samples.iter().map(|x| x.reported_time).sum::<u64>() / 6;
        assert_eq!(group_timestamp(&r, 3, 0), Ok(mean));
        assert_eq!(group_timestamp(&r, 4, 0), Err(CoordinationError::SyncStale { synced: 3, wanted: 4 }));
        assert_eq!(group_timestamp(&r, 3, u64::MAX), Ok(u64::MAX));
    }
}
