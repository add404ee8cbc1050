//! The protocol actors: miners, the CVRM service, the balance oracle and the
//! chain sequencer that orders block submissions.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenario::{Behavior, NodeClass, NodeConfig, Role, ScenarioConfig};
use super::{Ctx, Endpoint, ExecMode, Label, Process, RunSummary, SimError, Simulation};
use crate::chain::{tx_root, Address, Block, BlockHeader, Difficulty, HashDigest, Ledger, Transaction};
use crate::coordination::{berkeley_sync, group_timestamp, ClockSample, MutexMsg, MutexState, SharedTxPool};
use crate::cvrm::{oracle_poll, AuditRecord, ContributionProof, Cvrm, CvrmConfig, CvrmError, Oracle, OracleReport, VerificationVerdict};
use crate::group::{
    finalize_group, CollabRequest, DeliveredRange, Formation, FormationEffect, FormationRole, GroupDescriptor, GroupId,
    PeerSet, Tolerance,
};
use crate::mining::{calibrate_hashrate, ProofTrace, ScanStep, Scanner};
use crate::threshold::{GroupPublicKey, SignedWithdrawal};
use crate::{Amount, NodeId, Tick, TICKS_PER_SECOND};

/// Nonces hashed per scheduling slice.
const SLICE: u64 = 1024;

#[derive(Clone, Debug)]
pub struct TipNotice {
    pub block: Block,
    pub height: u64,
    /// The chain reached its target and accepts no more blocks.
    pub halted: bool,
}

#[derive(Clone, Debug)]
pub struct Activation {
    pub descriptor: GroupDescriptor,
    pub delivered: DeliveredRange,
    pub public: GroupPublicKey,
}

#[derive(Clone, Debug)]
pub struct Withdrawal {
    pub tx: Transaction,
    pub sig: SignedWithdrawal,
    pub public: GroupPublicKey,
}

#[derive(Clone, Debug)]
pub enum Msg {
    // timers
    Begin,
    FormationDeadline,
    Slice { job: u64 },
    Found { job: u64 },
    SettleDeadline { group: GroupId, height: u64 },
    OracleTick,
    // formation
    Collab(CollabRequest),
    Accept,
    Release,
    Register(GroupDescriptor),
    Activated(Box<Activation>),
    // in-group coordination
    Mutex(MutexMsg),
    PoolInsert { index: u64, tx: Transaction },
    Clock { height: u64, round: u32, sample: ClockSample, pool_len: u64 },
    Exhausted { height: u64, round: u32 },
    // chain
    SubmitBlock(Box<Block>),
    NewTip(Box<TipNotice>),
    SubmitWithdrawal(Box<Withdrawal>),
    WithdrawalApplied(Box<Withdrawal>),
    // settlement
    Watch(Address),
    PollNow,
    Reports(Vec<OracleReport>),
    Proof(Box<ContributionProof>),
    RewardNotice { group: GroupId, height: u64, amount: Amount },
    WithdrawRequest { group: GroupId, amount: Amount, to: Address },
    WithdrawOutcome { amount: Amount, granted: bool },
}

impl Label for Msg {
    fn label(&self) -> &'static str {
        match self {
            Msg::Begin => "begin",
            Msg::FormationDeadline => "formation-deadline",
            Msg::Slice { .. } => "slice",
            Msg::Found { .. } => "found",
            Msg::SettleDeadline { .. } => "settle-deadline",
            Msg::OracleTick => "oracle-tick",
            Msg::Collab(_) => "collab-request",
            Msg::Accept => "accept",
            Msg::Release => "release",
            Msg::Register(_) => "register",
            Msg::Activated(_) => "activated",
            Msg::Mutex(MutexMsg::Request(_)) => "mutex-request",
            Msg::Mutex(MutexMsg::Reply) => "mutex-reply",
            Msg::PoolInsert { .. } => "pool-insert",
            Msg::Clock { .. } => "clock-sample",
            Msg::Exhausted { .. } => "exhausted",
            Msg::SubmitBlock(_) => "submit-block",
            Msg::NewTip(_) => "new-tip",
            Msg::SubmitWithdrawal(_) => "submit-withdrawal",
            Msg::WithdrawalApplied(_) => "withdrawal-applied",
            Msg::Watch(_) => "watch",
            Msg::PollNow => "poll-now",
            Msg::Reports(_) => "reports",
            Msg::Proof(_) => "proof",
            Msg::RewardNotice { .. } => "reward-notice",
            Msg::WithdrawRequest { .. } => "withdraw-request",
            Msg::WithdrawOutcome { .. } => "withdraw-outcome",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobEnd {
    Found,
    Interrupted,
    Exhausted,
}

/// One header's worth of hashing by one miner.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JobRecord {
    pub height: u64,
    pub round: u32,
    pub grouped: bool,
    pub start: Tick,
    pub end: Tick,
    pub nonces: u64,
    pub outcome: JobEnd,
}

/// A group member's view of one template agreement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SyncRecord {
    pub height: u64,
    pub round: u32,
    pub reference: Tick,
    pub timestamp: Tick,
    /// Digest of the header bytes with a zero nonce.
    pub template: HashDigest,
    /// Every sample adjusted to exactly the reference.
    pub exact: bool,
    pub discarded: usize,
    pub txs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum JobState {
    Running,
    Done,
}

#[derive(Clone, Debug)]
struct Job {
    id: u64,
    height: u64,
    round: u32,
    grouped: bool,
    header: BlockHeader,
    txs: Vec<Transaction>,
    scanner: Scanner,
    start: Tick,
    found: Option<u64>,
    state: JobState,
}

#[derive(Clone, Debug)]
struct GroupState {
    descriptor: GroupDescriptor,
    delivered: DeliveredRange,
    public: GroupPublicKey,
    others: Vec<Endpoint>,
    mutex: MutexState,
    pool: SharedTxPool,
    outbox: Vec<Transaction>,
    round: (u64, u32),
    sample_due: bool,
    built: Option<(u64, u32)>,
    samples: BTreeMap<(u64, u32), BTreeMap<NodeId, (ClockSample, u64)>>,
    exhausted: BTreeMap<(u64, u32), BTreeSet<NodeId>>,
    syncs: Vec<SyncRecord>,
}

/// Static parameters a miner needs from the scenario.
#[derive(Clone, Debug)]
struct MinerParams {
    difficulty: Difficulty,
    n_total: u64,
    stride: u64,
    cost: Tick,
    max_block_txs: usize,
    initiate_delay: Tick,
    formation_deadline: Tick,
    target_size: usize,
    /// Seed-derived salt so that transaction payloads, and hence headers,
    /// differ between seeds.
    salt: u64,
}

#[derive(Clone, Debug)]
pub struct Miner {
    cfg: NodeConfig,
    params: MinerParams,
    address: Address,
    peers: Vec<Endpoint>,
    formation: Formation,
    peer_set: PeerSet,
    deadline_passed: bool,
    group: Option<GroupState>,
    early: Vec<(Endpoint, Msg)>,
    tip_height: u64,
    tip_hash: HashDigest,
    tip_ts: Tick,
    included: BTreeSet<HashDigest>,
    halted: bool,
    tx_seq: u64,
    solo_pool: Vec<Transaction>,
    last_solo_ts: Tick,
    next_job: u64,
    job: Option<Job>,
    jobs: Vec<JobRecord>,
    blocks_submitted: u64,
    withdrawn: Amount,
    granted: u64,
    denied: u64,
}

impl Miner {
    fn new(cfg: NodeConfig, params: MinerParams, tolerance: Tolerance, peers: Vec<Endpoint>) -> Result<Self, SimError> {
        let rate = calibrate_hashrate(cfg.nonce_delay, params.cost - cfg.nonce_delay, TICKS_PER_SECOND)
            .map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", cfg.id)))?;
        let mut formation = Formation::new(cfg.id, rate, tolerance, params.target_size);
        if cfg.initial_role == Role::Solo {
            formation.go_solo();
        }
        Ok(Miner {
            address: Address::for_node(cfg.id.0),
            cfg,
            params,
            peers,
            formation,
            peer_set: PeerSet::default(),
            deadline_passed: false,
            group: None,
            early: Vec::new(),
            tip_height: 0,
            tip_hash: HashDigest::ZERO,
            tip_ts: 0,
            included: BTreeSet::new(),
            halted: false,
            tx_seq: 0,
            solo_pool: Vec::new(),
            last_solo_ts: 0,
            next_job: 0,
            job: None,
            jobs: Vec::new(),
            blocks_submitted: 0,
            withdrawn: 0,
            granted: 0,
            denied: 0,
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn cost(&self) -> Tick {
        self.params.cost
    }

    pub fn jobs(&self) -> &[JobRecord] {
        &self.jobs
    }

    pub fn group_id(&self) -> Option<GroupId> {
        self.group.as_ref().map(|g| g.descriptor.group_id)
    }

    pub fn etherbase(&self) -> Option<Address> {
        self.group.as_ref().and_then(|g| g.descriptor.shared_etherbase)
    }

    pub fn is_solo(&self) -> bool {
        *self.formation.role() == FormationRole::Solo
    }

    pub fn group_public(&self) -> Option<GroupPublicKey> {
        self.group.as_ref().map(|g| g.public)
    }

    pub fn mutex_held(&self) -> bool {
        self.group.as_ref().is_some_and(|g| g.mutex.is_held())
    }

    pub fn pool(&self) -> Option<&[Transaction]> {
        self.group.as_ref().map(|g| g.pool.ordered())
    }

    pub fn syncs(&self) -> &[SyncRecord] {
        self.group.as_ref().map(|g| g.syncs.as_slice()).unwrap_or(&[])
    }

    pub fn delivered(&self) -> Option<&DeliveredRange> {
        self.group.as_ref().map(|g| &g.delivered)
    }

    pub fn trusted_peers(&self) -> &BTreeSet<NodeId> {
        &self.peer_set.trusted
    }

    /// Nonces the current job has completed by `now`.
    pub fn nonces_completed(&self, now: Tick) -> u64 {
        match &self.job {
            Some(j) if j.state == JobState::Running => ((now - j.start) / self.params.cost).min(j.scanner.position()),
            _ => 0,
        }
    }

    fn local_clock(&self, now: Tick) -> Tick {
        (now as i64 + self.cfg.clock_skew).max(0) as Tick
    }

    fn new_tx(&mut self) -> Transaction {
        self.tx_seq += 1;
        Transaction {
            from: self.address,
            to: self.address,
            amount: 0,
            seq: self.tx_seq,
            payload_digest: HashDigest::of(format!("cpow/tx/{:016x}/{}/{}", self.params.salt, self.cfg.id.0, self.tx_seq).as_bytes()),
        }
    }

    fn begin(&mut self, ctx: &mut Ctx<Msg>) {
        if self.cfg.initial_role == Role::Solo {
            self.start_solo(ctx);
        } else if let Some(req) = self.formation.initiate(ctx.now()) {
            ctx.broadcast(&self.peers, Msg::Collab(req));
        }
    }

    fn apply(&mut self, ctx: &mut Ctx<Msg>, effects: Vec<FormationEffect>) {
        for fx in effects {
            match fx {
                FormationEffect::Accept { leader } => ctx.send(Endpoint::Node(leader), Msg::Accept),
                FormationEffect::Release { to } => {
                    for n in to {
                        ctx.send(Endpoint::Node(n), Msg::Release);
                    }
                }
                FormationEffect::Finalize { group_id, members } => {
                    match finalize_group(group_id, members, self.params.target_size) {
                        Ok(desc) => {
                            self.formation.joined(group_id);
                            ctx.send(Endpoint::Cvrm, Msg::Register(desc));
                        }
                        Err(_) => self.start_solo(ctx),
                    }
                }
                FormationEffect::GoSolo => self.start_solo(ctx),
            }
        }
    }

    fn start_solo(&mut self, ctx: &mut Ctx<Msg>) {
        self.formation.go_solo();
        if self.job.is_none() && !self.halted {
            self.start_solo_job(ctx);
        }
    }

    fn start_solo_job(&mut self, ctx: &mut Ctx<Msg>) {
        let tx = self.new_tx();
        self.solo_pool.push(tx);
        let txs: Vec<Transaction> = self.solo_pool.iter().take(self.params.max_block_txs).cloned().collect();
        let timestamp = self.local_clock(ctx.now()).max(self.tip_ts).max(self.last_solo_ts + 1);
        self.last_solo_ts = timestamp;
        let header = BlockHeader {
            parent: self.tip_hash,
            tx_root: tx_root(&txs),
            timestamp,
            beneficiary: self.address,
            difficulty: self.params.difficulty,
            nonce: 0,
        };
        let range = crate::mining::NonceRange::new(0, self.params.n_total).expect("n_total validated");
        let plan = crate::mining::ScanPlan::new(vec![range], vec![], u64::MAX).expect("non-empty plan");
        self.start_job(ctx, self.tip_height + 1, 0, false, header, txs, plan);
    }

    #[allow(clippy::too_many_arguments)]
    fn start_job(
        &mut self,
        ctx: &mut Ctx<Msg>,
        height: u64,
        round: u32,
        grouped: bool,
        header: BlockHeader,
        txs: Vec<Transaction>,
        plan: crate::mining::ScanPlan,
    ) {
        self.stop_job(ctx.now());
        let id = self.next_job;
        self.next_job += 1;
        let scanner = Scanner::new(&header, self.params.difficulty, plan);
        self.job = Some(Job {
            id,
            height,
            round,
            grouped,
            header,
            txs,
            scanner,
            start: ctx.now(),
            found: None,
            state: JobState::Running,
        });
        self.run_slice(ctx);
    }

    /// Hashes the next slice ahead of virtual time and schedules the moment
    /// the miner would actually get there.
    fn run_slice(&mut self, ctx: &mut Ctx<Msg>) {
        let cost = self.params.cost;
        let Some(job) = self.job.as_mut() else { return };
        let at = match job.scanner.advance(SLICE) {
            ScanStep::Found { nonce, position, .. } => {
                job.found = Some(nonce);
                let at = job.start + (position + 1) * cost;
                ctx.timer(at - ctx.now(), Msg::Found { job: job.id });
                return;
            }
            ScanStep::Progress | ScanStep::Exhausted => job.start + job.scanner.position() * cost,
        };
        ctx.timer(at.saturating_sub(ctx.now()), Msg::Slice { job: job.id });
    }

    fn record(&mut self, end: Tick, nonces: u64, outcome: JobEnd) {
        let job = self.job.as_ref().expect("recording a live job");
        self.jobs.push(JobRecord {
            height: job.height,
            round: job.round,
            grouped: job.grouped,
            start: job.start,
            end,
            nonces,
            outcome,
        });
    }

    /// Ends the current job at `now`, dropping work not yet done in virtual
    /// time, and hands it back for proof building.
    fn stop_job(&mut self, now: Tick) -> Option<Job> {
        let running = self.job.as_ref().is_some_and(|j| j.state == JobState::Running);
        if running {
            let done = self.nonces_completed(now);
            self.record(now, done, JobEnd::Interrupted);
            let job = self.job.as_mut().expect("running");
            job.scanner.truncate(done);
            job.state = JobState::Done;
        }
        self.job.take()
    }

    fn on_slice(&mut self, ctx: &mut Ctx<Msg>, id: u64) {
        let Some(job) = self.job.as_ref() else { return };
        if job.id != id || job.state != JobState::Running {
            return;
        }
        if job.scanner.position() < job.scanner.plan().total_len() {
            self.run_slice(ctx);
            return;
        }
        let (height, round, grouped, nonces) = (job.height, job.round, job.grouped, job.scanner.position());
        self.record(ctx.now(), nonces, JobEnd::Exhausted);
        self.job.as_mut().expect("live").state = JobState::Done;
        if !grouped {
            self.start_solo_job(ctx);
            return;
        }
        let me = self.cfg.id;
        let gs = self.group.as_mut().expect("grouped job");
        ctx.broadcast(&gs.others, Msg::Exhausted { height, round });
        gs.exhausted.entry((height, round)).or_default().insert(me);
        self.check_round_exhausted(ctx);
    }

    fn on_found(&mut self, ctx: &mut Ctx<Msg>, id: u64) {
        let Some(job) = self.job.as_ref() else { return };
        if job.id != id || job.state != JobState::Running {
            return;
        }
        let nonce = job.found.expect("found timer without a find");
        let (grouped, nonces) = (job.grouped, job.scanner.position());
        let mut header = job.header.clone();
        header.nonce = nonce;
        let block = Block { header, transactions: job.txs.clone() };
        self.record(ctx.now(), nonces, JobEnd::Found);
        self.job.as_mut().expect("live").state = JobState::Done;
        if grouped && self.cfg.behavior == Behavior::Freeride {
            return;
        }
        self.blocks_submitted += 1;
        ctx.send(Endpoint::Chain, Msg::SubmitBlock(Box::new(block)));
    }

    fn on_tip(&mut self, ctx: &mut Ctx<Msg>, notice: TipNotice) {
        if notice.height <= self.tip_height {
            return;
        }
        let old = self.stop_job(ctx.now());
        self.tip_height = notice.height;
        self.tip_hash = notice.block.hash();
        self.tip_ts = notice.block.header.timestamp;
        self.included.extend(notice.block.transactions.iter().map(Transaction::digest));
        let included = &self.included;
        self.solo_pool.retain(|tx| !included.contains(&tx.digest()));
        if self.etherbase() == Some(notice.block.header.beneficiary) {
            self.submit_proof(ctx, &notice, old);
        }
        if notice.halted {
            self.halted = true;
            return;
        }
        if self.group.is_some() {
            self.begin_group_round(ctx, notice.height + 1, 0);
        } else if self.is_solo() {
            self.start_solo_job(ctx);
        }
    }

    fn forged(&self, nonce: u64) -> HashDigest {
        HashDigest::of(format!("cpow/forged/{}/{nonce}", self.cfg.id.0).as_bytes())
    }

    fn submit_proof(&mut self, ctx: &mut Ctx<Msg>, notice: &TipNotice, old: Option<Job>) {
        let gs = self.group.as_ref().expect("member");
        let plan = gs.delivered.scan_plan(self.params.stride).expect("delivered range is valid");
        let blank = |h: &BlockHeader| BlockHeader { nonce: 0, ..h.clone() };
        let mut trace = match old {
            Some(j) if j.grouped && j.height == notice.height && j.header == blank(&notice.block.header) => {
                j.scanner.into_trace()
            }
            _ => ProofTrace { claimed: plan.segments().to_vec(), entries: BTreeMap::new(), nonces_tried: 0 },
        };
        match self.cfg.behavior {
            Behavior::Honest => {}
            Behavior::Fabricate { count } => {
                let extra = &gs.delivered.extra;
                let targets: Vec<u64> = trace
                    .entries
                    .keys()
                    .filter(|n| extra.iter().any(|e| e.contains(**n)))
                    .take(count as usize)
                    .copied()
                    .collect();
                for n in targets {
                    trace.entries.insert(n, self.forged(n));
                }
            }
            Behavior::Freeride => {
                let nonces: Vec<u64> = trace.entries.keys().copied().collect();
                for n in nonces {
                    trace.entries.insert(n, self.forged(n));
                }
            }
        }
        let proof = ContributionProof {
            miner: self.cfg.id,
            group_id: gs.descriptor.group_id,
            block_height: notice.height,
            trace,
        };
        ctx.send(Endpoint::Cvrm, Msg::Proof(Box::new(proof)));
    }

    fn activate(&mut self, ctx: &mut Ctx<Msg>, act: Activation) {
        if self.group.is_some() {
            return;
        }
        let me = self.cfg.id;
        let gid = act.descriptor.group_id;
        self.formation.joined(gid);
        self.peer_set.extend_with_group(me, &act.descriptor);
        if self.job.as_ref().is_some_and(|j| !j.grouped) {
            self.stop_job(ctx.now());
        }
        let others = act.descriptor.members.iter().filter(|m| **m != me).map(|m| Endpoint::Node(*m)).collect();
        self.group = Some(GroupState {
            mutex: MutexState::new(me, act.descriptor.members.iter().copied()),
            descriptor: act.descriptor,
            delivered: act.delivered,
            public: act.public,
            others,
            pool: SharedTxPool::default(),
            outbox: Vec::new(),
            round: (0, 0),
            sample_due: false,
            built: None,
            samples: BTreeMap::new(),
            exhausted: BTreeMap::new(),
            syncs: Vec::new(),
        });
        if !self.halted {
            self.begin_group_round(ctx, self.tip_height + 1, 0);
        }
        for (from, msg) in std::mem::take(&mut self.early) {
            self.on_group_msg(ctx, from, msg);
        }
    }

    fn begin_group_round(&mut self, ctx: &mut Ctx<Msg>, height: u64, round: u32) {
        let tx = (round == 0).then(|| self.new_tx());
        let gs = self.group.as_mut().expect("member");
        gs.round = (height, round);
        gs.sample_due = true;
        gs.samples.retain(|k, _| *k >= (height, round));
        gs.exhausted.retain(|k, _| *k >= (height, round));
        gs.outbox.extend(tx);
        self.pump(ctx);
    }

    fn pump(&mut self, ctx: &mut Ctx<Msg>) {
        let gs = self.group.as_mut().expect("member");
        if !gs.outbox.is_empty() && gs.mutex.phase() == crate::coordination::MutexPhase::Released {
            let msgs = gs.mutex.request().expect("released");
            for (to, m) in msgs {
                ctx.send(Endpoint::Node(to), Msg::Mutex(m));
            }
            if gs.mutex.is_held() {
                self.critical(ctx);
                return;
            }
        }
        self.try_sample(ctx);
        self.try_build(ctx);
    }

    /// Inside the critical section: append, replicate, release.
    fn critical(&mut self, ctx: &mut Ctx<Msg>) {
        let gs = self.group.as_mut().expect("member");
        for tx in std::mem::take(&mut gs.outbox) {
            if let Some(index) = gs.pool.pool_insert(tx.clone(), &gs.mutex).expect("holding the mutex") {
                ctx.broadcast(&gs.others, Msg::PoolInsert { index, tx });
            }
        }
        for (to, m) in gs.mutex.release().expect("held") {
            ctx.send(Endpoint::Node(to), Msg::Mutex(m));
        }
        self.try_sample(ctx);
        self.try_build(ctx);
    }

    fn try_sample(&mut self, ctx: &mut Ctx<Msg>) {
        let me = self.cfg.id;
        let reported = self.local_clock(ctx.now());
        let gs = self.group.as_mut().expect("member");
        if !gs.sample_due || !gs.outbox.is_empty() || gs.mutex.is_held() {
            return;
        }
        gs.sample_due = false;
        let (height, round) = gs.round;
        let sample = ClockSample { node: me, reported_time: reported };
        let pool_len = gs.pool.len() as u64;
        ctx.broadcast(&gs.others, Msg::Clock { height, round, sample, pool_len });
        gs.samples.entry((height, round)).or_default().insert(me, (sample, pool_len));
    }

    /// Builds the shared template once every member's sample is in and the
    /// pool holds everything any member had when sampling.
    fn try_build(&mut self, ctx: &mut Ctx<Msg>) {
        let gs = self.group.as_ref().expect("member");
        let (height, round) = gs.round;
        if self.halted || height != self.tip_height + 1 || gs.built == Some((height, round)) {
            return;
        }
        let Some(samples) = gs.samples.get(&(height, round)) else { return };
        if samples.len() < gs.descriptor.members.len() {
            return;
        }
        let cut = samples.values().map(|(_, l)| *l).max().unwrap_or(0) as usize;
        if gs.pool.len() < cut {
            return;
        }
        let clock: Vec<ClockSample> = samples.values().map(|(s, _)| *s).collect();
        let sync = berkeley_sync(&clock, None, height).expect("non-empty");
        let timestamp = group_timestamp(&sync, height, self.tip_ts).expect("same height");
        let txs: Vec<Transaction> = gs.pool.ordered()[..cut]
            .iter()
            .filter(|tx| !self.included.contains(&tx.digest()))
            .take(self.params.max_block_txs)
            .cloned()
            .collect();
        let header = BlockHeader {
            parent: self.tip_hash,
            tx_root: tx_root(&txs),
            timestamp,
            beneficiary: gs.descriptor.shared_etherbase.expect("active group"),
            difficulty: self.params.difficulty,
            nonce: 0,
        };
        let record = SyncRecord {
            height,
            round,
            reference: sync.reference,
            timestamp,
            template: HashDigest::of(&header.canonical_bytes()),
            exact: clock.iter().all(|s| sync.adjusted(s) == Some(sync.reference)),
            discarded: sync.discarded.len(),
            txs: txs.len(),
        };
        let plan = gs.delivered.scan_plan(self.params.stride).expect("delivered range is valid");
        let gs = self.group.as_mut().expect("member");
        gs.syncs.push(record);
        gs.built = Some((height, round));
        self.start_job(ctx, height, round, true, header, txs, plan);
    }

    fn check_round_exhausted(&mut self, ctx: &mut Ctx<Msg>) {
        let gs = self.group.as_ref().expect("member");
        let (height, round) = gs.round;
        let all = gs.exhausted.get(&(height, round)).is_some_and(|s| s.len() == gs.descriptor.members.len());
        if all && !self.halted && height == self.tip_height + 1 {
            self.begin_group_round(ctx, height, round + 1);
        }
    }

    fn on_group_msg(&mut self, ctx: &mut Ctx<Msg>, from: Endpoint, msg: Msg) {
        let Endpoint::Node(peer) = from else { return };
        let Some(gs) = self.group.as_mut() else {
            self.early.push((from, msg));
            return;
        };
        if !gs.descriptor.is_member(peer) {
            return;
        }
        match msg {
            Msg::Mutex(MutexMsg::Request(stamp)) => {
                if let Some(reply) = gs.mutex.on_request(peer, stamp) {
                    ctx.send(from, Msg::Mutex(reply));
                }
            }
            Msg::Mutex(MutexMsg::Reply) => {
                if gs.mutex.on_reply(peer) {
                    self.critical(ctx);
                }
            }
            Msg::PoolInsert { index, tx } => {
                gs.pool.insert_at(index, tx);
                self.try_build(ctx);
            }
            Msg::Clock { height, round, sample, pool_len } => {
                if (height, round) >= gs.round {
                    gs.samples.entry((height, round)).or_default().insert(sample.node, (sample, pool_len));
                    self.try_build(ctx);
                }
            }
            Msg::Exhausted { height, round } => {
                if (height, round) >= gs.round {
                    gs.exhausted.entry((height, round)).or_default().insert(peer);
                    self.check_round_exhausted(ctx);
                }
            }
            _ => {}
        }
    }
}

impl Process for Miner {
    type Msg = Msg;

    fn start(&mut self, ctx: &mut Ctx<Msg>) {
        ctx.timer(self.params.initiate_delay, Msg::Begin);
        if self.cfg.initial_role == Role::CollaboratorSeeking {
            ctx.timer(self.params.initiate_delay + self.params.formation_deadline, Msg::FormationDeadline);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<Msg>, from: Endpoint, msg: Msg) {
        match msg {
            Msg::Begin => self.begin(ctx),
            Msg::FormationDeadline => {
                self.deadline_passed = true;
                let fx = self.formation.handle_deadline();
                self.apply(ctx, fx);
            }
            Msg::Collab(req) => {
                let fx = self.formation.handle_request(&req);
                self.apply(ctx, fx);
            }
            Msg::Accept => {
                if let Endpoint::Node(n) = from {
                    let fx = self.formation.handle_accept(n);
                    self.apply(ctx, fx);
                }
            }
            Msg::Release => {
                if let Endpoint::Node(n) = from {
                    let fx = self.formation.handle_release(n);
                    self.apply(ctx, fx);
                    if *self.formation.role() == FormationRole::Idle {
                        if self.deadline_passed {
                            self.start_solo(ctx);
                        } else if let Some(req) = self.formation.initiate(ctx.now()) {
                            ctx.broadcast(&self.peers, Msg::Collab(req));
                        }
                    }
                }
            }
            Msg::Activated(act) => self.activate(ctx, *act),
            m @ (Msg::Mutex(_) | Msg::PoolInsert { .. } | Msg::Clock { .. } | Msg::Exhausted { .. }) => {
                self.on_group_msg(ctx, from, m)
            }
            Msg::Slice { job } => self.on_slice(ctx, job),
            Msg::Found { job } => self.on_found(ctx, job),
            Msg::NewTip(n) => self.on_tip(ctx, *n),
            Msg::RewardNotice { group, amount, .. } => {
                // Adversaries ask even when they were paid nothing.
                if amount > 0 || !self.cfg.behavior.is_honest() {
                    let amount = amount.max(1);
                    ctx.send(Endpoint::Cvrm, Msg::WithdrawRequest { group, amount, to: self.address });
                }
            }
            Msg::WithdrawOutcome { amount, granted } => {
                if granted {
                    self.granted += 1;
                    self.withdrawn += amount;
                } else {
                    self.denied += 1;
                }
            }
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
struct Settlement {
    header: BlockHeader,
    proofs: Vec<ContributionProof>,
    done: bool,
}

/// Hosts the verifier service. Only it submits withdrawals, so each group's
/// sequence numbers reach the chain in order.
#[derive(Clone, Debug)]
pub struct CvrmActor {
    service: Cvrm,
    rng: ChaCha8Rng,
    block_reward: Amount,
    deadline: Tick,
    settlements: BTreeMap<(GroupId, u64), Settlement>,
    early: BTreeMap<(GroupId, u64), Vec<ContributionProof>>,
    ready: BTreeMap<(GroupId, u64), VerificationVerdict>,
    reports: BTreeMap<Address, OracleReport>,
    poll_outstanding: bool,
    frozen: Vec<(GroupId, u64)>,
    errors: Vec<String>,
}

impl CvrmActor {
    fn new(config: CvrmConfig, block_reward: Amount, deadline: Tick, seed: u64) -> Self {
        CvrmActor {
            service: Cvrm::new(config),
            rng: ChaCha8Rng::seed_from_u64(seed),
            block_reward,
            deadline,
            settlements: BTreeMap::new(),
            early: BTreeMap::new(),
            ready: BTreeMap::new(),
            reports: BTreeMap::new(),
            poll_outstanding: false,
            frozen: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn service(&self) -> &Cvrm {
        &self.service
    }

    pub fn frozen(&self) -> &[(GroupId, u64)] {
        &self.frozen
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    fn maybe_verify(&mut self, ctx: &mut Ctx<Msg>, key: (GroupId, u64), force: bool) {
        let Some(record) = self.service.record(key.0) else { return };
        let members = record.descriptor.members.len();
        let Some(s) = self.settlements.get_mut(&key) else { return };
        if s.done {
            return;
        }
        let submitted: BTreeSet<NodeId> = s.proofs.iter().map(|p| p.miner).collect();
        if !force && submitted.len() < members {
            return;
        }
        s.done = true;
        let (header, proofs) = (s.header.clone(), std::mem::take(&mut s.proofs));
        match self.service.verify(key.0, &proofs, &header, key.1, &mut self.rng, ctx.now()) {
            Ok(v) => {
                self.ready.insert(key, v);
                self.try_settle(ctx);
            }
            Err(e) => self.errors.push(format!("verify {} at {}: {e}", key.0, key.1)),
        }
    }

    fn try_settle(&mut self, ctx: &mut Ctx<Msg>) {
        let mut need_poll = false;
        for key in self.ready.keys().copied().collect::<Vec<_>>() {
            let etherbase = self.service.record(key.0).expect("registered").etherbase();
            let report = match self.reports.get(&etherbase) {
                Some(r) if r.height >= key.1 => *r,
                _ => {
                    need_poll = true;
                    continue;
                }
            };
            let verdict = self.ready.remove(&key).expect("listed");
            match self.service.settle(key.0, &verdict, &report, self.block_reward, ctx.now()) {
                Ok(entries) => {
                    for e in entries {
                        let notice = Msg::RewardNotice { group: key.0, height: key.1, amount: e.amount };
                        ctx.send(Endpoint::Node(e.miner), notice);
                    }
                }
                Err(CvrmError::EmptyHonestSet) => self.frozen.push(key),
                Err(e) => self.errors.push(format!("settle {} at {}: {e}", key.0, key.1)),
            }
        }
        if need_poll && !self.poll_outstanding {
            self.poll_outstanding = true;
            ctx.send(Endpoint::Oracle, Msg::PollNow);
        }
    }

    fn withdraw(&mut self, ctx: &mut Ctx<Msg>, miner: NodeId, group: GroupId, amount: Amount, to: Address) {
        let Some(record) = self.service.record(group) else {
            ctx.send(Endpoint::Node(miner), Msg::WithdrawOutcome { amount, granted: false });
            return;
        };
        let public = record.public.public;
        // An ineligible request still goes through authorization so the
        // refusal lands in the audit log.
        let tx = self.service.withdrawal_tx(group, miner, amount, to).unwrap_or(Transaction {
            from: record.etherbase(),
            to,
            amount,
            seq: 0,
            payload_digest: HashDigest::ZERO,
        });
        let granted = match self.service.authorize_withdrawal(group, miner, &tx, &mut self.rng, ctx.now()) {
            Ok(sig) => {
                ctx.send(Endpoint::Chain, Msg::SubmitWithdrawal(Box::new(Withdrawal { tx, sig, public })));
                true
            }
            Err(_) => false,
        };
        ctx.send(Endpoint::Node(miner), Msg::WithdrawOutcome { amount, granted });
    }
}

impl Process for CvrmActor {
    type Msg = Msg;

    fn handle(&mut self, ctx: &mut Ctx<Msg>, from: Endpoint, msg: Msg) {
        match msg {
            Msg::Register(desc) => match self.service.create_group(desc, &mut self.rng, ctx.now()) {
                Ok(act) => {
                    for (m, delivered) in act.delivered {
                        let a = Activation { descriptor: act.descriptor.clone(), delivered, public: act.public.public };
                        ctx.send(Endpoint::Node(m), Msg::Activated(Box::new(a)));
                    }
                    ctx.send(Endpoint::Oracle, Msg::Watch(act.public.public.etherbase()));
                }
                Err(e) => self.errors.push(format!("register from {from}: {e}")),
            },
            Msg::NewTip(n) => {
                if let Some(g) = self.service.group_of_etherbase(&n.block.header.beneficiary) {
                    let key = (g, n.height);
                    let proofs = self.early.remove(&key).unwrap_or_default();
                    self.settlements.insert(key, Settlement { header: n.block.header.clone(), proofs, done: false });
                    ctx.timer(self.deadline, Msg::SettleDeadline { group: g, height: n.height });
                    self.maybe_verify(ctx, key, false);
                }
            }
            Msg::Proof(p) => {
                let key = (p.group_id, p.block_height);
                match self.settlements.get_mut(&key) {
                    Some(s) if !s.done => {
                        s.proofs.push(*p);
                        self.maybe_verify(ctx, key, false);
                    }
                    Some(_) => {}
                    None => self.early.entry(key).or_default().push(*p),
                }
            }
            Msg::SettleDeadline { group, height } => self.maybe_verify(ctx, (group, height), true),
            Msg::Reports(rs) => {
                self.poll_outstanding = false;
                for r in rs {
                    let newer = self.reports.get(&r.etherbase).map_or(true, |old| r.height >= old.height);
                    if newer {
                        self.reports.insert(r.etherbase, r);
                    }
                }
                self.try_settle(ctx);
            }
            Msg::WithdrawRequest { group, amount, to } => {
                if let Endpoint::Node(m) = from {
                    self.withdraw(ctx, m, group, amount, to);
                }
            }
            _ => {}
        }
    }
}

/// Keeps its own replica of the chain and reports group balances.
#[derive(Clone, Debug)]
pub struct OracleActor {
    replica: Ledger,
    block_reward: Amount,
    watched: BTreeSet<Address>,
    oracle: Oracle,
    halted: bool,
    errors: Vec<String>,
}

impl OracleActor {
    pub fn replica(&self) -> &Ledger {
        &self.replica
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }
}

impl Process for OracleActor {
    type Msg = Msg;

    fn start(&mut self, ctx: &mut Ctx<Msg>) {
        ctx.timer(self.oracle.interval, Msg::OracleTick);
    }

    fn handle(&mut self, ctx: &mut Ctx<Msg>, _from: Endpoint, msg: Msg) {
        match msg {
            Msg::NewTip(n) => {
                if let Err(e) = self.replica.apply_block(n.block, self.block_reward) {
                    self.errors.push(format!("replica block {}: {e}", n.height));
                }
                self.halted |= n.halted;
            }
            Msg::WithdrawalApplied(w) => {
                if let Err(e) = self.replica.apply_withdrawal(&w.tx, &w.sig, &w.public) {
                    self.errors.push(format!("replica withdrawal: {e}"));
                }
            }
            Msg::Watch(a) => {
                self.watched.insert(a);
            }
            Msg::OracleTick => {
                if self.halted {
                    return;
                }
                if let Some(reports) = self.oracle.poll(&self.replica, &self.watched, ctx.now()) {
                    if !reports.is_empty() {
                        ctx.send(Endpoint::Cvrm, Msg::Reports(reports));
                    }
                }
                ctx.timer(self.oracle.interval, Msg::OracleTick);
            }
            Msg::PollNow => {
                ctx.send(Endpoint::Cvrm, Msg::Reports(oracle_poll(&self.replica, &self.watched, ctx.now())));
            }
            _ => {}
        }
    }
}

/// The authoritative ledger plus first-come ordering of submissions.
#[derive(Clone, Debug)]
pub struct ChainActor {
    ledger: Ledger,
    block_reward: Amount,
    target: u64,
    halted: bool,
    subscribers: Vec<Endpoint>,
    finders: Vec<NodeId>,
    block_times: Vec<Tick>,
    stale: u64,
    rejected: Vec<String>,
    withdrawals: u64,
    withdrawal_errors: Vec<String>,
}

impl ChainActor {
    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Who found each block, by height minus one.
    pub fn finders(&self) -> &[NodeId] {
        &self.finders
    }
}

impl Process for ChainActor {
    type Msg = Msg;

    fn handle(&mut self, ctx: &mut Ctx<Msg>, from: Endpoint, msg: Msg) {
        match msg {
            Msg::SubmitBlock(block) => {
                let Endpoint::Node(finder) = from else { return };
                if self.halted || block.header.parent != self.ledger.tip() {
                    self.stale += 1;
                    return;
                }
                match self.ledger.apply_block((*block).clone(), self.block_reward) {
                    Ok(()) => {
                        self.finders.push(finder);
                        self.block_times.push(ctx.now());
                        let height = self.ledger.height();
                        self.halted = height >= self.target;
                        let notice = TipNotice { block: *block, height, halted: self.halted };
                        for s in &self.subscribers {
                            ctx.send(*s, Msg::NewTip(Box::new(notice.clone())));
                        }
                    }
                    Err(e) => self.rejected.push(format!("from {finder}: {e}")),
                }
            }
            Msg::SubmitWithdrawal(w) => match self.ledger.apply_withdrawal(&w.tx, &w.sig, &w.public) {
                Ok(()) => {
                    self.withdrawals += 1;
                    ctx.send(Endpoint::Oracle, Msg::WithdrawalApplied(w));
                }
                Err(e) => self.withdrawal_errors.push(e.to_string()),
            },
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
pub enum Actor {
    Miner(Box<Miner>),
    Cvrm(Box<CvrmActor>),
    Oracle(Box<OracleActor>),
    Chain(Box<ChainActor>),
}

impl Actor {
    pub fn as_miner(&self) -> Option<&Miner> {
        match self {
            Actor::Miner(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_cvrm(&self) -> Option<&CvrmActor> {
        match self {
            Actor::Cvrm(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_oracle(&self) -> Option<&OracleActor> {
        match self {
            Actor::Oracle(o) => Some(o),
            _ => None,
        }
    }

    pub fn as_chain(&self) -> Option<&ChainActor> {
        match self {
            Actor::Chain(c) => Some(c),
            _ => None,
        }
    }
}

impl Process for Actor {
    type Msg = Msg;

    fn start(&mut self, ctx: &mut Ctx<Msg>) {
        match self {
            Actor::Miner(m) => m.start(ctx),
            Actor::Cvrm(c) => c.start(ctx),
            Actor::Oracle(o) => o.start(ctx),
            Actor::Chain(c) => c.start(ctx),
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<Msg>, from: Endpoint, msg: Msg) {
        match self {
            Actor::Miner(m) => m.handle(ctx, from, msg),
            Actor::Cvrm(c) => c.handle(ctx, from, msg),
            Actor::Oracle(o) => o.handle(ctx, from, msg),
            Actor::Chain(c) => c.handle(ctx, from, msg),
        }
    }
}

fn miners(procs: &BTreeMap<Endpoint, Actor>) -> impl Iterator<Item = &Miner> {
    procs.values().filter_map(Actor::as_miner)
}

/// At most one member of any group inside the critical section.
pub fn mutex_safety(procs: &BTreeMap<Endpoint, Actor>) -> bool {
    let mut holders: BTreeSet<GroupId> = BTreeSet::new();
    miners(procs).filter(|m| m.mutex_held()).all(|m| holders.insert(m.group_id().expect("held implies member")))
}

/// No miner in two registered groups, and every member's view matches the
/// registry.
pub fn membership_safety(procs: &BTreeMap<Endpoint, Actor>) -> bool {
    let Some(cvrm) = procs.get(&Endpoint::Cvrm).and_then(Actor::as_cvrm) else { return true };
    let mut seen = BTreeSet::new();
    for r in cvrm.service().records() {
        if !r.descriptor.members.iter().all(|m| seen.insert(*m)) {
            return false;
        }
    }
    miners(procs).all(|m| match m.group_id() {
        None => true,
        Some(g) => cvrm.service().record(g).is_some_and(|r| r.descriptor.is_member(m.id())),
    })
}

/// Builds the full actor set for a scenario without running it.
pub fn build_simulation(cfg: &ScenarioConfig, seed: u64, mode: ExecMode) -> Result<Simulation<Actor>, SimError> {
    cfg.validate()?;
    let difficulty = Difficulty::new(cfg.difficulty).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    let tolerance = Tolerance::new(cfg.tolerance).ok_or_else(|| SimError::ConfigInvalid("bad tolerance".into()))?;
    let mut setup = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut sim = Simulation::new(cfg.latency, setup.gen()).with_mode(mode);
    let all: Vec<Endpoint> = cfg.nodes.iter().map(|n| Endpoint::Node(n.id)).collect();
    for node in &cfg.nodes {
        let initiate_delay = match node.initial_role {
            Role::Solo => 0,
            Role::CollaboratorSeeking => setup.gen_range(0..=cfg.initiate_jitter),
        };
        let params = MinerParams {
            difficulty,
            n_total: cfg.n_total,
            stride: cfg.sample_stride,
            cost: cfg.cost_of(node),
            max_block_txs: cfg.max_block_txs,
            initiate_delay,
            formation_deadline: cfg.formation_deadline,
            target_size: cfg.group_target_size,
            salt: setup.gen(),
        };
        let me = Endpoint::Node(node.id);
        let peers = all.iter().copied().filter(|e| *e != me).collect();
        let miner = Miner::new(node.clone(), params, tolerance, peers)?;
        sim.add(me, Actor::Miner(Box::new(miner)));
    }
    let cvrm_config = CvrmConfig {
        n_total: cfg.n_total,
        overlap_fraction: cfg.overlap_fraction,
        audit_window: cfg.audit_window,
        sample_stride: cfg.sample_stride,
        audit_probability: cfg.audit_probability,
        threshold: cfg.threshold,
    };
    let cvrm = CvrmActor::new(cvrm_config, cfg.block_reward, cfg.settlement_deadline, setup.gen());
    sim.add(Endpoint::Cvrm, Actor::Cvrm(Box::new(cvrm)));
    sim.add(
        Endpoint::Oracle,
        Actor::Oracle(Box::new(OracleActor {
            replica: Ledger::new(difficulty),
            block_reward: cfg.block_reward,
            watched: BTreeSet::new(),
            oracle: Oracle::new(cfg.oracle_interval),
            halted: false,
            errors: Vec::new(),
        })),
    );
    let mut subscribers = all;
    subscribers.extend([Endpoint::Cvrm, Endpoint::Oracle]);
    sim.add(
        Endpoint::Chain,
        Actor::Chain(Box::new(ChainActor {
            ledger: Ledger::new(difficulty),
            block_reward: cfg.block_reward,
            target: cfg.blocks_target,
            halted: false,
            subscribers,
            finders: Vec::new(),
            block_times: Vec::new(),
            stale: 0,
            rejected: Vec::new(),
            withdrawals: 0,
            withdrawal_errors: Vec::new(),
        })),
    );
    sim.add_invariant("mutex-safety", mutex_safety);
    sim.add_invariant("membership-safety", membership_safety);
    Ok(sim)
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeReport {
    pub id: NodeId,
    pub class: NodeClass,
    pub initial_role: Role,
    pub behavior: Behavior,
    pub group: Option<GroupId>,
    pub address: Address,
    /// Ticks per nonce.
    pub cost: Tick,
    /// Personal balance at the end of the run.
    #[serde(with = "crate::chain::amount_string")]
    pub balance: Amount,
    pub blocks_found: u64,
    pub nonces: u64,
    pub mining_ticks: Tick,
    pub withdrawals_granted: u64,
    pub withdrawals_denied: u64,
    pub jobs: Vec<JobRecord>,
    pub syncs: Vec<SyncRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group_id: GroupId,
    pub members: Vec<NodeId>,
    pub etherbase: Address,
    /// Funds still held by the group account.
    #[serde(with = "crate::chain::amount_string")]
    pub balance: Amount,
    pub verdicts: usize,
    pub frozen: usize,
    /// Every member ended with the same pool log.
    pub pools_agree: bool,
    /// Members that built a template for the same round built the same one.
    pub templates_agree: bool,
    pub sync_exact: bool,
    pub pool_len: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationResult {
    pub name: String,
    pub seed: u64,
    pub events: u64,
    pub final_tick: Tick,
    pub ledger: Ledger,
    pub nodes: Vec<NodeReport>,
    pub groups: Vec<GroupReport>,
    pub audit: Vec<AuditRecord>,
    pub finders: Vec<NodeId>,
    /// When the chain accepted each block.
    pub block_times: Vec<Tick>,
    pub stale_blocks: u64,
    pub withdrawals_applied: u64,
    /// Anything the chain, oracle or CVRM refused unexpectedly.
    pub errors: Vec<String>,
    pub replica_agrees: bool,
    pub audit_consistent: bool,
}

impl SimulationResult {
    pub fn node(&self, id: NodeId) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

/// Gathers the outputs of a finished simulation.
pub fn collect(cfg: &ScenarioConfig, seed: u64, sim: Simulation<Actor>, summary: RunSummary) -> SimulationResult {
    let procs = sim.into_processes();
    let chain = procs[&Endpoint::Chain].as_chain().expect("chain");
    let cvrm = procs[&Endpoint::Cvrm].as_cvrm().expect("cvrm");
    let oracle = procs[&Endpoint::Oracle].as_oracle().expect("oracle");
    let ledger = chain.ledger.clone();
    let nodes: Vec<NodeReport> = miners(&procs)
        .map(|m| NodeReport {
            id: m.id(),
            class: m.cfg.class,
            initial_role: m.cfg.initial_role,
            behavior: m.cfg.behavior,
            group: m.group_id(),
            address: m.address,
            cost: m.params.cost,
            balance: ledger.balance(&m.address),
            blocks_found: chain.finders.iter().filter(|f| **f == m.id()).count() as u64,
            nonces: m.jobs.iter().map(|j| j.nonces).sum(),
            mining_ticks: m.jobs.iter().map(|j| j.end - j.start).sum(),
            withdrawals_granted: m.granted,
            withdrawals_denied: m.denied,
            jobs: m.jobs.clone(),
            syncs: m.syncs().to_vec(),
        })
        .collect();
    let by_id: BTreeMap<NodeId, &Miner> = miners(&procs).map(|m| (m.id(), m)).collect();
    let groups = cvrm
        .service()
        .records()
        .map(|r| {
            let id = r.descriptor.group_id;
            let members: Vec<&Miner> = r.descriptor.members.iter().filter_map(|m| by_id.get(m).copied()).collect();
            let pools: BTreeSet<Vec<HashDigest>> = members
                .iter()
                .map(|m| m.pool().unwrap_or(&[]).iter().map(Transaction::digest).collect())
                .collect();
            let mut templates: BTreeMap<(u64, u32), BTreeSet<HashDigest>> = BTreeMap::new();
            for s in members.iter().flat_map(|m| m.syncs()) {
                templates.entry((s.height, s.round)).or_default().insert(s.template);
            }
            GroupReport {
                group_id: id,
                members: r.descriptor.members.clone(),
                etherbase: r.etherbase(),
                balance: ledger.balance(&r.etherbase()),
                verdicts: cvrm.service().verdicts(id).len(),
                frozen: cvrm.frozen().iter().filter(|(g, _)| *g == id).count(),
                pools_agree: pools.len() == 1,
                templates_agree: templates.values().all(|t| t.len() == 1),
                sync_exact: members.iter().flat_map(|m| m.syncs()).all(|s| s.exact),
                pool_len: members.first().and_then(|m| m.pool()).map_or(0, <[Transaction]>::len),
            }
        })
        .collect();
    let mut errors: Vec<String> = chain.rejected.clone();
    errors.extend(chain.withdrawal_errors.iter().cloned());
    errors.extend(cvrm.errors().iter().cloned());
    errors.extend(oracle.errors().iter().cloned());
    SimulationResult {
        name: cfg.name.clone(),
        seed,
        events: summary.events,
        final_tick: summary.final_tick,
        replica_agrees: oracle.replica().state_digest() == ledger.state_digest(),
        audit_consistent: cvrm.service().audit_is_consistent(),
        audit: cvrm.service().audit_log().to_vec(),
        finders: chain.finders.clone(),
        block_times: chain.block_times.clone(),
        stale_blocks: chain.stale,
        withdrawals_applied: chain.withdrawals,
        ledger,
        nodes,
        groups,
        errors,
    }
}

/// Runs a scenario to quiescence. Falling short of the block target is a
/// deadlock.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, mode: ExecMode) -> Result<SimulationResult, SimError> {
    let mut sim = build_simulation(cfg, seed, mode)?;
    let summary = sim.run(cfg.max_ticks)?;
    let result = collect(cfg, seed, sim, summary);
    if result.ledger.height() < cfg.blocks_target {
        return Err(SimError::Deadlock {
            at: result.final_tick,
            detail: format!("chain stopped at height {} of {}", result.ledger.height(), cfg.blocks_target),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(blocks: u64) -> ScenarioConfig {
        ScenarioConfig { blocks_target: blocks, ..ScenarioConfig::desk() }
    }

    #[test]
    fn desk_reaches_target_with_sound_ledger() {
        let r = run_scenario(&small(8), 1, ExecMode::Reference).unwrap();
        assert_eq!(r.ledger.height(), 8);
        r.ledger.verify_chain().unwrap();
        assert!(r.ledger.is_conserved());
        assert!(r.errors.is_empty(), "{:?}", r.errors);
        assert!(r.replica_agrees);
        assert!(r.audit_consistent);
        assert_eq!(r.groups.len(), 1);
        let g = &r.groups[0];
        assert_eq!(g.members.len(), 6);
        assert!(g.pools_agree && g.templates_agree && g.sync_exact);
    }

    #[test]
    fn same_seed_same_result() {
        let a = run_scenario(&small(4), 3, ExecMode::Reference).unwrap();
        let b = run_scenario(&small(4), 3, ExecMode::Reference).unwrap();
        assert_eq!(a.ledger.state_digest(), b.ledger.state_digest());
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn sharded_matches_reference() {
        let a = run_scenario(&small(4), 2, ExecMode::Reference).unwrap();
        let b = run_scenario(&small(4), 2, ExecMode::Sharded { workers: 4 }).unwrap();
        assert_eq!(a.ledger.state_digest(), b.ledger.state_digest());
        assert_eq!(a.finders, b.finders);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn all_solo_forms_no_group() {
        let r = run_scenario(&small(4).all_solo(), 1, ExecMode::Reference).unwrap();
        assert!(r.groups.is_empty());
        let held: Amount = r.nodes.iter().map(|n| n.balance).sum();
        assert_eq!(held, r.ledger.minted());
    }

    #[test]
    fn lone_seeker_falls_back_to_solo() {
        let mut cfg = small(2);
        cfg.nodes[3].initial_role = Role::CollaboratorSeeking;
        cfg.nodes[3].nonce_delay = 100_000;
        for n in cfg.nodes.iter_mut().skip(4) {
            n.initial_role = Role::Solo;
        }
        let r = run_scenario(&cfg, 1, ExecMode::Reference).unwrap();
        assert!(r.groups.is_empty());
    }

    #[test]
    fn compute_fidelity() {
        // One miner and an unwinnable target: nonces done is elapsed / cost.
        let mut cfg = ScenarioConfig::equal_group(1, 700).all_solo();
        cfg.difficulty = 256;
        cfg.n_total = 1 << 30;
        let mut sim = build_simulation(&cfg, 1, ExecMode::Reference).unwrap();
        let horizon = 3 * TICKS_PER_SECOND + 123;
        sim.run_to(horizon).unwrap();
        let m = sim.processes()[&Endpoint::Node(NodeId(0))].as_miner().unwrap();
        assert_eq!(m.nonces_completed(horizon), horizon / 700);
    }
}
