//! Contribution verifier and reward manager.
//!
//! The CVRM deals each group's key shares, keeps the secret overlap map,
//! cross-checks submitted traces on the overlaps, splits each block reward
//! among honest members by evidenced work, and signs withdrawals by
//! reconstructing the group key for the duration of one signature.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{hash_header_bytes, Address, BlockHeader, HashDigest, Ledger, Transaction};
use crate::group::{divide_nonce_range, DeliveredRange, GroupDescriptor, GroupError, GroupId, RangeAssignment};
use crate::mining::{ProofTrace, ScanPlan};
use crate::threshold::{
    dkg, majority_threshold, reconstruct, sign_withdrawal, GroupKeyPair, SecretShare, SignedWithdrawal, ThresholdError,
};
use crate::{Amount, NodeId, Tick};

pub const DEFAULT_AUDIT_PROBABILITY: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CvrmError {
    #[error("group {0} is already registered")]
    DuplicateGroup(GroupId),
    #[error("{have} shares for {need} members")]
    MissingShares { have: usize, need: usize },
    #[error("unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("proof for height {got}, expected {expected}")]
    HeightMismatch { expected: u64, got: u64 },
    #[error("no honest contributor; pool frozen")]
    EmptyHonestSet,
    #[error("{0} is not eligible for a withdrawal")]
    NotEligible(NodeId),
    #[error("requested {requested} exceeds unwithdrawn entitlement {available}")]
    ExceedsShare { requested: Amount, available: Amount },
    #[error("withdrawal must come from the group account {expected}")]
    WrongSource { expected: Address },
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Registry entry for one group. Holds the private overlap map, so it is
/// deliberately not serializable.
#[derive(Clone, Debug)]
pub struct GroupRecord {
    pub descriptor: GroupDescriptor,
    pub public: GroupKeyPair,
    pub shares: BTreeMap<NodeId, SecretShare>,
    pub assignment: RangeAssignment,
    pub sample_stride: u64,
    pub registered_at: Tick,
}

impl GroupRecord {
    pub fn etherbase(&self) -> Address {
        self.public.public.etherbase()
    }

    pub fn delivered(&self, miner: NodeId) -> Option<DeliveredRange> {
        self.assignment.delivered(miner)
    }

    fn plan_for(&self, miner: NodeId) -> Option<ScanPlan> {
        self.delivered(miner)?.scan_plan(self.sample_stride).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionProof {
    pub miner: NodeId,
    pub group_id: GroupId,
    pub block_height: u64,
    pub trace: ProofTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub nonce: u64,
    pub submitted: HashDigest,
    pub recomputed: HashDigest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub block_height: u64,
    pub honest: BTreeSet<NodeId>,
    pub dishonest: BTreeSet<NodeId>,
    pub unverifiable: BTreeSet<NodeId>,
    pub evidence: BTreeMap<NodeId, Vec<Evidence>>,
    /// Valid trace entries per honest miner; the reward weight.
    pub coverage: BTreeMap<NodeId, u64>,
    /// Digests recomputed by the verifier (mismatches plus random audits).
    pub recomputed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleReport {
    pub etherbase: Address,
    #[serde(with = "crate::chain::amount_string")]
    pub balance: Amount,
    pub at: Tick,
    /// Chain height the balance was read at.
    pub height: u64,
    /// Highest withdrawal sequence number applied from this account.
    pub last_seq: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub miner: NodeId,
    #[serde(with = "crate::chain::amount_string")]
    pub amount: Amount,
    pub withdrawn: bool,
}

/// One line of the append-only audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub tick: Tick,
    pub event: String,
    pub group_id: Option<GroupId>,
    pub miner: Option<NodeId>,
    pub details: serde_json::Value,
}

pub fn write_audit_log(records: &[AuditRecord], mut out: impl Write) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads every registered etherbase's balance straight off the ledger.
pub fn oracle_poll<'a>(ledger: &Ledger, etherbases: impl IntoIterator<Item = &'a Address>, at: Tick) -> Vec<OracleReport> {
    etherbases
        .into_iter()
        .map(|e| OracleReport {
            etherbase: *e,
            balance: ledger.balance(e),
            at,
            height: ledger.height(),
            last_seq: ledger.last_seq(e),
        })
        .collect()
}

/// Polls at a fixed interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Oracle {
    pub interval: Tick,
    next_due: Tick,
}

impl Oracle {
    pub fn new(interval: Tick) -> Self {
        Oracle { interval: interval.max(1), next_due: 0 }
    }

    /// Reports if a poll is due at `now`, else nothing.
    pub fn poll<'a>(
        &mut self,
        ledger: &Ledger,
        etherbases: impl IntoIterator<Item = &'a Address>,
        now: Tick,
    ) -> Option<Vec<OracleReport>> {
        if now < self.next_due {
            return None;
        }
        self.next_due = now + self.interval;
        Some(oracle_poll(ledger, etherbases, now))
    }
}

/// Checks a trace's shape against the miner's assignment. Returns the valid
/// entry count, or `None` if the trace claims something it could not have
/// computed or omits an overlap nonce inside its scanned prefix.
fn check_shape(record: &GroupRecord, miner: NodeId, trace: &ProofTrace) -> Option<u64> {
    let plan = record.plan_for(miner)?;
    if trace.claimed != plan.segments() || trace.nonces_tried > plan.total_len() {
        return None;
    }
    let within = |n: u64| plan.position_of(n).is_some_and(|p| p < trace.nonces_tried);
    if !trace.entries.keys().all(|n| within(*n)) {
        return None;
    }
    for o in record.assignment.overlaps_of(miner) {
        if o.segment.iter().any(|n| within(n) && !trace.entries.contains_key(&n)) {
            return None;
        }
    }
    Some(trace.entries.len() as u64)
}

/// Cross-checks every overlap and classifies each submitter.
///
/// Nonces present in both partners' traces are compared; a mismatch
/// triggers recomputation and whichever side disagrees with the true digest
/// is dishonest. A digest whose partner has no counterpart (the partner was
/// interrupted before reaching it, or sent nothing) is always recomputed.
/// Matching pairs are recomputed with probability `audit_probability`, which
/// catches partners who agree on the same fabrication.
pub fn verify_contributions(
    record: &GroupRecord,
    proofs: &[ContributionProof],
    header: &BlockHeader,
    block_height: u64,
    audit_probability: f64,
    rng: &mut impl RngCore,
) -> Result<VerificationVerdict, CvrmError> {
    let mut verdict = VerificationVerdict { block_height, ..Default::default() };
    let mut traces: BTreeMap<NodeId, &ProofTrace> = BTreeMap::new();
    for p in proofs {
        if p.group_id != record.descriptor.group_id {
            return Err(CvrmError::UnknownGroup(p.group_id));
        }
        if p.block_height != block_height {
            return Err(CvrmError::HeightMismatch { expected: block_height, got: p.block_height });
        }
        if !record.descriptor.is_member(p.miner) || traces.contains_key(&p.miner) {
            continue;
        }
        traces.insert(p.miner, &p.trace);
        match check_shape(record, p.miner, &p.trace) {
            Some(c) => {
                verdict.coverage.insert(p.miner, c);
            }
            None => {
                verdict.unverifiable.insert(p.miner);
            }
        }
    }

    let header_bytes = header.canonical_bytes();
    let truth = |nonce: u64, verdict: &mut VerificationVerdict| {
        verdict.recomputed += 1;
        hash_header_bytes(&header_bytes, nonce)
    };
    let accuse = |miner: NodeId, ev: Evidence, verdict: &mut VerificationVerdict| {
        verdict.dishonest.insert(miner);
        verdict.evidence.entry(miner).or_default().push(ev);
    };

    for o in &record.assignment.overlaps {
        let (a, b) = (traces.get(&o.carver), traces.get(&o.owner));
        for x in o.segment.iter() {
            let da = a.and_then(|t| t.entries.get(&x));
            let db = b.and_then(|t| t.entries.get(&x));
            if let (Some(da), Some(db)) = (da, db) {
                if da != db {
                    let f = truth(x, &mut verdict);
                    for (miner, d) in [(o.carver, da), (o.owner, db)] {
                        if *d != f {
                            accuse(miner, Evidence { nonce: x, submitted: *d, recomputed: f }, &mut verdict);
                        }
                    }
                    continue;
                }
            }
            // A digest nobody can vouch for is always recomputed; a matching
            // pair only with the audit probability.
            let unmatched = da.is_none() || db.is_none();
            for (miner, d) in [(o.carver, da), (o.owner, db)] {
                let Some(d) = d else { continue };
                if unmatched || (audit_probability > 0.0 && rng.gen_bool(audit_probability.min(1.0))) {
                    let f = truth(x, &mut verdict);
                    if *d != f {
                        accuse(miner, Evidence { nonce: x, submitted: *d, recomputed: f }, &mut verdict);
                    }
                }
            }
        }
    }

    for ev in verdict.evidence.values_mut() {
        ev.sort_by_key(|e| e.nonce);
        ev.dedup_by_key(|e| e.nonce);
    }
    // A fabricator whose shape also failed is reported as dishonest.
    verdict.unverifiable.retain(|m| !verdict.dishonest.contains(m));
    verdict.honest = traces
        .keys()
        .copied()
        .filter(|m| !verdict.dishonest.contains(m) && !verdict.unverifiable.contains(m))
        .collect();
    verdict.coverage.retain(|m, _| verdict.honest.contains(m));
    Ok(verdict)
}

/// Splits `pool` over honest miners by coverage: each gets
/// ⌊pool × cᵢ / Σc⌋ and the rounding remainder goes to the lowest id.
/// Dishonest and unverifiable submitters get zero entries.
pub fn compute_rewards(verdict: &VerificationVerdict, pool: Amount) -> Result<Vec<RewardEntry>, CvrmError> {
    if verdict.honest.is_empty() {
        return Err(CvrmError::EmptyHonestSet);
    }
    let weight = |m: &NodeId| -> u128 {
        let total: u64 = verdict.coverage.values().sum();
        if total == 0 {
            1
        } else {
            u128::from(verdict.coverage.get(m).copied().unwrap_or(0))
        }
    };
    let total_w: u128 = verdict.honest.iter().map(weight).sum();
    let mut entries: Vec<RewardEntry> = verdict
        .honest
        .iter()
        .map(|m| RewardEntry { miner: *m, amount: pool * weight(m) / total_w, withdrawn: false })
        .collect();
    let paid: Amount = entries.iter().map(|e| e.amount).sum();
    entries[0].amount += pool - paid;
    for m in verdict.dishonest.iter().chain(&verdict.unverifiable) {
        entries.push(RewardEntry { miner: *m, amount: 0, withdrawn: false });
    }
    entries.sort_by_key(|e| e.miner);
    Ok(entries)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entitlement {
    pub earned: Amount,
    pub withdrawn: Amount,
}

impl Entitlement {
    pub fn available(&self) -> Amount {
        self.earned - self.withdrawn
    }
}

/// What [`Cvrm::create_group`] hands back to the group. Each member learns
/// only its own delivered range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupActivation {
    pub descriptor: GroupDescriptor,
    pub public: GroupKeyPair,
    pub delivered: BTreeMap<NodeId, DeliveredRange>,
}

#[derive(Clone, Debug)]
pub struct CvrmConfig {
    pub n_total: u64,
    pub overlap_fraction: f64,
    /// Dense-recorded prefix of each base range; overlaps are placed inside.
    pub audit_window: Option<u64>,
    pub sample_stride: u64,
    pub audit_probability: f64,
    /// `None` uses a majority of the members.
    pub threshold: Option<u32>,
}

/// The verifier service: registry, entitlements and the audit log.
#[derive(Clone, Debug)]
pub struct Cvrm {
    config: CvrmConfig,
    records: BTreeMap<GroupId, GroupRecord>,
    verdicts: BTreeMap<GroupId, Vec<VerificationVerdict>>,
    entitlements: BTreeMap<(GroupId, NodeId), Entitlement>,
    banned: BTreeSet<(GroupId, NodeId)>,
    allocated: BTreeMap<GroupId, Amount>,
    /// Signed withdrawals per group: (sequence number, amount).
    signed: BTreeMap<GroupId, Vec<(u64, Amount)>>,
    audit: Vec<AuditRecord>,
}

impl Cvrm {
    pub fn new(config: CvrmConfig) -> Self {
        Cvrm {
            config,
            records: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            entitlements: BTreeMap::new(),
            banned: BTreeSet::new(),
            allocated: BTreeMap::new(),
            signed: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    pub fn config(&self) -> &CvrmConfig {
        &self.config
    }

    pub fn record(&self, id: GroupId) -> Option<&GroupRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &GroupRecord> {
        self.records.values()
    }

    pub fn group_of_etherbase(&self, etherbase: &Address) -> Option<GroupId> {
        self.records.values().find(|r| r.etherbase() == *etherbase).map(|r| r.descriptor.group_id)
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn verdicts(&self, id: GroupId) -> &[VerificationVerdict] {
        self.verdicts.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entitlement(&self, id: GroupId, miner: NodeId) -> Entitlement {
        self.entitlements.get(&(id, miner)).copied().unwrap_or_default()
    }

    pub fn signed_total(&self, id: GroupId) -> Amount {
        self.signed.get(&id).map(|v| v.iter().map(|(_, a)| a).sum()).unwrap_or(0)
    }

    pub fn signed_count(&self) -> usize {
        self.signed.values().map(Vec::len).sum()
    }

    /// Every secret value currently held, for key-hygiene checks: only the
    /// members' shares, never the reconstructed key.
    pub fn secret_material(&self) -> Vec<SecretShare> {
        self.records.values().flat_map(|r| r.shares.values().copied()).collect()
    }

    fn log(&mut self, tick: Tick, event: &str, group_id: Option<GroupId>, miner: Option<NodeId>, details: serde_json::Value) {
        self.audit.push(AuditRecord { tick, event: event.to_string(), group_id, miner, details });
    }

    /// Stores a group dealt elsewhere.
    pub fn register_group(
        &mut self,
        descriptor: GroupDescriptor,
        public: GroupKeyPair,
        shares: BTreeMap<NodeId, SecretShare>,
        assignment: RangeAssignment,
        at: Tick,
    ) -> Result<&GroupRecord, CvrmError> {
        let id = descriptor.group_id;
        if self.records.contains_key(&id) {
            return Err(CvrmError::DuplicateGroup(id));
        }
        if !descriptor.members.iter().all(|m| shares.contains_key(m)) || shares.len() != descriptor.members.len() {
            return Err(CvrmError::MissingShares { have: shares.len(), need: descriptor.members.len() });
        }
        if public.share_count as usize != shares.len() || public.threshold < 2 || public.threshold > public.share_count {
            return Err(ThresholdError::BadThreshold { n: public.share_count, t: public.threshold }.into());
        }
        let members: Vec<u32> = descriptor.members.iter().map(|m| m.0).collect();
        let etherbase = public.public.etherbase();
        self.log(
            at,
            "register",
            Some(id),
            None,
            serde_json::json!({ "members": members, "etherbase": etherbase.to_hex(), "threshold": public.threshold }),
        );
        let record = GroupRecord {
            descriptor,
            public,
            shares,
            assignment,
            sample_stride: self.config.sample_stride,
            registered_at: at,
        };
        Ok(self.records.entry(id).or_insert(record))
    }

    /// Deals key shares, divides the nonce space and registers the group.
    pub fn create_group(
        &mut self,
        mut descriptor: GroupDescriptor,
        rng: &mut impl RngCore,
        at: Tick,
    ) -> Result<GroupActivation, CvrmError> {
        if self.records.contains_key(&descriptor.group_id) {
            return Err(CvrmError::DuplicateGroup(descriptor.group_id));
        }
        let n = descriptor.members.len() as u32;
        let t = self.config.threshold.unwrap_or_else(|| majority_threshold(n)).min(n);
        let (public, dealt) = dkg(n, t, rng)?;
        let shares = descriptor.members.iter().copied().zip(dealt).collect();
        let assignment = divide_nonce_range(
            self.config.n_total,
            &descriptor.members,
            self.config.overlap_fraction,
            self.config.audit_window,
            rng.next_u64(),
        )?;
        descriptor.activate(public.public.etherbase());
        let delivered = descriptor.members.iter().map(|m| (*m, assignment.delivered(*m).expect("member"))).collect();
        self.register_group(descriptor.clone(), public, shares, assignment, at)?;
        Ok(GroupActivation { descriptor, public, delivered })
    }

    /// Verifies one block's proofs and records the verdict.
    pub fn verify(
        &mut self,
        id: GroupId,
        proofs: &[ContributionProof],
        header: &BlockHeader,
        height: u64,
        rng: &mut impl RngCore,
        at: Tick,
    ) -> Result<VerificationVerdict, CvrmError> {
        let record = self.records.get(&id).ok_or(CvrmError::UnknownGroup(id))?;
        let verdict = verify_contributions(record, proofs, header, height, self.config.audit_probability, rng)?;
        for m in &verdict.dishonest {
            self.banned.insert((id, *m));
        }
        let names = |s: &BTreeSet<NodeId>| s.iter().map(|m| m.0).collect::<Vec<_>>();
        let details = serde_json::json!({
            "height": height,
            "honest": names(&verdict.honest),
            "dishonest": names(&verdict.dishonest),
            "unverifiable": names(&verdict.unverifiable),
            "recomputed": verdict.recomputed,
        });
        self.log(at, "verdict", Some(id), None, details);
        for (m, ev) in &verdict.evidence {
            let nonces: Vec<u64> = ev.iter().map(|e| e.nonce).collect();
            self.log(at, "evidence", Some(id), Some(*m), serde_json::json!({ "height": height, "nonces": nonces }));
        }
        self.verdicts.entry(id).or_default().push(verdict.clone());
        Ok(verdict)
    }

    /// Funds not yet promised to anyone, as seen by `report`.
    pub fn unallocated(&self, id: GroupId, report: &OracleReport) -> Amount {
        let withdrawn_applied: Amount = self
            .signed
            .get(&id)
            .map(|v| v.iter().filter(|(s, _)| report.last_seq.is_some_and(|l| *s <= l)).map(|(_, a)| a).sum())
            .unwrap_or(0);
        let allocated = self.allocated.get(&id).copied().unwrap_or(0);
        (report.balance + withdrawn_applied).saturating_sub(allocated)
    }

    /// Splits up to `block_reward` of the unallocated funds by `verdict`.
    pub fn settle(
        &mut self,
        id: GroupId,
        verdict: &VerificationVerdict,
        report: &OracleReport,
        block_reward: Amount,
        at: Tick,
    ) -> Result<Vec<RewardEntry>, CvrmError> {
        let record = self.records.get(&id).ok_or(CvrmError::UnknownGroup(id))?;
        if report.etherbase != record.etherbase() {
            return Err(CvrmError::WrongSource { expected: record.etherbase() });
        }
        let pool = self.unallocated(id, report).min(block_reward);
        let entries = match compute_rewards(verdict, pool) {
            Ok(e) => e,
            Err(e) => {
                self.log(at, "frozen", Some(id), None, serde_json::json!({ "height": verdict.block_height, "pool": pool.to_string() }));
                return Err(e);
            }
        };
        for e in &entries {
            self.entitlements.entry((id, e.miner)).or_default().earned += e.amount;
        }
        *self.allocated.entry(id).or_insert(0) += pool;
        let split: Vec<(u32, String)> = entries.iter().map(|e| (e.miner.0, e.amount.to_string())).collect();
        self.log(at, "rewards", Some(id), None, serde_json::json!({ "height": verdict.block_height, "pool": pool.to_string(), "split": split }));
        Ok(entries)
    }

    /// Checks eligibility and builds the withdrawal transaction paying
    /// `amount` from the group account to `to`.
    pub fn withdrawal_tx(&self, id: GroupId, miner: NodeId, amount: Amount, to: Address) -> Result<Transaction, CvrmError> {
        let record = self.records.get(&id).ok_or(CvrmError::UnknownGroup(id))?;
        let seq = self.signed.get(&id).and_then(|v| v.last()).map(|(s, _)| s + 1).unwrap_or(1);
        let _ = self.check_eligible(id, miner, amount)?;
        Ok(Transaction {
            from: record.etherbase(),
            to,
            amount,
            seq,
            payload_digest: HashDigest::of(format!("cpow/withdrawal/{}/{}", id, miner.0).as_bytes()),
        })
    }

    fn check_eligible(&self, id: GroupId, miner: NodeId, amount: Amount) -> Result<Entitlement, CvrmError> {
        if self.banned.contains(&(id, miner)) {
            return Err(CvrmError::NotEligible(miner));
        }
        let ent = self.entitlement(id, miner);
        if ent.earned == 0 {
            return Err(CvrmError::NotEligible(miner));
        }
        if amount > ent.available() {
            return Err(CvrmError::ExceedsShare { requested: amount, available: ent.available() });
        }
        Ok(ent)
    }

    /// Signs `tx` if `miner` is entitled to it. The group key exists only
    /// inside this call.
    pub fn authorize_withdrawal(
        &mut self,
        id: GroupId,
        miner: NodeId,
        tx: &Transaction,
        rng: &mut impl RngCore,
        at: Tick,
    ) -> Result<SignedWithdrawal, CvrmError> {
        let record = self.records.get(&id).ok_or(CvrmError::UnknownGroup(id))?;
        if tx.from != record.etherbase() {
            return Err(CvrmError::WrongSource { expected: record.etherbase() });
        }
        if let Err(e) = self.check_eligible(id, miner, tx.amount) {
            self.log(at, "withdrawal-denied", Some(id), Some(miner), serde_json::json!({ "reason": e.to_string() }));
            return Err(e);
        }
        let shares: Vec<SecretShare> = record.shares.values().copied().collect();
        let sig = {
            let k = reconstruct(&shares, record.public.threshold)?;
            sign_withdrawal(&k, tx, rng)
        };
        self.entitlements.entry((id, miner)).or_default().withdrawn += tx.amount;
        self.signed.entry(id).or_default().push((tx.seq, tx.amount));
        self.log(
            at,
            "withdrawal",
            Some(id),
            Some(miner),
            serde_json::json!({ "amount": tx.amount.to_string(), "seq": tx.seq, "tx": tx.digest().to_hex() }),
        );
        Ok(sig)
    }

    /// True iff every signed withdrawal went to a miner that was honest in
    /// some verdict and never dishonest.
    pub fn audit_is_consistent(&self) -> bool {
        self.audit.iter().filter(|r| r.event == "withdrawal").all(|r| {
            let (Some(g), Some(m)) = (r.group_id, r.miner) else { return false };
            !self.banned.contains(&(g, m)) && self.verdicts(g).iter().any(|v| v.honest.contains(&m))
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::chain::{Difficulty, Block};
    use crate::group::{finalize_group, GroupStatus};
    use crate::mining::Scanner;
    use crate::threshold::verify_withdrawal;

    fn config() -> CvrmConfig {
        CvrmConfig {
            n_total: 6_000,
            overlap_fraction: 0.01,
            audit_window: Some(40),
            sample_stride: 64,
            audit_probability: 0.0,
            threshold: None,
        }
    }

    fn header() -> BlockHeader {
        BlockHeader {
            parent: HashDigest::ZERO,
            tx_root: HashDigest::ZERO,
            timestamp: 7,
            beneficiary: Address::for_node(0),
            difficulty: Difficulty::MAX,
            nonce: 0,
        }
    }

    fn group(n: u32) -> GroupDescriptor {
        finalize_group(GroupId { leader: NodeId(0), epoch: 1 }, (0..n).map(NodeId), 6).unwrap()
    }

    fn honest_proofs(cvrm: &Cvrm, id: GroupId, h: &BlockHeader, budget: u64) -> Vec<ContributionProof> {
        let rec = cvrm.record(id).unwrap();
        rec.descriptor
            .members
            .iter()
            .map(|m| {
                let plan = rec.delivered(*m).unwrap().scan_plan(64).unwrap();
                let mut s = Scanner::new(h, Difficulty::MAX, plan);
                s.advance(budget);
                ContributionProof { miner: *m, group_id: id, block_height: 1, trace: s.into_trace() }
            })
            .collect()
    }

    #[test]
    fn registration_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cvrm = Cvrm::new(config());
        let act = cvrm.create_group(group(6), &mut rng, 0).unwrap();
        assert_eq!(act.descriptor.status, GroupStatus::Mining);
        assert!(act.descriptor.is_consistent());
        let id = act.descriptor.group_id;
        let rec = cvrm.record(id).unwrap().clone();
        assert_eq!(
            cvrm.register_group(rec.descriptor.clone(), rec.public, rec.shares.clone(), rec.assignment.clone(), 1).err(),
            Some(CvrmError::DuplicateGroup(id))
        );
        let mut other = rec.descriptor.clone();
        other.group_id.epoch = 2;
        let mut five = rec.shares.clone();
        five.remove(&NodeId(5));
        assert_eq!(
            cvrm.register_group(other, rec.public, five, rec.assignment, 1).err(),
            Some(CvrmError::MissingShares { have: 5, need: 6 })
        );
    }

    #[test]
    fn honest_miners_verify_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cvrm = Cvrm::new(config());
        let id = cvrm.create_group(group(2), &mut rng, 0).unwrap().descriptor.group_id;
        let h = header();
        let proofs = honest_proofs(&cvrm, id, &h, 500);
        let v = cvrm.verify(id, &proofs, &h, 1, &mut rng, 5).unwrap();
        assert_eq!(v.honest, BTreeSet::from([NodeId(0), NodeId(1)]));
        assert!(v.evidence.is_empty() && v.dishonest.is_empty());
        assert_eq!(v.recomputed, 0);
    }

    #[test]
    fn fabricated_overlap_digest_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cvrm = Cvrm::new(config());
        let id = cvrm.create_group(group(2), &mut rng, 0).unwrap().descriptor.group_id;
        let h = header();
        let mut proofs = honest_proofs(&cvrm, id, &h, 500);
        let seg = cvrm.record(id).unwrap().assignment.overlaps_of(NodeId(1)).next().unwrap().segment;
        let x = seg.start();
        proofs[1].trace.entries.insert(x, HashDigest([0xab; 32]));
        let v = cvrm.verify(id, &proofs, &h, 1, &mut rng, 5).unwrap();
        assert_eq!(v.dishonest, BTreeSet::from([NodeId(1)]));
        assert_eq!(v.honest, BTreeSet::from([NodeId(0)]));
        let ev = &v.evidence[&NodeId(1)][0];
        assert_eq!((ev.nonce, ev.submitted), (x, HashDigest([0xab; 32])));
        assert_eq!(ev.recomputed, crate::chain::hash_header(&h, x));
    }

    #[test]
    fn omitted_overlap_is_unverifiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cvrm = Cvrm::new(config());
        let id = cvrm.create_group(group(3), &mut rng, 0).unwrap().descriptor.group_id;
        let h = header();
        let mut proofs = honest_proofs(&cvrm, id, &h, 500);
        let seg = cvrm.record(id).unwrap().assignment.overlaps_of(NodeId(2)).next().unwrap().segment;
        for n in seg.iter() {
            proofs[2].trace.entries.remove(&n);
        }
        let v = cvrm.verify(id, &proofs, &h, 1, &mut rng, 5).unwrap();
        assert_eq!(v.unverifiable, BTreeSet::from([NodeId(2)]));
        assert!(!v.honest.contains(&NodeId(2)));
        proofs[0].block_height = 2;
        assert_eq!(
            cvrm.verify(id, &proofs, &h, 1, &mut rng, 6).err(),
            Some(CvrmError::HeightMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn agreeing_fabricators_fall_to_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = config();
        cfg.audit_probability = 1.0;
        let mut cvrm = Cvrm::new(cfg);
        let id = cvrm.create_group(group(2), &mut rng, 0).unwrap().descriptor.group_id;
        let h = header();
        let mut proofs = honest_proofs(&cvrm, id, &h, 500);
        let o = *cvrm.record(id).unwrap().assignment.overlaps_of(NodeId(0)).next().unwrap();
        for p in &mut proofs {
            p.trace.entries.insert(o.segment.start(), HashDigest([7; 32]));
        }
        let v = cvrm.verify(id, &proofs, &h, 1, &mut rng, 5).unwrap();
        assert_eq!(v.dishonest, BTreeSet::from([NodeId(0), NodeId(1)]));
    }

    fn verdict(honest: &[u32], dishonest: &[u32], cov: &[(u32, u64)]) -> VerificationVerdict {
        VerificationVerdict {
            honest: honest.iter().map(|i| NodeId(*i)).collect(),
            dishonest: dishonest.iter().map(|i| NodeId(*i)).collect(),
            coverage: cov.iter().map(|(m, c)| (NodeId(*m), *c)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn reward_split_rules() {
        let amounts = |v: Vec<RewardEntry>| v.iter().map(|e| e.amount).collect::<Vec<_>>();
        let equal = verdict(&[0, 1, 2], &[], &[(0, 10), (1, 10), (2, 10)]);
        assert_eq!(amounts(compute_rewards(&equal, 9).unwrap()), vec![3, 3, 3]);
        let one_bad = verdict(&[0, 2], &[1], &[(0, 10), (2, 10)]);
        assert_eq!(amounts(compute_rewards(&one_bad, 9).unwrap()), vec![5, 0, 4]);
        let none = verdict(&[], &[0, 1, 2], &[]);
        assert_eq!(compute_rewards(&none, 9), Err(CvrmError::EmptyHonestSet));
        let weighted = verdict(&[0, 1], &[], &[(0, 1), (1, 3)]);
        assert_eq!(amounts(compute_rewards(&weighted, 100).unwrap()), vec![25, 75]);
    }

    #[test]
    fn oracle_reads_ledger() {
        let d = Difficulty::new(0).unwrap();
        let mut ledger = Ledger::new(d);
        let e = Address::for_node(42);
        for i in 0..10 {
            let header = BlockHeader {
                parent: ledger.tip(),
                tx_root: crate::chain::tx_root(&[]),
                timestamp: i,
                beneficiary: e,
                difficulty: d,
                nonce: 0,
            };
            ledger.apply_block(Block { header, transactions: vec![] }, 2).unwrap();
        }
        let r = oracle_poll(&ledger, [&e], 100);
        assert_eq!(r[0].balance, 20);
        assert!(oracle_poll(&ledger, std::iter::empty(), 100).is_empty());
        assert_eq!(oracle_poll(&ledger, [&e], 101)[0].balance, r[0].balance);
        let mut o = Oracle::new(50);
        assert!(o.poll(&ledger, [&e], 0).is_some());
        assert!(o.poll(&ledger, [&e], 49).is_none());
        assert!(o.poll(&ledger, [&e], 50).is_some());
    }

    #[test]
    fn withdrawal_lifecycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cvrm = Cvrm::new(config());
        let act = cvrm.create_group(group(3), &mut rng, 0).unwrap();
        let id = act.descriptor.group_id;
        let etherbase = act.descriptor.shared_etherbase.unwrap();
        let d = Difficulty::new(0).unwrap();
        let mut ledger = Ledger::new(d);
        let header = BlockHeader {
            parent: ledger.tip(),
            tx_root: crate::chain::tx_root(&[]),
            timestamp: 1,
            beneficiary: etherbase,
            difficulty: d,
            nonce: 0,
        };
        ledger.apply_block(Block { header: header.clone(), transactions: vec![] }, 9).unwrap();

        let mut proofs = honest_proofs(&cvrm, id, &header, 300);
        let seg = cvrm.record(id).unwrap().assignment.overlaps_of(NodeId(1)).next().unwrap().segment;
        proofs[1].trace.entries.insert(seg.start(), HashDigest([1; 32]));
        let v = cvrm.verify(id, &proofs, &header, 1, &mut rng, 2).unwrap();
        assert_eq!(v.dishonest, BTreeSet::from([NodeId(1)]));
        let report = oracle_poll(&ledger, [&etherbase], 3)[0];
        let entries = cvrm.settle(id, &v, &report, 9, 3).unwrap();
        assert_eq!(entries.iter().map(|e| e.amount).sum::<Amount>(), 9);

        let to = Address::for_node(0);
        let ent = cvrm.entitlement(id, NodeId(0)).available();
        assert_eq!(
            cvrm.withdrawal_tx(id, NodeId(0), ent + 1, to).err(),
            Some(CvrmError::ExceedsShare { requested: ent + 1, available: ent })
        );
        let tx = cvrm.withdrawal_tx(id, NodeId(0), ent, to).unwrap();
        let sig = cvrm.authorize_withdrawal(id, NodeId(0), &tx, &mut rng, 4).unwrap();
        assert!(verify_withdrawal(&act.public.public, &tx, &sig));
        ledger.apply_withdrawal(&tx, &sig, &act.public.public).unwrap();
        assert_eq!(ledger.balance(&to), ent);

        let bad = Transaction { to: Address::for_node(1), seq: 2, ..tx.clone() };
        assert_eq!(cvrm.authorize_withdrawal(id, NodeId(1), &bad, &mut rng, 5), Err(CvrmError::NotEligible(NodeId(1))));
        assert!(cvrm.audit_is_consistent());

        // The signing key never lingers: only the dealt shares are held.
        let k = reconstruct(&cvrm.record(id).unwrap().shares.values().copied().collect::<Vec<_>>(), 2).unwrap();
        assert!(cvrm.secret_material().iter().all(|s| s.value != k));
        assert_eq!(cvrm.secret_material().len(), 3);

        // Pool accounting sees the applied withdrawal.
        let report = oracle_poll(&ledger, [&etherbase], 6)[0];
        assert_eq!(cvrm.unallocated(id, &report), 0);
    }

    #[test]
    fn audit_log_is_jsonl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cvrm = Cvrm::new(config());
        cvrm.create_group(group(2), &mut rng, 0).unwrap();
        let mut buf = Vec::new();
        write_audit_log(cvrm.audit_log(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for k in ["tick", "event", "group_id", "miner", "details"] {
                assert!(v.get(k).is_some(), "{k} missing in {line}");
            }
        }
    }
}
