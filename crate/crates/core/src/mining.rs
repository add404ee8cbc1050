//! Nonce search: hashrate calibration, ascending range scans that record a
//! sampled proof trace, and the closed-form solo/collaborative timing model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{hash_header_bytes, meets_difficulty, BlockHeader, Difficulty, HashDigest, HEADER_BYTES};
use crate::{Tick, TICKS_PER_SECOND};

/// Default spacing of sampled trace entries outside dense segments.
pub const DEFAULT_SAMPLE_STRIDE: u64 = 64;
/// Progress is reported every `stride * PROGRESS_STRIDES` nonces.
pub const PROGRESS_STRIDES: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MiningError {
    #[error("nonce range [{start}, {end}) is empty")]
    EmptyRange { start: u64, end: u64 },
    #[error("sample stride must be at least 1")]
    BadStride,
    #[error("dense segment [{start}, {end}) lies outside the scanned ranges")]
    SegmentOutsideRange { start: u64, end: u64 },
    #[error("calibration window must be positive")]
    EmptyWindow,
    #[error("per-nonce cost must be positive")]
    ZeroCost,
    #[error("group size must be at least 1")]
    EmptyGroup,
}

/// Half-open nonce interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NonceRange {
    start: u64,
    end: u64,
}

impl NonceRange {
    pub fn new(start: u64, end: u64) -> Result<Self, MiningError> {
        if start >= end {
            return Err(MiningError::EmptyRange { start, end });
        }
        Ok(NonceRange { start, end })
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, nonce: u64) -> bool {
        self.start <= nonce && nonce < self.end
    }

    pub fn contains_range(&self, other: &NonceRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn intersect(&self, other: &NonceRange) -> Option<NonceRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start < end).then_some(NonceRange { start, end })
    }

    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

/// Nonces checked per second.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HashrateEstimate(f64);

impl HashrateEstimate {
    pub fn new(nonces_per_second: f64) -> Option<Self> {
        (nonces_per_second.is_finite() && nonces_per_second > 0.0).then_some(HashrateEstimate(nonces_per_second))
    }

    pub fn nonces_per_second(self) -> f64 {
        self.0
    }
}

/// Measures how many nonces fit in `window` when each costs
/// `base_hash_cost + delay_per_nonce` ticks. Simulated time makes this exact:
/// the result is the reciprocal of the per-nonce cost.
pub fn calibrate_hashrate(delay_per_nonce: Tick, base_hash_cost: Tick, window: Tick) -> Result<HashrateEstimate, MiningError> {
    if window == 0 {
        return Err(MiningError::EmptyWindow);
    }
    let cost = delay_per_nonce + base_hash_cost;
    if cost == 0 {
        return Err(MiningError::ZeroCost);
    }
    let checked = window / cost;
    let rate = if checked == 0 {
        // Window shorter than one nonce: fall back to the per-nonce rate.
        TICKS_PER_SECOND as f64 / cost as f64
    } else {
        checked as f64 / ((checked * cost) as f64 / TICKS_PER_SECOND as f64)
    };
    Ok(HashrateEstimate(rate))
}

/// Seconds for one miner to exhaust `n_total` nonces.
pub fn expected_solo_time(n_total: u64, rate: HashrateEstimate) -> f64 {
    n_total as f64 / rate.0
}

/// Seconds for `n` equal miners splitting `n_total` evenly.
pub fn expected_collab_time(n_total: u64, rate: HashrateEstimate, n: usize) -> Result<f64, MiningError> {
    if n == 0 {
        return Err(MiningError::EmptyGroup);
    }
    Ok(n_total as f64 / (n as f64 * rate.0))
}

/// Sampled nonce→digest evidence of a scan.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofTrace {
    /// Ranges the miner claims to have been assigned, in scan order.
    pub claimed: Vec<NonceRange>,
    pub entries: BTreeMap<u64, HashDigest>,
    /// Scan positions actually evaluated (a prefix of `claimed`).
    pub nonces_tried: u64,
}

impl ProofTrace {
    pub fn is_sound_for(&self, header: &BlockHeader) -> bool {
        let bytes = header.canonical_bytes();
        self.entries.iter().all(|(n, d)| hash_header_bytes(&bytes, *n) == *d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchResult {
    Found { nonce: u64, digest: HashDigest },
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiningOutcome {
    pub result: SearchResult,
    pub trace: ProofTrace,
    pub nonces_tried: u64,
}

/// Ordered list of ranges to scan plus the segments where every nonce is
/// recorded; elsewhere only multiples of `stride` are kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanPlan {
    segments: Vec<NonceRange>,
    dense: Vec<NonceRange>,
    stride: u64,
}

impl ScanPlan {
    pub fn new(segments: Vec<NonceRange>, dense: Vec<NonceRange>, stride: u64) -> Result<Self, MiningError> {
        if stride == 0 {
            return Err(MiningError::BadStride);
        }
        if segments.is_empty() {
            return Err(MiningError::EmptyRange { start: 0, end: 0 });
        }
        for d in &dense {
            if !segments.iter().any(|s| s.contains_range(d)) {
                return Err(MiningError::SegmentOutsideRange { start: d.start, end: d.end });
            }
        }
        Ok(ScanPlan { segments, dense, stride })
    }

    pub fn segments(&self) -> &[NonceRange] {
        &self.segments
    }

    pub fn dense(&self) -> &[NonceRange] {
        &self.dense
    }

    pub fn total_len(&self) -> u64 {
        self.segments.iter().map(NonceRange::len).sum()
    }

    /// Nonce evaluated at scan position `pos`.
    pub fn nonce_at(&self, mut pos: u64) -> Option<u64> {
        for s in &self.segments {
            if pos < s.len() {
                return Some(s.start + pos);
            }
            pos -= s.len();
        }
        None
    }

    /// Scan position of `nonce` (first occurrence).
    pub fn position_of(&self, nonce: u64) -> Option<u64> {
        let mut offset = 0;
        for s in &self.segments {
            if s.contains(nonce) {
                return Some(offset + nonce - s.start);
            }
            offset += s.len();
        }
        None
    }

    pub fn records(&self, nonce: u64) -> bool {
        nonce % self.stride == 0 || self.dense.iter().any(|d| d.contains(nonce))
    }
}

/// Outcome of one [`Scanner::advance`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanStep {
    /// Winning nonce at scan position `position` (0-based).
    Found { nonce: u64, digest: HashDigest, position: u64 },
    /// Budget used up without success; more nonces remain.
    Progress,
    Exhausted,
}

/// Resumable ascending scan over a [`ScanPlan`]; the simulator drives it in
/// slices so that other events can interleave.
#[derive(Clone, Debug)]
pub struct Scanner {
    header_bytes: [u8; HEADER_BYTES],
    difficulty: Difficulty,
    plan: ScanPlan,
    position: u64,
    entries: BTreeMap<u64, HashDigest>,
    found: bool,
}

impl Scanner {
    pub fn new(header: &BlockHeader, difficulty: Difficulty, plan: ScanPlan) -> Self {
        Scanner {
            header_bytes: header.canonical_bytes(),
            difficulty,
            plan,
            position: 0,
            entries: BTreeMap::new(),
            found: false,
        }
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn plan(&self) -> &ScanPlan {
        &self.plan
    }

    /// Evaluates up to `budget` further nonces.
    pub fn advance(&mut self, budget: u64) -> ScanStep {
        let total = self.plan.total_len();
        if self.found || self.position >= total {
            return ScanStep::Exhausted;
        }
        let stop = total.min(self.position.saturating_add(budget));
        while self.position < stop {
            let nonce = self.plan.nonce_at(self.position).expect("position within plan");
            let digest = hash_header_bytes(&self.header_bytes, nonce);
            let pos = self.position;
            self.position += 1;
            if self.plan.records(nonce) {
                self.entries.insert(nonce, digest);
            }
            if meets_difficulty(&digest, self.difficulty) {
                self.entries.insert(nonce, digest);
                self.found = true;
                return ScanStep::Found { nonce, digest, position: pos };
            }
        }
        if self.position >= total {
            ScanStep::Exhausted
        } else {
            ScanStep::Progress
        }
    }

    /// Drops everything past the first `nonces_tried` positions; used when a
    /// slice was computed ahead of virtual time and then interrupted.
    pub fn truncate(&mut self, nonces_tried: u64) {
        if nonces_tried >= self.position {
            return;
        }
        let plan = &self.plan;
        self.entries.retain(|n, _| plan.position_of(*n).is_some_and(|p| p < nonces_tried));
        self.position = nonces_tried;
        self.found = false;
    }

    pub fn into_trace(self) -> ProofTrace {
        ProofTrace { claimed: self.plan.segments, entries: self.entries, nonces_tried: self.position }
    }

    pub fn trace(&self) -> ProofTrace {
        ProofTrace { claimed: self.plan.segments.clone(), entries: self.entries.clone(), nonces_tried: self.position }
    }
}

/// Scans `range` in ascending order until a nonce meets `d` or the range is
/// exhausted. Every multiple of `sample_stride` and every nonce inside an
/// overlap segment goes into the trace.
pub fn search_range(
    header: &BlockHeader,
    range: NonceRange,
    d: Difficulty,
    sample_stride: u64,
    overlap_segments: &[NonceRange],
) -> Result<MiningOutcome, MiningError> {
    if range.start >= range.end {
        return Err(MiningError::EmptyRange { start: range.start, end: range.end });
    }
    let plan = ScanPlan::new(vec![range], overlap_segments.to_vec(), sample_stride)?;
    let mut scanner = Scanner::new(header, d, plan);
    let result = match scanner.advance(u64::MAX) {
        ScanStep::Found { nonce, digest, .. } => SearchResult::Found { nonce, digest },
        ScanStep::Exhausted | ScanStep::Progress => SearchResult::Exhausted,
    };
    let trace = scanner.into_trace();
    Ok(MiningOutcome { result, nonces_tried: trace.nonces_tried, trace })
}
