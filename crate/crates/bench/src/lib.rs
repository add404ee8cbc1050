//! Fixtures shared by the benchmarks.

use cpow_core::chain::{BlockHeader, Difficulty, HashDigest};
use cpow_core::cvrm::{ContributionProof, Cvrm, CvrmConfig};
use cpow_core::group::{finalize_group, GroupId};
use cpow_core::mining::Scanner;
use cpow_core::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn header() -> BlockHeader {
    BlockHeader {
        parent: HashDigest::of(b"bench parent"),
        tx_root: HashDigest::ZERO,
        timestamp: 1_000_000,
        beneficiary: cpow_core::chain::Address::for_node(0),
        difficulty: Difficulty::MAX,
        nonce: 0,
    }
}

/// A registered group of `n` with every member's full, honest trace.
pub struct VerifyFixture {
    pub cvrm: Cvrm,
    pub group: GroupId,
    pub header: BlockHeader,
    pub proofs: Vec<ContributionProof>,
}

pub fn verify_fixture(n: u32, n_total: u64) -> VerifyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let group = GroupId { leader: NodeId(0), epoch: 0 };
    let desc = finalize_group(group, (0..n).map(NodeId), n as usize).expect("group of n >= 2");
    let mut cvrm = Cvrm::new(CvrmConfig {
        n_total,
        overlap_fraction: 0.01,
        audit_window: None,
        sample_stride: 64,
        audit_probability: 0.05,
        threshold: None,
    });
    let act = cvrm.create_group(desc, &mut rng, 0).expect("create");
    let mut header = header();
    header.beneficiary = act.public.public.etherbase();
    let proofs = act
        .delivered
        .iter()
        .map(|(m, d)| {
            let plan = d.scan_plan(64).expect("plan");
            let total = plan.total_len();
            let mut sc = Scanner::new(&header, Difficulty::MAX, plan);
            sc.advance(total);
            ContributionProof { miner: *m, group_id: group, block_height: 1, trace: sc.into_trace() }
        })
        .collect();
    VerifyFixture { cvrm, group, header, proofs }
}
