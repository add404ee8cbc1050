use cpow_core::experiments::{run_all, run_experiment, Mode, ScenarioSpec};
use cpow_core::simnet::{run_scenario, Behavior, ExecMode, ScenarioConfig};
use cpow_core::NodeId;

fn small(mode: Mode, blocks: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::desk(mode);
    spec.blocks_target = blocks;
    spec.seeds = vec![3, 4, 5];
    spec
}

#[test]
fn experiments_repeat_exactly() {
    let spec = small(Mode::Collab, 10);
    for seed in &spec.seeds {
        assert_eq!(run_experiment(&spec, *seed).unwrap(), run_experiment(&spec, *seed).unwrap());
    }
}

#[test]
fn parallel_seeds_match_sequential_runs() {
    let spec = small(Mode::Solo, 12);
    let parallel = run_all(&spec).unwrap();
    assert_eq!(parallel.len(), spec.seeds.len());
    for ((m, _), seed) in parallel.iter().zip(&spec.seeds) {
        assert_eq!(m.seed, *seed);
        assert_eq!(*m, run_experiment(&spec, *seed).unwrap());
    }
}

#[test]
fn sharded_engine_matches_reference() {
    let cfg = ScenarioConfig { blocks_target: 10, ..ScenarioConfig::desk() };
    for seed in [1, 9] {
        let a = run_scenario(&cfg, seed, ExecMode::Reference).unwrap();
        let b = run_scenario(&cfg, seed, ExecMode::Sharded { workers: 4 }).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn membership_storm_keeps_groups_disjoint() {
    let mut cfg = ScenarioConfig::equal_group(20, 714);
    cfg.group_target_size = 6;
    cfg.blocks_target = 3;
    for seed in 1..=10 {
        let r = run_scenario(&cfg, seed, ExecMode::Reference).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for g in &r.groups {
            assert!(g.members.len() >= 2 && g.members.len() <= 6);
            assert!(g.members.iter().all(|m| seen.insert(*m)), "seed {seed}: overlapping groups");
            assert!(g.pools_agree && g.templates_agree && g.sync_exact);
        }
        assert!(r.ledger.is_conserved());
    }
}

#[test]
fn cheaters_are_caught_and_never_paid() {
    let mut cfg = ScenarioConfig { blocks_target: 20, ..ScenarioConfig::desk() };
    cfg.nodes[4].behavior = Behavior::Fabricate { count: 3 };
    cfg.nodes[7].behavior = Behavior::Freeride;
    let r = run_scenario(&cfg, 2, ExecMode::Reference).unwrap();
    for id in [4, 7] {
        let n = r.node(NodeId(id)).unwrap();
        assert!(n.group.is_some());
        assert_eq!(n.balance, 0, "{}", n.id);
        assert_eq!(n.withdrawals_granted, 0);
    }
    let accused: usize = r.audit.iter().filter(|a| a.event == "withdrawal-denied").count();
    assert!(accused > 0);
    assert!(r.groups.iter().all(|g| g.verdicts > 0));
    for i in [3, 5, 6, 8] {
        assert!(r.node(NodeId(i)).unwrap().balance > 0, "honest n{i} unpaid");
    }
    assert!(r.ledger.is_conserved() && r.errors.is_empty());
}
