//! Solo-versus-collaborative experiment runner and its report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::protocol::{run_scenario, SimulationResult};
use crate::simnet::{ExecMode, NodeClass, Role, ScenarioConfig, SimError};
use crate::{Amount, NodeId, Tick, TICKS_PER_SECOND, WEI_PER_ETH};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid experiment: {0}")]
    ConfigInvalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Solo,
    #[serde(alias = "collaborative")]
    Collab,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Solo => "solo",
            Mode::Collab => "collab",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "solo" => Ok(Mode::Solo),
            "collab" | "collaborative" => Ok(Mode::Collab),
            other => Err(format!("unknown mode `{other}` (expected solo or collab)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub scenario: ScenarioConfig,
    pub mode: Mode,
    pub blocks_target: u64,
    pub seeds: Vec<u64>,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioConfig, mode: Mode, blocks_target: u64, seeds: Vec<u64>) -> Self {
        ScenarioSpec { name: scenario.name.clone(), scenario, mode, blocks_target, seeds }
    }

    pub fn desk(mode: Mode) -> Self {
        Self::new(ScenarioConfig::desk(), mode, 50, (1..=5).collect())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.blocks_target == 0 {
            return Err(SimError::ConfigInvalid("blocks_target must be at least 1".into()).into());
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::ConfigInvalid("no seeds".into()));
        }
        let seeking = self.scenario.nodes.iter().filter(|n| n.initial_role == Role::CollaboratorSeeking).count();
        if self.mode == Mode::Collab && seeking < 2 {
            return Err(ExperimentError::ConfigInvalid(format!(
                "collaborative mode needs at least two collaborator-seeking nodes, found {seeking}"
            )));
        }
        self.config().validate()?;
        Ok(())
    }

    /// The simulator configuration for this mode.
    pub fn config(&self) -> ScenarioConfig {
        let mut cfg = self.scenario.clone();
        cfg.blocks_target = self.blocks_target;
        match self.mode {
            Mode::Solo => cfg.all_solo(),
            Mode::Collab => cfg,
        }
    }
}

/// Analytic share of the total hash rate per class.
pub fn hashrate_share(cfg: &ScenarioConfig) -> BTreeMap<NodeClass, f64> {
    let mut by_class: BTreeMap<NodeClass, f64> = BTreeMap::new();
    for n in &cfg.nodes {
        *by_class.entry(n.class).or_default() += 1.0 / cfg.cost_of(n) as f64;
    }
    let total: f64 = by_class.values().sum();
    by_class.values_mut().for_each(|v| *v /= total);
    by_class
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ClassStats {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return ClassStats::default();
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        ClassStats { count, mean, std: var.sqrt() }
    }

    /// Coefficient of variation; zero when the mean is.
    pub fn cv(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.std / self.mean
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinerMetrics {
    pub node: NodeId,
    pub class: NodeClass,
    #[serde(with = "crate::chain::amount_string")]
    pub reward_wei: Amount,
    pub reward: f64,
    /// Hash rate relative to the slowest node.
    pub rate_units: f64,
    pub eth_per_ghz: f64,
    /// Nonces per second measured over the miner's busy time.
    pub measured_rate: f64,
    pub blocks_won: u64,
    pub nonces: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub blocks_target: u64,
    pub miners: Vec<MinerMetrics>,
    pub reward: BTreeMap<NodeClass, ClassStats>,
    pub hashrate_share: BTreeMap<NodeClass, f64>,
    pub empirical_share: BTreeMap<NodeClass, f64>,
    /// Measured aggregate weak rate over the fastest strong miner's rate.
    pub weak_to_strong: Option<f64>,
    pub elapsed_ticks: Tick,
    pub total_nonces: u64,
    pub weak_blocks: u64,
    /// Paid out to miners' own accounts.
    #[serde(with = "crate::chain::amount_string")]
    pub distributed: Amount,
    /// Still sitting in group accounts.
    #[serde(with = "crate::chain::amount_string")]
    pub retained: Amount,
    pub frozen_pools: usize,
    pub conserved: bool,
    pub ledger_digest: String,
    pub coordination_ok: bool,
    pub errors: Vec<String>,
}

impl ExperimentMetrics {
    pub fn miner(&self, node: NodeId) -> Option<&MinerMetrics> {
        self.miners.iter().find(|m| m.node == node)
    }

    pub fn rewards_of(&self, class: NodeClass) -> Vec<f64> {
        self.miners.iter().filter(|m| m.class == class).map(|m| m.reward).collect()
    }
}

pub fn wei_to_eth(a: Amount) -> f64 {
    a as f64 / WEI_PER_ETH as f64
}

/// Exact decimal rendering of a wei amount in ETH.
pub fn format_eth(a: Amount) -> String {
    format!("{}.{:018}", a / WEI_PER_ETH, a % WEI_PER_ETH)
}

fn metrics_from(spec: &ScenarioSpec, cfg: &ScenarioConfig, r: &SimulationResult) -> ExperimentMetrics {
    let min_rate = cfg.nodes.iter().map(|n| 1.0 / cfg.cost_of(n) as f64).fold(f64::INFINITY, f64::min);
    let miners: Vec<MinerMetrics> = r
        .nodes
        .iter()
        .map(|n| {
            let rate_units = (1.0 / n.cost as f64) / min_rate;
            let reward = wei_to_eth(n.balance);
            let measured_rate = if n.mining_ticks == 0 {
                0.0
            } else {
                n.nonces as f64 * TICKS_PER_SECOND as f64 / n.mining_ticks as f64
            };
            MinerMetrics {
                node: n.id,
                class: n.class,
                reward_wei: n.balance,
                reward,
                rate_units,
                eth_per_ghz: reward / rate_units,
                measured_rate,
                blocks_won: n.blocks_found,
                nonces: n.nonces,
            }
        })
        .collect();
    let mut reward = BTreeMap::new();
    let mut measured: BTreeMap<NodeClass, f64> = BTreeMap::new();
    for class in [NodeClass::Strong, NodeClass::Weak] {
        let vals: Vec<f64> = miners.iter().filter(|m| m.class == class).map(|m| m.reward).collect();
        if !vals.is_empty() {
            reward.insert(class, ClassStats::of(&vals));
            measured.insert(class, miners.iter().filter(|m| m.class == class).map(|m| m.measured_rate).sum());
        }
    }
    let total_measured: f64 = measured.values().sum();
    let empirical_share = measured.iter().map(|(c, v)| (*c, v / total_measured)).collect();
    let best_strong = miners.iter().filter(|m| m.class == NodeClass::Strong).map(|m| m.measured_rate).fold(0.0, f64::max);
    let weak_to_strong = (best_strong > 0.0).then(|| measured.get(&NodeClass::Weak).copied().unwrap_or(0.0) / best_strong);
    let distributed: Amount = r.nodes.iter().map(|n| n.balance).sum();
    let retained: Amount = r.groups.iter().map(|g| g.balance).sum();
    let conserved = r.ledger.is_conserved()
        && r.ledger.minted() == cfg.blocks_target as Amount * cfg.block_reward
        && distributed + retained == r.ledger.minted();
    ExperimentMetrics {
        scenario: spec.name.clone(),
        mode: spec.mode,
        seed: r.seed,
        blocks_target: cfg.blocks_target,
        reward,
        hashrate_share: hashrate_share(cfg),
        empirical_share,
        weak_to_strong,
        elapsed_ticks: r.block_times.last().copied().unwrap_or(0),
        total_nonces: miners.iter().map(|m| m.nonces).sum(),
        weak_blocks: miners.iter().filter(|m| m.class == NodeClass::Weak).map(|m| m.blocks_won).sum(),
        miners,
        distributed,
        retained,
        frozen_pools: r.groups.iter().map(|g| g.frozen).sum(),
        conserved,
        ledger_digest: r.ledger.state_digest().to_hex(),
        coordination_ok: r.groups.iter().all(|g| g.pools_agree && g.templates_agree && g.sync_exact),
        errors: r.errors.clone(),
    }
}

/// Runs one seed and returns both the metrics and the raw simulation output.
pub fn run_detailed(spec: &ScenarioSpec, seed: u64) -> Result<(ExperimentMetrics, SimulationResult), ExperimentError> {
    spec.validate()?;
    let cfg = spec.config();
    let r = run_scenario(&cfg, seed, ExecMode::Reference)?;
    Ok((metrics_from(spec, &cfg, &r), r))
}

pub fn run_experiment(spec: &ScenarioSpec, seed: u64) -> Result<ExperimentMetrics, ExperimentError> {
    run_detailed(spec, seed).map(|(m, _)| m)
}

/// Every seed of `spec`, in parallel, returned in seed order.
pub fn run_all(spec: &ScenarioSpec) -> Result<Vec<(ExperimentMetrics, SimulationResult)>, ExperimentError> {
    spec.validate()?;
    spec.seeds.par_iter().map(|s| run_detailed(spec, *s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub reward: BTreeMap<NodeClass, ClassStats>,
    pub weak_blocks: u64,
    pub total_nonces: u64,
    pub elapsed_ticks: Tick,
    pub conserved: bool,
    pub coordination_ok: bool,
    pub frozen_pools: usize,
    pub ledger_digest: String,
}

/// Across-seed aggregates for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub scenario: String,
    pub mode: Mode,
    pub blocks_target: u64,
    pub seeds: Vec<u64>,
    /// Pooled over every miner of every seed.
    pub reward: BTreeMap<NodeClass, ClassStats>,
    /// Mean over seeds of the class-mean reward per rate unit.
    pub eth_per_ghz: BTreeMap<NodeClass, f64>,
    pub hashrate_share: BTreeMap<NodeClass, f64>,
    pub empirical_share: BTreeMap<NodeClass, f64>,
    pub weak_to_strong: Option<f64>,
    /// Network-wide nonces per block won by a weak miner, over all seeds.
    pub nonces_per_weak_block: Option<f64>,
    pub per_seed: Vec<SeedSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub modes: Vec<ModeSummary>,
}

impl Summary {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize_mode(runs: &[&ExperimentMetrics]) -> ModeSummary {
    let first = runs[0];
    let mut reward = BTreeMap::new();
    let mut eth_per_ghz = BTreeMap::new();
    let mut empirical_share = BTreeMap::new();
    for class in [NodeClass::Strong, NodeClass::Weak] {
        let pooled: Vec<f64> = runs.iter().flat_map(|r| r.rewards_of(class)).collect();
        if pooled.is_empty() {
            continue;
        }
        reward.insert(class, ClassStats::of(&pooled));
        let per_seed = runs.iter().map(|r| {
            mean(r.miners.iter().filter(|m| m.class == class).map(|m| m.eth_per_ghz))
        });
        eth_per_ghz.insert(class, mean(per_seed));
        empirical_share.insert(class, mean(runs.iter().filter_map(|r| r.empirical_share.get(&class).copied())));
    }
    let weak_blocks: u64 = runs.iter().map(|r| r.weak_blocks).sum();
    let nonces: u64 = runs.iter().map(|r| r.total_nonces).sum();
    let ratios: Vec<f64> = runs.iter().filter_map(|r| r.weak_to_strong).collect();
    ModeSummary {
        scenario: first.scenario.clone(),
        mode: first.mode,
        blocks_target: first.blocks_target,
        seeds: runs.iter().map(|r| r.seed).collect(),
        reward,
        eth_per_ghz,
        hashrate_share: first.hashrate_share.clone(),
        empirical_share,
        weak_to_strong: (!ratios.is_empty()).then(|| mean(ratios)),
        nonces_per_weak_block: (weak_blocks > 0).then(|| nonces as f64 / weak_blocks as f64),
        per_seed: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                reward: r.reward.clone(),
                weak_blocks: r.weak_blocks,
                total_nonces: r.total_nonces,
                elapsed_ticks: r.elapsed_ticks,
                conserved: r.conserved,
                coordination_ok: r.coordination_ok,
                frozen_pools: r.frozen_pools,
                ledger_digest: r.ledger_digest.clone(),
            })
            .collect(),
    }
}

/// Groups runs by mode, seeds ascending.
pub fn summarize(metrics: &[ExperimentMetrics]) -> Summary {
    let mut by_mode: BTreeMap<Mode, Vec<&ExperimentMetrics>> = BTreeMap::new();
    for m in metrics {
        by_mode.entry(m.mode).or_default().push(m);
    }
    let modes = by_mode
        .into_values()
        .map(|mut runs| {
            runs.sort_by_key(|r| r.seed);
            summarize_mode(&runs)
        })
        .collect();
    Summary { modes }
}

pub const REWARDS_CSV: &str = "rewards.csv";
pub const EFFICIENCY_CSV: &str = "efficiency.csv";
pub const HASHRATE_CSV: &str = "hashrate.csv";
pub const SUMMARY_JSON: &str = "summary.json";

fn write_file(path: &Path, body: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, body).map_err(io_err(path))
}

/// Writes the report tables into `out`, which must already exist.
pub fn emit_report(metrics: &[ExperimentMetrics], out: &Path) -> Result<Summary, ExperimentError> {
    if metrics.is_empty() {
        return Err(ExperimentError::ConfigInvalid("nothing to report".into()));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut sorted: Vec<&ExperimentMetrics> = metrics.iter().collect();
    sorted.sort_by_key(|m| (m.mode, m.seed));

    let mut rewards = String::from("node,class,mode,seed,reward\n");
    for m in &sorted {
        for r in &m.miners {
            rewards += &format!("{},{},{},{},{}\n", r.node.0, r.class.as_str(), m.mode.as_str(), m.seed, format_eth(r.reward_wei));
        }
    }
    write_file(&out.join(REWARDS_CSV), rewards.as_bytes())?;

    let mut efficiency = String::from("node,class,mode,eth_per_ghz\n");
    let mut per_node: BTreeMap<(Mode, NodeId), (NodeClass, Vec<f64>)> = BTreeMap::new();
    for m in &sorted {
        for r in &m.miners {
            per_node.entry((m.mode, r.node)).or_insert((r.class, Vec::new())).1.push(r.eth_per_ghz);
        }
    }
    for ((mode, node), (class, vals)) in &per_node {
        efficiency += &format!("{},{},{},{:.9}\n", node.0, class.as_str(), mode.as_str(), mean(vals.iter().copied()));
    }
    write_file(&out.join(EFFICIENCY_CSV), efficiency.as_bytes())?;

    let summary = summarize(metrics);
    let mut hashrate = String::from("class,share,empirical_share\n");
    let first = &summary.modes[0];
    for (class, share) in &first.hashrate_share {
        let emp = first.empirical_share.get(class).copied().unwrap_or(0.0);
        hashrate += &format!("{},{share:.9},{emp:.9}\n", class.as_str());
    }
    write_file(&out.join(HASHRATE_CSV), hashrate.as_bytes())?;

    let path = out.join(SUMMARY_JSON);
    let mut json = serde_json::to_vec_pretty(&summary).map_err(|source| ExperimentError::Json { path: path.clone(), source })?;
    json.push(b'\n');
    write_file(&path, &json)?;
    Ok(summary)
}

/// Writes one run's audit log as JSON lines.
pub fn write_audit(result: &SimulationResult, path: &Path) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    crate::cvrm::write_audit_log(&result.audit, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_summary(dir: &Path) -> Result<Summary, ExperimentError> {
    let path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json { path, source })
}

/// One pass/fail ordering check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn class_mean(m: &ModeSummary, seed: u64, class: NodeClass) -> Option<f64> {
    m.per_seed.iter().find(|s| s.seed == seed)?.reward.get(&class).map(|s| s.mean)
}

/// Seeds where `pick(collab) <op> pick(solo)` holds, out of shared seeds.
fn seed_wins(solo: &ModeSummary, collab: &ModeSummary, class: NodeClass, better: fn(f64, f64) -> bool) -> (usize, usize) {
    let mut wins = 0;
    let mut shared = 0;
    for s in &collab.seeds {
        if let (Some(c), Some(b)) = (class_mean(collab, *s, class), class_mean(solo, *s, class)) {
            shared += 1;
            wins += better(c, b) as usize;
        }
    }
    (wins, shared)
}

/// The solo-versus-collaborative orderings.
pub fn ordering_checks(solo: &ModeSummary, collab: &ModeSummary) -> Vec<Check> {
    use NodeClass::{Strong, Weak};
    let mut out = Vec::new();
    let get = |m: &ModeSummary, c| m.reward.get(&c).copied().unwrap_or_default();

    let (s, w) = (get(solo, Strong), get(solo, Weak));
    let ratio = if w.mean > 0.0 { s.mean / w.mean } else { f64::INFINITY };
    out.push(Check {
        name: "solo-inequality",
        passed: ratio >= 2.0 && w.cv() >= 0.25,
        detail: format!("strong/weak mean {ratio:.3} (need >= 2), weak cv {:.3} (need >= 0.25)", w.cv()),
    });

    let worst = collab
        .per_seed
        .iter()
        .map(|s| s.reward.get(&Weak).map_or(f64::INFINITY, ClassStats::cv))
        .fold(0.0, f64::max);
    out.push(Check {
        name: "collab-weak-spread",
        passed: worst <= 0.05,
        detail: format!("largest per-seed weak std/mean {worst:.4} (need <= 0.05)"),
    });

    // Four seeds out of five, scaled to however many were run.
    let need = |n: usize| (4 * n).div_ceil(5).max(1);
    let (wins, n) = seed_wins(solo, collab, Weak, |c, b| c > b);
    out.push(Check {
        name: "collab-weak-gain",
        passed: wins >= need(n),
        detail: format!("weak collab > solo in {wins} of {n} seeds (need >= {})", need(n)),
    });
    let (wins, n) = seed_wins(solo, collab, Strong, |c, b| c < b);
    out.push(Check {
        name: "collab-strong-loss",
        passed: wins >= need(n),
        detail: format!("strong collab < solo in {wins} of {n} seeds (need >= {})", need(n)),
    });

    let e = |m: &ModeSummary, c| m.eth_per_ghz.get(&c).copied().unwrap_or(0.0);
    out.push(Check {
        name: "efficiency-ordering",
        passed: e(collab, Weak) > e(solo, Weak) && e(collab, Strong) < e(solo, Strong),
        detail: format!(
            "weak {:.4} -> {:.4}, strong {:.4} -> {:.4} (solo -> collab)",
            e(solo, Weak),
            e(collab, Weak),
            e(solo, Strong),
            e(collab, Strong)
        ),
    });

    let energy = match (solo.nonces_per_weak_block, collab.nonces_per_weak_block) {
        (Some(s), Some(c)) => (c < s, format!("nonces per weak block {s:.0} solo, {c:.0} collab")),
        (s, c) => (false, format!("undefined: solo {s:?}, collab {c:?}")),
    };
    out.push(Check { name: "energy-proxy", passed: energy.0, detail: energy.1 });
    out
}

/// Loads both report directories and checks the orderings between them.
pub fn compare(baseline: &Path, candidate: &Path) -> Result<Vec<Check>, ExperimentError> {
    let b = load_summary(baseline)?;
    let c = load_summary(candidate)?;
    let solo = b
        .mode(Mode::Solo)
        .ok_or_else(|| ExperimentError::ConfigInvalid(format!("{} holds no solo results", baseline.display())))?;
    let collab = c
        .mode(Mode::Collab)
        .ok_or_else(|| ExperimentError::ConfigInvalid(format!("{} holds no collab results", candidate.display())))?;
    let mut checks = ordering_checks(solo, collab);
    let conserved = b.modes.iter().chain(&c.modes).flat_map(|m| &m.per_seed).all(|s| s.conserved);
    checks.push(Check { name: "conservation", passed: conserved, detail: format!("every seed conserved: {conserved}") });
    Ok(checks)
}
