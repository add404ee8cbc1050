//! Scenario configuration, loadable from JSON.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatencyModel, SimError};
use crate::chain::Difficulty;
use crate::{Amount, NodeId, Tick, WEI_PER_ETH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeClass {
    Strong,
    Weak,
}

impl NodeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::Strong => "strong",
            NodeClass::Weak => "weak",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Solo,
    #[serde(alias = "seeking")]
    CollaboratorSeeking,
}

/// How a group member treats its contribution proof.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Behavior {
    #[default]
    Honest,
    /// Replaces up to `count` digests inside its extra segments.
    Fabricate { count: u32 },
    /// Never reports a found block and submits made-up digests throughout.
    Freeride,
}

impl Behavior {
    pub fn is_honest(self) -> bool {
        self == Behavior::Honest
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: NodeId,
    pub class: NodeClass,
    /// Extra ticks spent before checking each nonce.
    pub nonce_delay: Tick,
    #[serde(default)]
    pub clock_skew: i64,
    pub initial_role: Role,
    #[serde(default)]
    pub behavior: Behavior,
}

pub type LatencyConfig = LatencyModel;

fn default_latency() -> LatencyModel {
    LatencyModel { base: 500, jitter: 1_000 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub nodes: Vec<NodeConfig>,
    pub difficulty: u16,
    /// Nonce window searched per header.
    pub n_total: u64,
    pub blocks_target: u64,
    #[serde(with = "crate::chain::amount_string")]
    pub block_reward: Amount,
    /// Cost of one hash for every node, in ticks.
    pub base_hash_cost: Tick,
    pub group_target_size: usize,
    pub overlap_fraction: f64,
    pub audit_window: Option<u64>,
    pub tolerance: f64,
    pub threshold: Option<u32>,
    pub sample_stride: u64,
    pub audit_probability: f64,
    pub latency: LatencyModel,
    pub formation_deadline: Tick,
    /// Seeking nodes broadcast their request at a uniform offset in `[0, this]`.
    pub initiate_jitter: Tick,
    pub settlement_deadline: Tick,
    pub oracle_interval: Tick,
    pub max_block_txs: usize,
    pub max_ticks: Tick,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::desk()
    }
}

const DESK_SKEWS: [i64; 9] = [-40, 25, -10, 50, -25, 5, 35, -50, 15];

impl ScenarioConfig {
    /// Three strong and six weak miners, weak ones 8× slower and seeking a
    /// group; sized so 50 blocks take a fraction of a second of CPU.
    pub fn desk() -> Self {
        let base = 714;
        let nodes = (0..9u32)
            .map(|i| {
                let strong = i < 3;
                NodeConfig {
                    id: NodeId(i),
                    class: if strong { NodeClass::Strong } else { NodeClass::Weak },
                    nonce_delay: if strong { 0 } else { 5_000 },
                    clock_skew: DESK_SKEWS[i as usize],
                    initial_role: if strong { Role::Solo } else { Role::CollaboratorSeeking },
                    behavior: Behavior::Honest,
                }
            })
            .collect();
        ScenarioConfig {
            name: "desk".into(),
            nodes,
            difficulty: 14,
            n_total: 1 << 16,
            blocks_target: 50,
            block_reward: 2 * WEI_PER_ETH,
            base_hash_cost: base,
            group_target_size: 6,
            overlap_fraction: 0.002,
            audit_window: None,
            tolerance: 1.5,
            threshold: None,
            sample_stride: 64,
            audit_probability: 0.05,
            latency: default_latency(),
            formation_deadline: 200_000,
            initiate_jitter: 1_000,
            settlement_deadline: 250_000,
            oracle_interval: 100_000,
            max_block_txs: 32,
            max_ticks: 3_600 * crate::TICKS_PER_SECOND,
        }
    }

    /// `n` identical seeking miners and nothing else.
    pub fn equal_group(n: u32, cost: Tick) -> Self {
        let nodes = (0..n)
            .map(|i| NodeConfig {
                id: NodeId(i),
                class: NodeClass::Weak,
                nonce_delay: 0,
                clock_skew: DESK_SKEWS[i as usize % DESK_SKEWS.len()],
                initial_role: Role::CollaboratorSeeking,
                behavior: Behavior::Honest,
            })
            .collect();
        ScenarioConfig {
            name: format!("equal-{n}"),
            nodes,
            base_hash_cost: cost,
            group_target_size: (n as usize).max(2),
            ..ScenarioConfig::desk()
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every node mines alone.
    pub fn all_solo(mut self) -> Self {
        for n in &mut self.nodes {
            n.initial_role = Role::Solo;
        }
        self
    }

    pub fn cost_of(&self, node: &NodeConfig) -> Tick {
        self.base_hash_cost + node.nonce_delay
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.blocks_target == 0 {
            return bad("blocks_target must be at least 1".into());
        }
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return bad("duplicate node ids".into());
        }
        if Difficulty::new(self.difficulty).is_err() {
            return bad(format!("difficulty {} outside [0, 256]", self.difficulty));
        }
        if self.n_total == 0 {
            return bad("n_total must be positive".into());
        }
        if let Some(n) = self.nodes.iter().find(|n| self.cost_of(n) == 0) {
            return bad(format!("{} would hash in zero time", n.id));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 1.0) {
            return bad(format!("overlap_fraction {} outside (0, 1)", self.overlap_fraction));
        }
        if self.tolerance.is_nan() || self.tolerance < 1.0 {
            return bad(format!("tolerance {} below 1", self.tolerance));
        }
        if self.sample_stride == 0 {
            return bad("sample_stride must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.audit_probability) {
            return bad(format!("audit_probability {} outside [0, 1]", self.audit_probability));
        }
        if self.group_target_size < 2 {
            return bad("group_target_size must be at least 2".into());
        }
        if self.max_block_txs == 0 {
            return bad("max_block_txs must be positive".into());
        }
        Ok(())
    }
}
