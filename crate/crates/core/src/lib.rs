//! Collaborative proof-of-work.
//!
//! Miners with similar hashrates form groups on demand, split the nonce space
//! between them with small secret overlaps, and mine into a shared account
//! whose key exists only as threshold shares. A trusted verifier cross-checks
//! the overlapping parts of each member's nonce→digest trace, pays honest
//! members in proportion to evidenced work, and reconstructs the group key
//! only long enough to sign their withdrawals.
//!
//! Everything runs inside a deterministic discrete-event simulator
//! ([`simnet`]) so that experiments are reproducible from a seed.

pub mod chain;
pub mod coordination;
pub mod cvrm;
pub mod experiments;
pub mod group;
pub mod mining;
pub mod simnet;
pub mod threshold;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Virtual time in microseconds.
pub type Tick = u64;
/// Balances and transfer amounts, in wei.
pub type Amount = u128;

pub const TICKS_PER_SECOND: Tick = 1_000_000;
pub const WEI_PER_ETH: Amount = 1_000_000_000_000_000_000;

/// Identity of a simulated node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}
