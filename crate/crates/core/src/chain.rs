//! Minimal chain state: headers, blocks, the leading-zero difficulty test and
//! a balance ledger that settles block rewards and signed withdrawals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::threshold::{verify_withdrawal, GroupPublicKey, SignedWithdrawal};
use crate::{Amount, Tick};

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        impl $name {
            pub const LEN: usize = $len;

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = hex::FromHexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

/// 32-byte output of the header hash.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HashDigest(pub [u8; 32]);
hex_bytes!(HashDigest, 32);

impl HashDigest {
    pub const ZERO: HashDigest = HashDigest([0u8; 32]);

    pub fn of(data: &[u8]) -> Self {
        HashDigest(Sha256::digest(data).into())
    }

    /// Number of leading zero bits.
    pub fn leading_zeros(&self) -> u32 {
        let mut bits = 0;
        for byte in self.0 {
            if byte == 0 {
                bits += 8;
            } else {
                bits += byte.leading_zeros();
                break;
            }
        }
        bits
    }
}

/// 20-byte account identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 20]);
hex_bytes!(Address, 20);

impl Address {
    /// First 20 bytes of a digest.
    pub fn from_digest(digest: &HashDigest) -> Self {
        let mut out = [0u8; 20];
        out.copy_from_slice(&digest.0[..20]);
        Address(out)
    }

    /// Deterministic personal account of a simulated node.
    pub fn for_node(id: u32) -> Self {
        let mut buf = b"cpow/node-account/".to_vec();
        buf.extend_from_slice(&id.to_be_bytes());
        Address::from_digest(&HashDigest::of(&buf))
    }
}

/// Proof-of-work difficulty as a count of required leading zero bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct Difficulty(u16);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("difficulty must be at most 256 leading zero bits, got {0}")]
pub struct DifficultyOutOfRange(pub u16);

impl Difficulty {
    pub const MAX: Difficulty = Difficulty(256);

    pub fn new(leading_zero_bits: u16) -> Result<Self, DifficultyOutOfRange> {
        if leading_zero_bits > 256 {
            return Err(DifficultyOutOfRange(leading_zero_bits));
        }
        Ok(Difficulty(leading_zero_bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

impl TryFrom<u16> for Difficulty {
    type Error = DifficultyOutOfRange;

    fn try_from(v: u16) -> Result<Self, Self::Error> {
        Difficulty::new(v)
    }
}

impl From<Difficulty> for u16 {
    fn from(d: Difficulty) -> u16 {
        d.0
    }
}

/// True iff the first `d` bits of `digest` are zero.
pub fn meets_difficulty(digest: &HashDigest, d: Difficulty) -> bool {
    digest.leading_zeros() >= u32::from(d.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub from: Address,
    pub to: Address,
    #[serde(with = "amount_string")]
    pub amount: Amount,
    pub seq: u64,
    pub payload_digest: HashDigest,
}

impl Transaction {
    pub const ENCODED_LEN: usize = 20 + 20 + 16 + 8 + 32;

    pub fn canonical_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[0..20].copy_from_slice(&self.from.0);
        out[20..40].copy_from_slice(&self.to.0);
        out[40..56].copy_from_slice(&self.amount.to_be_bytes());
        out[56..64].copy_from_slice(&self.seq.to_be_bytes());
        out[64..96].copy_from_slice(&self.payload_digest.0);
        out
    }

    pub fn digest(&self) -> HashDigest {
        HashDigest::of(&self.canonical_bytes())
    }
}

/// Commitment to an ordered transaction list.
pub fn tx_root(txs: &[Transaction]) -> HashDigest {
    let mut hasher = Sha256::new();
    hasher.update(b"cpow/tx-root");
    hasher.update((txs.len() as u64).to_be_bytes());
    for tx in txs {
        hasher.update(tx.digest().0);
    }
    HashDigest(hasher.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockHeader {
    pub parent: HashDigest,
    pub tx_root: HashDigest,
    pub timestamp: Tick,
    pub beneficiary: Address,
    pub difficulty: Difficulty,
    pub nonce: u64,
}

/// Length of the serialized header, excluding the nonce.
pub const HEADER_BYTES: usize = 32 + 32 + 8 + 20 + 2;

impl BlockHeader {
    /// Big-endian fixed-width encoding of every field except the nonce, in
    /// declaration order.
    pub fn canonical_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0..32].copy_from_slice(&self.parent.0);
        out[32..64].copy_from_slice(&self.tx_root.0);
        out[64..72].copy_from_slice(&self.timestamp.to_be_bytes());
        out[72..92].copy_from_slice(&self.beneficiary.0);
        out[92..94].copy_from_slice(&self.difficulty.0.to_be_bytes());
        out
    }

    /// Digest of the header sealed with its own nonce; this is the block id.
    pub fn block_hash(&self) -> HashDigest {
        hash_header(self, self.nonce)
    }
}

/// SHA-256 over the canonical header bytes followed by the big-endian nonce.
/// The header's own `nonce` field is ignored.
pub fn hash_header(header: &BlockHeader, nonce: u64) -> HashDigest {
    hash_header_bytes(&header.canonical_bytes(), nonce)
}

pub fn hash_header_bytes(header_bytes: &[u8; HEADER_BYTES], nonce: u64) -> HashDigest {
    let mut hasher = Sha256::new();
    hasher.update(header_bytes);
    hasher.update(nonce.to_be_bytes());
    HashDigest(hasher.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
}

impl Block {
    pub fn hash(&self) -> HashDigest {
        self.header.block_hash()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("block parent {got} does not extend tip {expected}")]
    BadParent { expected: HashDigest, got: HashDigest },
    #[error("block hash does not meet difficulty {required} (header declares {declared})")]
    DifficultyNotMet { required: u16, declared: u16 },
    #[error("block timestamp {got} precedes parent timestamp {parent}")]
    TimestampRegression { parent: Tick, got: Tick },
    #[error("transaction root does not match block body")]
    TxRootMismatch,
    #[error("sequence {got} from {sender} is not above last applied {last:?}")]
    BadSequence { sender: Address, last: Option<u64>, got: u64 },
    #[error("{account} holds {balance}, cannot move {amount}")]
    InsufficientFunds { account: Address, balance: Amount, amount: Amount },
    #[error("withdrawal signature does not verify")]
    BadSignature,
    #[error("group key does not control sender {0}")]
    WrongSigner(Address),
}

/// Per-address balances plus the accepted chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    difficulty: Difficulty,
    balances: BTreeMap<Address, Amount>,
    initial_supply: Amount,
    minted: Amount,
    chain: Vec<Block>,
    last_seq: BTreeMap<Address, u64>,
}

impl Ledger {
    pub fn new(difficulty: Difficulty) -> Self {
        Self::with_endowments(difficulty, std::iter::empty())
    }

    pub fn with_endowments(
        difficulty: Difficulty,
        endowments: impl IntoIterator<Item = (Address, Amount)>,
    ) -> Self {
        let mut balances = BTreeMap::new();
        let mut initial_supply = 0;
        for (addr, amount) in endowments {
            *balances.entry(addr).or_insert(0) += amount;
            initial_supply += amount;
        }
        Ledger {
            difficulty,
            balances,
            initial_supply,
            minted: 0,
            chain: Vec::new(),
            last_seq: BTreeMap::new(),
        }
    }

    pub fn difficulty(&self) -> Difficulty {
        self.difficulty
    }

    /// Hash of the newest block, or [`HashDigest::ZERO`] for an empty chain.
    pub fn tip(&self) -> HashDigest {
        self.chain.last().map(Block::hash).unwrap_or(HashDigest::ZERO)
    }

    pub fn tip_timestamp(&self) -> Tick {
        self.chain.last().map(|b| b.header.timestamp).unwrap_or(0)
    }

    pub fn height(&self) -> u64 {
        self.chain.len() as u64
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn balance(&self, addr: &Address) -> Amount {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<Address, Amount> {
        &self.balances
    }

    pub fn total_balance(&self) -> Amount {
        self.balances.values().sum()
    }

    pub fn initial_supply(&self) -> Amount {
        self.initial_supply
    }

    pub fn minted(&self) -> Amount {
        self.minted
    }

    pub fn last_seq(&self, addr: &Address) -> Option<u64> {
        self.last_seq.get(addr).copied()
    }

    /// Σ balances − initial supply equals everything minted by blocks.
    pub fn is_conserved(&self) -> bool {
        self.total_balance() == self.initial_supply + self.minted
    }

    fn check_header(&self, header: &BlockHeader, parent: HashDigest, parent_ts: Tick) -> Result<(), LedgerError> {
        if header.parent != parent {
            return Err(LedgerError::BadParent { expected: parent, got: header.parent });
        }
        if header.difficulty < self.difficulty || !meets_difficulty(&header.block_hash(), header.difficulty) {
            return Err(LedgerError::DifficultyNotMet {
                required: self.difficulty.bits(),
                declared: header.difficulty.bits(),
            });
        }
        if header.timestamp < parent_ts {
            return Err(LedgerError::TimestampRegression { parent: parent_ts, got: header.timestamp });
        }
        Ok(())
    }

    /// Appends `block`, crediting its beneficiary with `block_reward` and
    /// applying its transfers. Atomic: on error the ledger is unchanged.
    pub fn apply_block(&mut self, block: Block, block_reward: Amount) -> Result<(), LedgerError> {
        self.check_header(&block.header, self.tip(), self.tip_timestamp())?;
        if tx_root(&block.transactions) != block.header.tx_root {
            return Err(LedgerError::TxRootMismatch);
        }

        let mut balances = self.balances.clone();
        let mut last_seq = self.last_seq.clone();
        *balances.entry(block.header.beneficiary).or_insert(0) += block_reward;
        for tx in &block.transactions {
            transfer(&mut balances, &mut last_seq, tx)?;
        }

        self.balances = balances;
        self.last_seq = last_seq;
        self.minted += block_reward;
        self.chain.push(block);
        Ok(())
    }

    /// Moves funds out of a group-controlled account on the strength of a
    /// threshold signature.
    pub fn apply_withdrawal(
        &mut self,
        tx: &Transaction,
        sig: &SignedWithdrawal,
        group_pub: &GroupPublicKey,
    ) -> Result<(), LedgerError> {
        if group_pub.etherbase() != tx.from {
            return Err(LedgerError::WrongSigner(tx.from));
        }
        if !verify_withdrawal(group_pub, tx, sig) {
            return Err(LedgerError::BadSignature);
        }
        transfer(&mut self.balances, &mut self.last_seq, tx)
    }

    /// Re-checks every parent link, timestamp and proof of work from genesis.
    pub fn verify_chain(&self) -> Result<(), LedgerError> {
        let mut parent = HashDigest::ZERO;
        let mut parent_ts = 0;
        for block in &self.chain {
            self.check_header(&block.header, parent, parent_ts)?;
            if tx_root(&block.transactions) != block.header.tx_root {
                return Err(LedgerError::TxRootMismatch);
            }
            parent = block.hash();
            parent_ts = block.header.timestamp;
        }
        Ok(())
    }

    /// Stable fingerprint of balances and accepted blocks.
    pub fn state_digest(&self) -> HashDigest {
        let mut hasher = Sha256::new();
        hasher.update(b"cpow/ledger");
        for (addr, bal) in &self.balances {
            hasher.update(addr.0);
            hasher.update(bal.to_be_bytes());
        }
        for block in &self.chain {
            hasher.update(block.hash().0);
        }
        HashDigest(hasher.finalize().into())
    }
}

fn transfer(
    balances: &mut BTreeMap<Address, Amount>,
    last_seq: &mut BTreeMap<Address, u64>,
    tx: &Transaction,
) -> Result<(), LedgerError> {
    let last = last_seq.get(&tx.from).copied();
    if last.is_some_and(|l| tx.seq <= l) {
        return Err(LedgerError::BadSequence { sender: tx.from, last, got: tx.seq });
    }
    let balance = balances.get(&tx.from).copied().unwrap_or(0);
    if balance < tx.amount {
        return Err(LedgerError::InsufficientFunds { account: tx.from, balance, amount: tx.amount });
    }
    if tx.amount > 0 {
        *balances.entry(tx.from).or_insert(0) -= tx.amount;
        *balances.entry(tx.to).or_insert(0) += tx.amount;
    }
    last_seq.insert(tx.from, tx.seq);
    Ok(())
}

/// One line of a header-hash regression file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldenVector {
    pub header_bytes: [u8; HEADER_BYTES],
    pub nonce: u64,
    pub digest: HashDigest,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GoldenError {
    #[error("line {line}: expected three hex fields")]
    FieldCount { line: usize },
    #[error("line {line}: {reason}")]
    BadField { line: usize, reason: String },
}

impl GoldenVector {
    pub fn new(header: &BlockHeader, nonce: u64) -> Self {
        GoldenVector { header_bytes: header.canonical_bytes(), nonce, digest: hash_header(header, nonce) }
    }

    pub fn holds(&self) -> bool {
        hash_header_bytes(&self.header_bytes, self.nonce) == self.digest
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {}", hex::encode(self.header_bytes), hex::encode(self.nonce.to_be_bytes()), self.digest)
    }
}

/// Parses `hex(header-bytes) hex(nonce) hex(digest)` lines. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_golden(text: &str) -> Result<Vec<GoldenVector>, GoldenError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [h, n, d] = fields[..] else {
            return Err(GoldenError::FieldCount { line });
        };
        let bad = |what: &str, e: hex::FromHexError| GoldenError::BadField { line, reason: format!("{what}: {e}") };
        let mut header_bytes = [0u8; HEADER_BYTES];
        hex::decode_to_slice(h, &mut header_bytes).map_err(|e| bad("header", e))?;
        let mut nonce = [0u8; 8];
        hex::decode_to_slice(n, &mut nonce).map_err(|e| bad("nonce", e))?;
        let digest = d.parse().map_err(|e| bad("digest", e))?;
        out.push(GoldenVector { header_bytes, nonce: u64::from_be_bytes(nonce), digest });
    }
    Ok(out)
}

pub(crate) mod amount_string {
    //! Amounts exceed JSON's safe integer range, so they travel as decimal strings.
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::Amount;

    pub fn serialize<S: Serializer>(v: &Amount, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Amount, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Str(String),
            Int(u64),
        }
        match Repr::deserialize(d)? {
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Int(i) => Ok(Amount::from(i)),
        }
    }
}
