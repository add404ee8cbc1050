//! Threshold custody of a group key: Shamir t-of-n shares of a secret scalar,
//! the matching public key and shared etherbase, Lagrange reconstruction and
//! Schnorr-style withdrawal signatures.
//!
//! The arithmetic runs in the order-q subgroup of quadratic residues modulo a
//! 127-bit safe prime p = 2q + 1. These parameters are small enough to keep
//! every operation in `u128` and are **not** production cryptography: the
//! discrete log in a 127-bit group is within reach of a determined attacker.
//! They exist so that the share/sign/verify protocol can be exercised
//! deterministically and fast.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{Address, HashDigest, Transaction};

/// Safe prime p; group elements live in [1, p).
pub const GROUP_MODULUS: u128 = 0x7fff_ffff_ffff_ffff_ffff_ffff_ffff_f55f;
/// Prime q = (p − 1) / 2, the order of the subgroup and the scalar field size.
pub const SCALAR_ORDER: u128 = 0x3fff_ffff_ffff_ffff_ffff_ffff_ffff_faaf;
/// 4 = 2² is a quadratic residue ≠ 1, hence generates the order-q subgroup.
pub const GENERATOR: u128 = 4;

/// Width of the canonical big-endian encoding of scalars and group elements.
pub const ENCODED_WIDTH: usize = 16;

#[inline]
fn add_mod(a: u128, b: u128, m: u128) -> u128 {
    // a, b < m < 2^127, so the sum cannot overflow.
    let s = a + b;
    if s >= m {
        s - m
    } else {
        s
    }
}

#[inline]
fn sub_mod(a: u128, b: u128, m: u128) -> u128 {
    if a >= b {
        a - b
    } else {
        m - (b - a)
    }
}

fn mul_mod(a: u128, b: u128, m: u128) -> u128 {
    if let (Ok(a64), Ok(b64)) = (u64::try_from(a), u64::try_from(b)) {
        return (u128::from(a64) * u128::from(b64)) % m;
    }
    let (mut acc, mut base, mut e) = (0u128, a % m, b % m);
    while e > 0 {
        if e & 1 == 1 {
            acc = add_mod(acc, base, m);
        }
        base = add_mod(base, base, m);
        e >>= 1;
    }
    acc
}

fn pow_mod(base: u128, mut exp: u128, m: u128) -> u128 {
    let mut result = 1u128 % m;
    let mut b = base % m;
    while exp > 0 {
        if exp & 1 == 1 {
            result = mul_mod(result, b, m);
        }
        b = mul_mod(b, b, m);
        exp >>= 1;
    }
    result
}

/// Element of the scalar field Z_q.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FieldElement(u128);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    pub fn new(v: u128) -> Self {
        FieldElement(v % SCALAR_ORDER)
    }

    pub fn value(self) -> u128 {
        self.0
    }

    pub fn random(rng: &mut impl RngCore) -> Self {
        loop {
            let mut buf = [0u8; 16];
            rng.fill_bytes(&mut buf);
            let v = u128::from_be_bytes(buf) >> 2;
            if v < SCALAR_ORDER {
                return FieldElement(v);
            }
        }
    }

    pub fn pow(self, e: u128) -> Self {
        FieldElement(pow_mod(self.0, e, SCALAR_ORDER))
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn invert(self) -> Option<Self> {
        (self.0 != 0).then(|| self.pow(SCALAR_ORDER - 2))
    }

    pub fn to_bytes(self) -> [u8; ENCODED_WIDTH] {
        self.0.to_be_bytes()
    }

    /// Rejects non-canonical encodings (values ≥ q).
    pub fn from_bytes(bytes: [u8; ENCODED_WIDTH]) -> Option<Self> {
        let v = u128::from_be_bytes(bytes);
        (v < SCALAR_ORDER).then_some(FieldElement(v))
    }

    /// Reduces a 256-bit digest into the field.
    pub fn from_digest(d: &HashDigest) -> Self {
        let hi = u128::from_be_bytes(d.0[..16].try_into().expect("16 bytes"));
        let lo = u128::from_be_bytes(d.0[16..].try_into().expect("16 bytes"));
        // 2^128 mod q, precomputed.
        const TWO_128: u128 = 0x1544;
        FieldElement(add_mod(mul_mod(hi % SCALAR_ORDER, TWO_128, SCALAR_ORDER), lo % SCALAR_ORDER, SCALAR_ORDER))
    }
}

impl Add for FieldElement {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        FieldElement(add_mod(self.0, rhs.0, SCALAR_ORDER))
    }
}

impl Sub for FieldElement {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        FieldElement(sub_mod(self.0, rhs.0, SCALAR_ORDER))
    }
}

impl Mul for FieldElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        FieldElement(mul_mod(self.0, rhs.0, SCALAR_ORDER))
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldElement({:#x})", self.0)
    }
}

/// Element of the order-q subgroup of Z_p^*.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupElement(u128);

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement(1);

    pub fn generator_pow(k: FieldElement) -> Self {
        GroupElement(pow_mod(GENERATOR, k.0, GROUP_MODULUS))
    }

    pub fn pow(self, k: FieldElement) -> Self {
        GroupElement(pow_mod(self.0, k.0, GROUP_MODULUS))
    }

    pub fn value(self) -> u128 {
        self.0
    }

    pub fn to_bytes(self) -> [u8; ENCODED_WIDTH] {
        self.0.to_be_bytes()
    }

    /// Accepts any value in [1, p); subgroup membership is enforced by
    /// [`GroupElement::is_in_subgroup`] where it matters.
    pub fn from_bytes(bytes: [u8; ENCODED_WIDTH]) -> Option<Self> {
        let v = u128::from_be_bytes(bytes);
        (v != 0 && v < GROUP_MODULUS).then_some(GroupElement(v))
    }

    pub fn is_in_subgroup(self) -> bool {
        self.0 != 0 && self.0 < GROUP_MODULUS && pow_mod(self.0, SCALAR_ORDER, GROUP_MODULUS) == 1
    }
}

impl Mul for GroupElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        GroupElement(mul_mod(self.0, rhs.0, GROUP_MODULUS))
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({:#x})", self.0)
    }
}

macro_rules! serde_as_hex16 {
    ($t:ty, $ctor:expr) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.to_bytes()))
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let mut buf = [0u8; ENCODED_WIDTH];
                hex::decode_to_slice(&s, &mut buf).map_err(serde::de::Error::custom)?;
                $ctor(buf).ok_or_else(|| serde::de::Error::custom("non-canonical encoding"))
            }
        }
    };
}

serde_as_hex16!(FieldElement, FieldElement::from_bytes);
serde_as_hex16!(GroupElement, GroupElement::from_bytes);

/// g^K for the group secret K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupPublicKey(pub GroupElement);

impl GroupPublicKey {
    pub fn to_bytes(self) -> [u8; ENCODED_WIDTH] {
        self.0.to_bytes()
    }

    /// Account controlled by this key: first 20 bytes of SHA-256 over the
    /// canonical key encoding.
    pub fn etherbase(&self) -> Address {
        Address::from_digest(&HashDigest::of(&self.to_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKeyPair {
    pub public: GroupPublicKey,
    pub threshold: u32,
    pub share_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretShare {
    pub index: u32,
    pub value: FieldElement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedWithdrawal {
    pub tx_digest: HashDigest,
    pub commitment: GroupElement,
    pub response: FieldElement,
}

impl SignedWithdrawal {
    pub const ENCODED_LEN: usize = 32 + 2 * ENCODED_WIDTH;

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[..32].copy_from_slice(&self.tx_digest.0);
        out[32..48].copy_from_slice(&self.commitment.to_bytes());
        out[48..].copy_from_slice(&self.response.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; Self::ENCODED_LEN]) -> Option<Self> {
        Some(SignedWithdrawal {
            tx_digest: HashDigest::from_slice(&bytes[..32])?,
            commitment: GroupElement::from_bytes(bytes[32..48].try_into().ok()?)?,
            response: FieldElement::from_bytes(bytes[48..].try_into().ok()?)?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThresholdError {
    #[error("threshold {t} invalid for {n} shares (need 2 <= t <= n)")]
    BadThreshold { n: u32, t: u32 },
    #[error("{have} shares supplied, {need} required")]
    InsufficientShares { have: usize, need: u32 },
    #[error("share index {0} appears more than once")]
    DuplicateIndex(u32),
    #[error("share index 0 would reveal the secret")]
    ZeroIndex,
}

/// ⌈(n + 1) / 2⌉: a strict majority of shares.
pub fn majority_threshold(n: u32) -> u32 {
    (n + 2) / 2
}

/// Deals a fresh group secret K as n Shamir shares with threshold t and
/// returns the public key. K itself is dropped before returning.
pub fn dkg(n: u32, t: u32, rng: &mut impl RngCore) -> Result<(GroupKeyPair, Vec<SecretShare>), ThresholdError> {
    if t < 2 || t > n {
        return Err(ThresholdError::BadThreshold { n, t });
    }
    let secret = loop {
        let k = FieldElement::random(rng);
        if k != FieldElement::ZERO {
            break k;
        }
    };
    let mut coeffs = Vec::with_capacity(t as usize);
    coeffs.push(secret);
    coeffs.extend((1..t).map(|_| FieldElement::random(rng)));

    let shares = (1..=n)
        .map(|i| {
            let x = FieldElement::new(u128::from(i));
            // Horner evaluation of q(x).
            let value = coeffs.iter().rev().fold(FieldElement::ZERO, |acc, c| acc * x + *c);
            SecretShare { index: i, value }
        })
        .collect();
    let public = GroupPublicKey(GroupElement::generator_pow(secret));
    Ok((GroupKeyPair { public, threshold: t, share_count: n }, shares))
}

pub fn derive_etherbase(keys: &GroupKeyPair) -> Address {
    keys.public.etherbase()
}

/// Lagrange interpolation at x = 0 through every supplied share, whatever
/// their number.
pub fn interpolate_at_zero(shares: &[SecretShare]) -> Result<FieldElement, ThresholdError> {
    for (i, s) in shares.iter().enumerate() {
        if s.index == 0 {
            return Err(ThresholdError::ZeroIndex);
        }
        if shares[..i].iter().any(|o| o.index == s.index) {
            return Err(ThresholdError::DuplicateIndex(s.index));
        }
    }
    let mut acc = FieldElement::ZERO;
    for (i, si) in shares.iter().enumerate() {
        let xi = FieldElement::new(u128::from(si.index));
        let mut num = FieldElement::ONE;
        let mut den = FieldElement::ONE;
        for (j, sj) in shares.iter().enumerate() {
            if i == j {
                continue;
            }
            let xj = FieldElement::new(u128::from(sj.index));
            num = num * xj;
            den = den * (xj - xi);
        }
        let coeff = num * den.invert().expect("distinct indices give non-zero denominators");
        acc = acc + si.value * coeff;
    }
    Ok(acc)
}

/// Recovers K from at least `t` distinct shares.
pub fn reconstruct(shares: &[SecretShare], t: u32) -> Result<FieldElement, ThresholdError> {
    if shares.len() < t as usize {
        return Err(ThresholdError::InsufficientShares { have: shares.len(), need: t });
    }
    interpolate_at_zero(shares)
}

fn challenge(commitment: GroupElement, public: &GroupPublicKey, tx_digest: &HashDigest) -> FieldElement {
    let mut hasher = Sha256::new();
    hasher.update(b"cpow/withdrawal-sig");
    hasher.update(commitment.to_bytes());
    hasher.update(public.to_bytes());
    hasher.update(tx_digest.0);
    FieldElement::from_digest(&HashDigest(hasher.finalize().into()))
}

/// Schnorr signature over the transaction digest with the group secret.
pub fn sign_withdrawal(k: &FieldElement, tx: &Transaction, rng: &mut impl RngCore) -> SignedWithdrawal {
    let public = GroupPublicKey(GroupElement::generator_pow(*k));
    let tx_digest = tx.digest();
    let nonce = loop {
        let r = FieldElement::random(rng);
        if r != FieldElement::ZERO {
            break r;
        }
    };
    let commitment = GroupElement::generator_pow(nonce);
    let e = challenge(commitment, &public, &tx_digest);
    SignedWithdrawal { tx_digest, commitment, response: nonce + e * *k }
}

/// Checks g^s = R · P^e with e = H(R ‖ P ‖ digest(tx)).
pub fn verify_withdrawal(public: &GroupPublicKey, tx: &Transaction, sig: &SignedWithdrawal) -> bool {
    if sig.tx_digest != tx.digest() {
        return false;
    }
    let e = challenge(sig.commitment, public, &sig.tx_digest);
    GroupElement::generator_pow(sig.response) == sig.commitment * public.0.pow(e)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tx(amount: u128) -> Transaction {
        Transaction {
            from: Address::for_node(1),
            to: Address::for_node(2),
            amount,
            seq: 1,
            payload_digest: HashDigest::ZERO,
        }
    }

    #[test]
    fn parameters_form_a_schnorr_group() {
        assert_eq!(GROUP_MODULUS, 2 * SCALAR_ORDER + 1);
        assert!(GroupElement(GENERATOR).is_in_subgroup());
        assert_ne!(GENERATOR, 1);
        assert_eq!(pow_mod(2, 128, SCALAR_ORDER), 0x1544);
    }

    #[test]
    fn field_arithmetic_matches_small_cases() {
        let a = FieldElement::new(SCALAR_ORDER - 1);
        assert_eq!(a + FieldElement::ONE, FieldElement::ZERO);
        assert_eq!(FieldElement::ZERO - FieldElement::ONE, a);
        assert_eq!(a * a, FieldElement::ONE);
        let x = FieldElement::new(123_456_789);
        assert_eq!(x * x.invert().unwrap(), FieldElement::ONE);
        assert_eq!(FieldElement::ZERO.invert(), None);
    }

    #[test]
    fn mul_mod_on_wide_operands() {
        // Expected values computed with arbitrary-precision integers.
        let a = FieldElement::new((1u128 << 100) + 7);
        let b = FieldElement::new((1u128 << 90) + 3);
        assert_eq!((a * b).value(), 0x301c0005510000000000000015);
        let c = FieldElement::new(SCALAR_ORDER - 5);
        let d = FieldElement::new(SCALAR_ORDER - 9);
        assert_eq!((c * d).value(), 45);
    }

    #[test]
    fn any_two_of_three_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (keys, shares) = dkg(3, 2, &mut rng).unwrap();
        let k12 = reconstruct(&shares[0..2], 2).unwrap();
        let k23 = reconstruct(&shares[1..3], 2).unwrap();
        let k13 = reconstruct(&[shares[0], shares[2]], 2).unwrap();
        assert_eq!(k12, k23);
        assert_eq!(k12, k13);
        assert_eq!(GroupPublicKey(GroupElement::generator_pow(k12)), keys.public);
    }

    #[test]
    fn threshold_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dkg(3, 1, &mut rng).unwrap_err(), ThresholdError::BadThreshold { n: 3, t: 1 });
        assert_eq!(dkg(3, 4, &mut rng).unwrap_err(), ThresholdError::BadThreshold { n: 3, t: 4 });
        let (_, shares) = dkg(3, 2, &mut rng).unwrap();
        assert_eq!(
            reconstruct(&shares[..1], 2).unwrap_err(),
            ThresholdError::InsufficientShares { have: 1, need: 2 }
        );
        assert_eq!(reconstruct(&[shares[0], shares[0]], 2).unwrap_err(), ThresholdError::DuplicateIndex(1));
    }

    #[test]
    fn different_seeds_give_different_keys() {
        let (a, _) = dkg(3, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, _) = dkg(3, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.public, b.public);
        assert_ne!(derive_etherbase(&a), derive_etherbase(&b));
        assert_eq!(derive_etherbase(&a), derive_etherbase(&a));
    }

    #[test]
    fn golden_etherbase() {
        let public = GroupPublicKey(GroupElement::generator_pow(FieldElement::new(0xc0ffee)));
        assert_eq!(hex::encode(public.to_bytes()), GOLDEN_PUBLIC);
        assert_eq!(public.etherbase().to_hex(), GOLDEN_ETHERBASE);
    }

    const GOLDEN_PUBLIC: &str = "653b35e3bcf40e10167919d47426f5a4";
    const GOLDEN_ETHERBASE: &str = "c2a62aca2c34cf6d2c7e2c3f2266106796f01f95";

    #[test]
    fn sign_and_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (keys, shares) = dkg(4, 3, &mut rng).unwrap();
        let k = reconstruct(&shares[1..], 3).unwrap();
        let t = tx(5);
        let sig = sign_withdrawal(&k, &t, &mut rng);
        assert!(verify_withdrawal(&keys.public, &t, &sig));
        assert!(!verify_withdrawal(&keys.public, &tx(6), &sig));
        let (other, _) = dkg(4, 3, &mut rng).unwrap();
        assert!(!verify_withdrawal(&other.public, &t, &sig));
        let bytes = sig.to_bytes();
        assert_eq!(SignedWithdrawal::from_bytes(&bytes), Some(sig));
    }
}
