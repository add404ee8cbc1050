use cpow_core::chain::{hash_header, parse_golden, Address, BlockHeader, Difficulty, HashDigest};
use serde::Deserialize;

const VECTORS: &str = include_str!("data/golden_headers.txt");
const FIELDS: &str = include_str!("data/golden_fields.json");

#[derive(Deserialize)]
struct Fields {
    parent: String,
    tx_root: String,
    timestamp: u64,
    beneficiary: String,
    difficulty: u16,
    nonce: u64,
    digest: String,
}

fn bytes<const N: usize>(s: &str) -> [u8; N] {
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).unwrap();
    out
}

#[test]
fn every_vector_holds() {
    let vectors = parse_golden(VECTORS).unwrap();
    assert_eq!(vectors.len(), 32);
    assert!(vectors.iter().all(|v| v.holds()));
}

#[test]
fn headers_encode_to_the_recorded_bytes() {
    let vectors = parse_golden(VECTORS).unwrap();
    let fields: Vec<Fields> = serde_json::from_str(FIELDS).unwrap();
    assert_eq!(fields.len(), vectors.len());
    for (f, v) in fields.iter().zip(&vectors) {
        let header = BlockHeader {
            parent: HashDigest(bytes(&f.parent)),
            tx_root: HashDigest(bytes(&f.tx_root)),
            timestamp: f.timestamp,
            beneficiary: Address(bytes(&f.beneficiary)),
            difficulty: Difficulty::new(f.difficulty).unwrap(),
            nonce: 0,
        };
        assert_eq!(header.canonical_bytes(), v.header_bytes);
        assert_eq!(v.nonce, f.nonce);
        assert_eq!(hash_header(&header, f.nonce), HashDigest(bytes(&f.digest)));
    }
}

#[test]
fn any_flipped_bit_breaks_a_vector() {
    let v = parse_golden(VECTORS).unwrap().swap_remove(5);
    for bit in 0..v.header_bytes.len() * 8 {
        let mut m = v.clone();
        m.header_bytes[bit / 8] ^= 1 << (bit % 8);
        assert!(!m.holds(), "bit {bit}");
    }
    let mut m = v;
    m.nonce ^= 1;
    assert!(!m.holds());
}

#[test]
fn malformed_lines_are_reported_with_their_number() {
    let err = parse_golden("# ok\n\nzz 00 00\n").unwrap_err();
    assert_eq!(err.to_string().split(':').next(), Some("line 3"));
}
