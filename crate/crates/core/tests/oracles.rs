mod support;

use std::hash::Hasher;

use fnv::FnvHasher;
use opsig::cfg::{build_cfg, build_cfg_with_blocks, hash_block, partition_blocks, BlockHash};
use opsig::listing::{MethodListing, OpKind};
use proptest::prelude::*;

fn reference_fnv(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[test]
fn block_hash_matches_reference_fnv() {
    assert_eq!(BlockHash::of_mnemonics(&["return-void"]).0, reference_fnv(b"return-void"));
    assert_eq!(BlockHash::of_mnemonics(&["const", "move", "return"]).0, reference_fnv(b"const\nmove\nreturn"));
    assert_ne!(BlockHash::of_mnemonics(&["const", "return"]), BlockHash::of_mnemonics(&["const-wide", "return"]));
    // joining matters: two one-token blocks are not one two-token block
    assert_ne!(BlockHash::of_mnemonics(&["ab"]), BlockHash::of_mnemonics(&["a", "b"]));
}

#[test]
fn matcher_agrees_with_brute_force() {
    let bad = support::matcher_discrepancies(200, 0x5eed);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn vectorize_agrees_with_naive_recount() {
    let err = support::tfidf_max_error(100, 12, 99);
    assert!(err <= 1e-9, "max error {err}");
}

const PLAIN: &[&str] = &["const", "move", "add-int", "iget", "invoke-virtual", "nop"];

/// Random valid method: plain code with branches, switches, returns and
/// throws sprinkled in; targets anywhere in range.
fn method() -> impl Strategy<Value = MethodListing> {
    prop::collection::vec((0u8..10, 0usize..64, 0usize..64), 1..40).prop_map(|raw| {
        let len = raw.len();
        let parts = raw.iter().enumerate().map(|(i, &(k, a, b))| match k {
            0 => ("if-eqz", vec![a % len]),
            1 => ("goto", vec![a % len]),
            2 => ("packed-switch", vec![a % len, b % len]),
            3 => ("return-void", vec![]),
            4 => ("throw", vec![]),
            _ => (PLAIN[(a + i) % PLAIN.len()], vec![]),
        });
        MethodListing::from_parts("p", "m", parts).unwrap()
    })
}

proptest! {
    #[test]
    fn blocks_partition_the_method(m in method()) {
        let blocks = partition_blocks(&m);
        let joined: Vec<String> = blocks.iter().flat_map(|b| b.opcodes.clone()).collect();
        prop_assert_eq!(joined, m.mnemonics().iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let mut next = 0;
        for (i, b) in blocks.iter().enumerate() {
            prop_assert_eq!(b.id, i);
            prop_assert_eq!(b.span.0, next);
            prop_assert!(!b.is_empty());
            next = b.span.1 + 1;
        }
        prop_assert_eq!(next, m.len());
    }

    #[test]
    fn terminator_out_degrees(m in method()) {
        let (blocks, g) = build_cfg_with_blocks(&m);
        prop_assert!(g.validate().is_ok());
        for b in &blocks {
            match m.instructions[b.span.1].kind() {
                OpKind::Return | OpKind::Throw => prop_assert_eq!(g.out_degree(b.id), 0),
                OpKind::UncondBranch => prop_assert_eq!(g.out_degree(b.id), 1),
                _ => {}
            }
        }
    }

    #[test]
    fn hashes_ignore_where_the_method_lives(m in method()) {
        let mut moved = m.clone();
        moved.program_id = "elsewhere".into();
        moved.method_id = "renamed".into();
        let a: Vec<_> = build_cfg(&m).nodes.iter().map(|n| n.hash).collect();
        let b: Vec<_> = build_cfg(&moved).nodes.iter().map(|n| n.hash).collect();
        prop_assert_eq!(a, b);
        for blk in partition_blocks(&m) {
            prop_assert_eq!(hash_block(&blk).0, reference_fnv(blk.opcodes.join("\n").as_bytes()));
        }
    }
}
