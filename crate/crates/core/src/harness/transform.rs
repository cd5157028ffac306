//! Semantics-preserving rewrites that turn one payload into variants.

use std::fmt;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfg::partition_blocks;
use crate::listing::{Instruction, MethodListing, Opcode};

/// Groups of interchangeable opcodes of the same kind.
pub const EQUIVALENT_OPCODES: &[&[&str]] = &[
    &["const/4", "const/16"],
    &["add-int", "add-int/2addr"],
    &["move-object", "move-object/from16"],
    &["xor-int/lit8", "xor-int/lit16"],
    &["shl-int/lit8", "shl-int/2addr"],
    &["const-wide/16", "const-wide/32"],
    &["ushr-int", "ushr-int/lit8"],
    &["and-int/lit16", "and-int/lit8"],
    &["rem-int", "rem-int/2addr"],
    &["div-int/2addr", "div-int"],
    &["or-int/lit8", "or-int/lit16"],
    &["goto", "goto/16"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    /// Each opcode with equivalents is replaced with probability `rate`.
    OpcodeSubstitution { rate: f64 },
    /// Fall-through chains of blocks are laid out in a new order.
    BlockReorder,
    /// A `nop` is inserted before each instruction with probability `rate`.
    NopPadding { rate: f64 },
    /// The method is cut in two at a self-contained point.
    PayloadSplit,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::OpcodeSubstitution { rate } => write!(f, "opcode-substitution({rate})"),
            Transform::BlockReorder => f.write_str("block-reorder"),
            Transform::NopPadding { rate } => write!(f, "nop-padding({rate})"),
            Transform::PayloadSplit => f.write_str("payload-split"),
        }
    }
}

fn equivalents(mnemonic: &str) -> Option<&'static [&'static str]> {
    EQUIVALENT_OPCODES.iter().copied().find(|g| g.contains(&mnemonic))
}

fn rebuild(template: &MethodListing, method_id: &str, parts: Vec<(String, Vec<usize>)>) -> MethodListing {
    MethodListing::from_parts(template.program_id.clone(), method_id, parts).expect("transforms keep listings valid")
}

fn parts_of(method: &MethodListing) -> Vec<(String, Vec<usize>)> {
    method.instructions.iter().map(|i| (i.mnemonic().to_string(), i.branch_targets.clone())).collect()
}

/// Replaces opcodes by equivalents. Returns the new method and the number
/// of replaced instructions.
pub fn substitute_opcodes(method: &MethodListing, rate: f64, rng: &mut ChaCha8Rng) -> (MethodListing, usize) {
    let mut changed = 0;
    let mut out = method.clone();
    for ins in &mut out.instructions {
        let Some(group) = equivalents(ins.mnemonic()) else { continue };
        if !rng.random_bool(rate.clamp(0.0, 1.0)) {
            continue;
        }
        let others: Vec<&str> = group.iter().copied().filter(|&m| m != ins.mnemonic()).collect();
        let pick = others[rng.random_range(0..others.len())];
        ins.opcode = Opcode::new(pick).expect("table mnemonics are valid");
        changed += 1;
    }
    (out, changed)
}

/// Maximal runs of blocks linked by fall-through, as block id ranges.
pub fn chains(method: &MethodListing) -> Vec<Vec<usize>> {
    let blocks = partition_blocks(method);
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for b in &blocks {
        current.push(b.id);
        if !method.instructions[b.span.1].kind().falls_through() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Moves whole fall-through chains around. The entry chain stays first and
/// a chain that runs off the end of the method stays last, so every block
/// keeps its content and its successors.
pub fn reorder_blocks(method: &MethodListing, rng: &mut ChaCha8Rng) -> MethodListing {
    let blocks = partition_blocks(method);
    let all = chains(method);
    let last_falls = method.instructions.last().is_some_and(|i| i.kind().falls_through());
    let fixed_tail = usize::from(last_falls && all.len() > 1);
    let movable = 1..all.len() - fixed_tail;
    if movable.len() < 2 {
        return method.clone();
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    for _ in 0..8 {
        order[movable.clone()].shuffle(rng);
        if !order.is_sorted() {
            break;
        }
    }
    let mut new_index = vec![0usize; method.len()];
    let mut sequence: Vec<&Instruction> = Vec::with_capacity(method.len());
    for &c in &order {
        for &b in &all[c] {
            let (lo, hi) = blocks[b].span;
            for i in lo..=hi {
                new_index[i] = sequence.len();
                sequence.push(&method.instructions[i]);
            }
        }
    }
    let parts = sequence
        .into_iter()
        .map(|i| (i.mnemonic().to_string(), i.branch_targets.iter().map(|&t| new_index[t]).collect()))
        .collect();
    rebuild(method, &method.method_id, parts)
}

/// Inserts `nop`s. A branch to an instruction that received a `nop` now
/// lands on the `nop`, so no new block boundary appears.
pub fn pad_nops(method: &MethodListing, rate: f64, rng: &mut ChaCha8Rng) -> (MethodListing, usize) {
    let mut new_index = vec![0usize; method.len()];
    let mut layout: Vec<Option<usize>> = Vec::new();
    for i in 0..method.len() {
        new_index[i] = layout.len();
        if rng.random_bool(rate.clamp(0.0, 1.0)) {
            layout.push(None);
        }
        layout.push(Some(i));
    }
    let added = layout.len() - method.len();
    let parts = layout
        .into_iter()
        .map(|slot| match slot {
            None => ("nop".to_string(), Vec::new()),
            Some(i) => {
                let ins = &method.instructions[i];
                (ins.mnemonic().to_string(), ins.branch_targets.iter().map(|&t| new_index[t]).collect())
            }
        })
        .collect();
    (rebuild(method, &method.method_id, parts), added)
}

/// Cuts the method at the block boundary closest to its middle that no
/// branch crosses. The head ends with a call and a return, which take over
/// the fall-through and any branch to the cut point; the tail becomes `{id}_tail`. Returns the method
/// unchanged when no such boundary exists.
pub fn split_payload(method: &MethodListing) -> Vec<MethodListing> {
    let len = method.len();
    let crosses = |c: usize| {
        method
            .instructions
            .iter()
            .any(|ins| ins.branch_targets.iter().any(|&t| if ins.index < c { t > c } else { t < c }))
    };
    let cut = partition_blocks(method)
        .iter()
        .map(|b| b.span.0)
        .filter(|&c| c > 0 && !crosses(c))
        .min_by_key(|&c| (c.abs_diff(len / 2), c));
    let Some(c) = cut else { return vec![method.clone()] };
    let all = parts_of(method);
    let mut head: Vec<(String, Vec<usize>)> = all[..c].to_vec();
    let lands_on_cut = all[..c].iter().any(|(_, ts)| ts.contains(&c));
    if lands_on_cut || method.instructions[c - 1].kind().falls_through() {
        head.push(("invoke-static".into(), Vec::new()));
        head.push(("return-void".into(), Vec::new()));
    }
    let tail: Vec<(String, Vec<usize>)> =
        all[c..].iter().map(|(m, ts)| (m.clone(), ts.iter().map(|t| t - c).collect())).collect();
    vec![rebuild(method, &method.method_id, head), rebuild(method, &format!("{}_tail", method.method_id), tail)]
}

/// Applies a pipeline to a payload method.
pub fn apply_transforms(payload: &MethodListing, transforms: &[Transform], rng: &mut ChaCha8Rng) -> Vec<MethodListing> {
    let mut methods = vec![payload.clone()];
    for t in transforms {
        methods = methods
            .into_iter()
            .flat_map(|m| match t {
                Transform::OpcodeSubstitution { rate } => vec![substitute_opcodes(&m, *rate, rng).0],
                Transform::BlockReorder => vec![reorder_blocks(&m, rng)],
                Transform::NopPadding { rate } => vec![pad_nops(&m, *rate, rng).0],
                Transform::PayloadSplit => split_payload(&m),
            })
            .collect();
    }
    methods
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::cfg::build_cfg;
    use crate::harness::generate::{synthesize_payload, PayloadParams};

    fn payload() -> MethodListing {
        synthesize_payload("run", &PayloadParams::default(), 5).unwrap()
    }

    fn hash_multiset(m: &MethodListing) -> Vec<u64> {
        let mut h: Vec<u64> = build_cfg(m).nodes.iter().map(|n| n.hash.0).collect();
        h.sort_unstable();
        h
    }

    #[test]
    fn substitution_count_is_reproducible() {
        let m = MethodListing::straight("p", "m", ["xor-int/lit8"; 9].into_iter().chain(["return-void"])).unwrap();
        let count = |seed| substitute_opcodes(&m, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).1;
        assert_eq!(count(3), count(3));
        let mean = (0..200).map(count).sum::<usize>() as f64 / 200.0;
        assert!((mean - 4.5).abs() < 0.5, "{mean}");
        let (out, changed) = substitute_opcodes(&m, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let diff = out.mnemonics().iter().zip(m.mnemonics()).filter(|(a, b)| *a != b).count();
        assert_eq!(diff, changed);
        assert_eq!(substitute_opcodes(&m, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).1, 0);
    }

    #[test]
    fn reorder_keeps_block_hashes() {
        let m = payload();
        let r = reorder_blocks(&m, &mut ChaCha8Rng::seed_from_u64(1));
        assert_ne!(r, m);
        assert_eq!(hash_multiset(&r), hash_multiset(&m));
        assert_eq!(build_cfg(&r).edge_count(), build_cfg(&m).edge_count());
        assert_eq!(r.instructions[0], m.instructions[0]);
    }

    #[test]
    fn padding_adds_nops_without_new_blocks() {
        let m = payload();
        let (p, added) = pad_nops(&m, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(added > 0);
        assert_eq!(p.len(), m.len() + added);
        assert_eq!(partition_blocks(&p).len(), partition_blocks(&m).len());
        let stripped: Vec<&str> = p.mnemonics().into_iter().filter(|&o| o != "nop").collect();
        assert_eq!(stripped, m.mnemonics());
    }

    #[test]
    fn split_makes_two_valid_methods() {
        let m = payload();
        let parts = split_payload(&m);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].method_id, "run_tail");
        let total: usize = parts.iter().map(MethodListing::len).sum();
        assert!(total >= m.len());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let m = payload();
        let t = [Transform::OpcodeSubstitution { rate: 0.2 }, Transform::BlockReorder, Transform::NopPadding { rate: 0.1 }];
        let a = apply_transforms(&m, &t, &mut ChaCha8Rng::seed_from_u64(4));
        let b = apply_transforms(&m, &t, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn equivalents_share_a_kind() {
        for g in EQUIVALENT_OPCODES {
            let kinds: Vec<_> = g.iter().map(|m| Opcode::new(m).unwrap().kind()).collect();
            assert!(kinds.windows(2).all(|w| w[0] == w[1]), "{g:?}");
        }
    }
}
