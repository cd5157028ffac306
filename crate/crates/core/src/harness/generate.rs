//! Seeded generators for benign programs and infected-code payloads.

use std::cell::Cell;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::classifiers::derive_seed;
use crate::listing::{MethodListing, ProgramLabel, ProgramListing};

/// Plain opcodes of ordinary application code.
pub const BENIGN_PALETTE: &[&str] = &[
    "move",
    "move-result",
    "move-result-object",
    "move-object",
    "const/4",
    "const/16",
    "const-string",
    "iget",
    "iput",
    "iget-object",
    "iput-object",
    "sget-object",
    "sput-object",
    "add-int",
    "add-int/2addr",
    "sub-int",
    "mul-int",
    "new-instance",
    "check-cast",
    "aget",
    "aput",
    "array-length",
    "invoke-virtual",
    "invoke-direct",
    "invoke-static",
    "invoke-interface",
];

/// Opcodes reserved for payloads, one disjoint slot per family.
pub const PAYLOAD_SLOTS: &[&[&str]] = &[
    &[
        "xor-int/lit8",
        "xor-int/lit16",
        "shl-int/lit8",
        "shl-int/2addr",
        "aput-byte",
        "aget-byte",
        "int-to-byte",
        "const-wide/16",
        "const-wide/32",
    ],
    &[
        "ushr-int",
        "ushr-int/lit8",
        "and-int/lit16",
        "and-int/lit8",
        "fill-array-data",
        "filled-new-array",
        "monitor-enter",
        "monitor-exit",
        "rem-int",
        "rem-int/2addr",
    ],
    &[
        "cmp-long",
        "instance-of",
        "const-class",
        "sget-boolean",
        "sput-boolean",
        "div-int/2addr",
        "div-int",
        "long-to-int",
        "int-to-long",
        "or-int/lit8",
        "or-int/lit16",
    ],
];

const CONDS: &[&str] = &["if-eqz", "if-nez", "if-eq", "if-ne", "if-lez", "if-gtz", "if-lt", "if-ge"];
const RETURNS: &[&str] = &["return-void", "return", "return-object"];

/// Inclusive `(min, max)` ranges for generated code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignParams {
    pub methods: (usize, usize),
    pub statements: (usize, usize),
    pub run: (usize, usize),
}

impl Default for BenignParams {
    fn default() -> Self {
        BenignParams { methods: (3, 7), statements: (2, 5), run: (2, 6) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadParams {
    /// Index into [`PAYLOAD_SLOTS`].
    pub slot: usize,
    pub statements: (usize, usize),
    pub run: (usize, usize),
    /// Upper bound on the payload's basic block count.
    pub max_blocks: usize,
}

impl Default for PayloadParams {
    fn default() -> Self {
        PayloadParams { slot: 0, statements: (4, 6), run: (4, 6), max_blocks: 18 }
    }
}

/// Sparse first-order Markov chain over a palette. Each opcode also has a
/// few preferred condition opcodes to close a block with.
struct Chain {
    palette: &'static [&'static str],
    next: Vec<Vec<(usize, u32)>>,
    conds: Vec<Vec<&'static str>>,
}

impl Chain {
    /// Each opcode gets `fanout` successors with weights in `1..=max_weight`.
    fn new(palette: &'static [&'static str], fanout: usize, max_weight: u32, rng: &mut ChaCha8Rng) -> Chain {
        let next = (0..palette.len())
            .map(|_| {
                let picks = rand::seq::index::sample(rng, palette.len(), fanout.min(palette.len()));
                picks.into_iter().map(|p| (p, rng.random_range(1..=max_weight))).collect()
            })
            .collect();
        let conds = (0..palette.len())
            .map(|_| rand::seq::index::sample(rng, CONDS.len(), 2).into_iter().map(|c| CONDS[c]).collect())
            .collect();
        Chain { palette, next, conds }
    }

    fn step(&self, cur: usize, rng: &mut ChaCha8Rng) -> usize {
        let succ = &self.next[cur];
        let total: u32 = succ.iter().map(|s| s.1).sum();
        let mut pick = rng.random_range(0..total);
        for &(s, w) in succ {
            if pick < w {
                return s;
            }
            pick -= w;
        }
        unreachable!("pick is below the weight total")
    }
}

/// Instruction buffer with symbolic labels.
#[derive(Default)]
struct Asm {
    ops: Vec<(&'static str, Vec<usize>)>,
    labels: Vec<Option<usize>>,
}

impl Asm {
    fn label(&mut self) -> usize {
        self.labels.push(None);
        self.labels.len() - 1
    }

    fn bind(&mut self, l: usize) {
        self.labels[l] = Some(self.ops.len());
    }

    fn emit(&mut self, op: &'static str, targets: Vec<usize>) {
        self.ops.push((op, targets));
    }

    fn finish(self, program_id: &str, method_id: &str) -> MethodListing {
        let labels = self.labels;
        let parts = self
            .ops
            .into_iter()
            .map(|(op, ls)| (op, ls.into_iter().map(|l| labels[l].expect("label bound")).collect::<Vec<_>>()));
        MethodListing::from_parts(program_id, method_id, parts).expect("generator emits valid listings")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stmt {
    Straight,
    If,
    IfElse,
    Loop,
}

struct Writer<'a> {
    chain: &'a Chain,
    run: (usize, usize),
    kinds: &'a [Stmt],
    /// Chain state, carried from one run to the next.
    cur: Cell<usize>,
}

impl Writer<'_> {
    fn run(&self, asm: &mut Asm, rng: &mut ChaCha8Rng) {
        let len = rng.random_range(self.run.0..=self.run.1);
        for _ in 0..len {
            let cur = self.chain.step(self.cur.get(), rng);
            self.cur.set(cur);
            asm.emit(self.chain.palette[cur], Vec::new());
        }
    }

    fn cond(&self, rng: &mut ChaCha8Rng) -> &'static str {
        let options = &self.chain.conds[self.cur.get()];
        options[rng.random_range(0..options.len())]
    }

    fn body(&self, asm: &mut Asm, rng: &mut ChaCha8Rng, depth: usize) {
        if depth < 2 && rng.random_bool(0.2) {
            self.statement(asm, rng, depth + 1);
        }
        self.run(asm, rng);
    }

    /// Every statement starts with a straight run, so labels bound right
    /// after a statement always land on a fresh block of real opcodes.
    fn statement(&self, asm: &mut Asm, rng: &mut ChaCha8Rng, depth: usize) {
        match self.kinds[rng.random_range(0..self.kinds.len())] {
            Stmt::Straight => self.run(asm, rng),
            Stmt::If => {
                let end = asm.label();
                self.run(asm, rng);
                asm.emit(self.cond(rng), vec![end]);
                self.body(asm, rng, depth);
                asm.bind(end);
            }
            Stmt::IfElse => {
                let (other, end) = (asm.label(), asm.label());
                self.run(asm, rng);
                asm.emit(self.cond(rng), vec![other]);
                self.body(asm, rng, depth);
                asm.emit("goto", vec![end]);
                asm.bind(other);
                self.body(asm, rng, depth);
                asm.bind(end);
            }
            Stmt::Loop => {
                let (head, exit) = (asm.label(), asm.label());
                asm.bind(head);
                self.run(asm, rng);
                asm.emit(self.cond(rng), vec![exit]);
                self.body(asm, rng, depth);
                asm.emit("goto", vec![head]);
                asm.bind(exit);
            }
        }
    }

    fn method(&self, statements: usize, rng: &mut ChaCha8Rng, program_id: &str, method_id: &str) -> MethodListing {
        let mut asm = Asm::default();
        self.cur.set(rng.random_range(0..self.chain.palette.len()));
        for _ in 0..statements {
            self.statement(&mut asm, rng, 0);
        }
        self.run(&mut asm, rng);
        asm.emit(RETURNS[rng.random_range(0..RETURNS.len())], Vec::new());
        asm.finish(program_id, method_id)
    }
}

const BENIGN_KINDS: &[Stmt] = &[Stmt::Straight, Stmt::Straight, Stmt::If, Stmt::IfElse, Stmt::Loop];
const PAYLOAD_KINDS: &[Stmt] = &[Stmt::If, Stmt::IfElse, Stmt::Loop];

fn check_range(name: &str, r: (usize, usize)) -> Result<(), HarnessError> {
    if r.0 == 0 || r.0 > r.1 {
        return Err(HarnessError::Spec(format!("{name} range {r:?} must satisfy 1 <= min <= max")));
    }
    Ok(())
}

/// `count` structured benign programs named `{prefix}-000`, `{prefix}-001`,
/// and so on, all labeled clean. The opcode statistics come from one Markov
/// chain drawn from `seed`, so programs of the same call resemble each
/// other.
pub fn synthesize_benign(
    count: usize,
    prefix: &str,
    params: &BenignParams,
    seed: u64,
) -> Result<Vec<ProgramListing>, HarnessError> {
    if count == 0 {
        return Err(HarnessError::Spec("benign program count must be at least 1".into()));
    }
    check_range("methods", params.methods)?;
    check_range("statements", params.statements)?;
    check_range("run", params.run)?;
    let chain = Chain::new(BENIGN_PALETTE, 3, 8, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xbe)));
    let writer = Writer { chain: &chain, run: params.run, kinds: BENIGN_KINDS, cur: Cell::new(0) };
    let width = if count > 100 { 3 } else { 2 };
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + i as u64));
            let program_id = format!("{prefix}-{i:0width$}");
            let methods = rng.random_range(params.methods.0..=params.methods.1);
            let methods = (0..methods)
                .map(|m| {
                    let statements = rng.random_range(params.statements.0..=params.statements.1);
                    writer.method(statements, &mut rng, &program_id, &format!("m{m:02}"))
                })
                .collect();
            ProgramListing { program_id, label: ProgramLabel::Clean, methods }
        })
        .collect())
}

/// One payload method built only from the opcodes of its slot plus shared
/// branch and return opcodes. Every block holds at least `params.run.0`
/// opcodes.
pub fn synthesize_payload(method_id: &str, params: &PayloadParams, seed: u64) -> Result<MethodListing, HarnessError> {
    let palette = *PAYLOAD_SLOTS
        .get(params.slot)
        .ok_or_else(|| HarnessError::Spec(format!("payload slot {} does not exist", params.slot)))?;
    check_range("statements", params.statements)?;
    check_range("run", params.run)?;
    if params.run.0 < 2 {
        return Err(HarnessError::Spec("payload runs need at least 2 opcodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9a));
    let chain = Chain::new(palette, 2, 2, &mut rng);
    let writer = Writer { chain: &chain, run: params.run, kinds: PAYLOAD_KINDS, cur: Cell::new(0) };
    for _ in 0..64 {
        let statements = rng.random_range(params.statements.0..=params.statements.1);
        let method = writer.method(statements, &mut rng, "payload", method_id);
        let blocks = crate::cfg::partition_blocks(&method).len();
        if blocks <= params.max_blocks && super::transform::chains(&method).len() >= 3 {
            return Ok(method);
        }
    }
    Err(HarnessError::Spec(format!("could not fit a payload in {} blocks", params.max_blocks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::partition_blocks;
    use crate::listing::{parse_oplist, serialize_oplist};

    #[test]
    fn benign_is_deterministic_and_round_trips() {
        let a = synthesize_benign(10, "app", &BenignParams::default(), 7).unwrap();
        let b = synthesize_benign(10, "app", &BenignParams::default(), 7).unwrap();
        assert_eq!(a, b);
        for p in &a {
            p.validate().unwrap();
            assert_eq!(parse_oplist(&serialize_oplist(p)).unwrap(), *p);
        }
        assert_ne!(a, synthesize_benign(10, "app", &BenignParams::default(), 8).unwrap());
    }

    #[test]
    fn zero_count_is_an_error() {
        assert!(synthesize_benign(0, "app", &BenignParams::default(), 1).is_err());
    }

    #[test]
    fn payload_uses_its_slot_only() {
        for slot in 0..PAYLOAD_SLOTS.len() {
            let p = synthesize_payload("run", &PayloadParams { slot, ..PayloadParams::default() }, 3).unwrap();
            let blocks = partition_blocks(&p);
            assert!(blocks.len() <= 18);
            assert!(blocks.iter().all(|b| b.len() >= 3));
            for m in p.mnemonics() {
                let shared = CONDS.contains(&m) || RETURNS.contains(&m) || m == "goto";
                assert!(shared || PAYLOAD_SLOTS[slot].contains(&m), "{m}");
                assert!(!BENIGN_PALETTE.contains(&m));
            }
        }
    }
}
