//! Basic blocks, block hashes and per-method control-flow graphs.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::listing::{MethodListing, OpKind, ProgramListing};

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Node label: FNV-1a 64 of the block's mnemonics joined by `\n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockHash(pub u64);

impl BlockHash {
    pub fn of_mnemonics<S: AsRef<str>>(mnemonics: &[S]) -> Self {
        let mut h = FNV_OFFSET_BASIS;
        for (i, m) in mnemonics.iter().enumerate() {
            if i > 0 {
                h = (h ^ u64::from(b'\n')).wrapping_mul(FNV_PRIME);
            }
            for &b in m.as_ref().as_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
            }
        }
        BlockHash(h)
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for BlockHash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 {
            return Err(format!("block hash `{s}` must be 16 hex digits"));
        }
        u64::from_str_radix(s, 16).map(BlockHash).map_err(|e| format!("block hash `{s}`: {e}"))
    }
}

impl Serialize for BlockHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: usize,
    pub opcodes: Vec<String>,
    /// Inclusive instruction index range in the source method.
    pub span: (usize, usize),
}

impl BasicBlock {
    pub fn len(&self) -> usize {
        self.opcodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opcodes.is_empty()
    }
}

pub fn hash_block(block: &BasicBlock) -> BlockHash {
    BlockHash::of_mnemonics(&block.opcodes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfgNode {
    pub id: usize,
    pub hash: BlockHash,
    /// Opcode count of the block.
    pub size: usize,
}

/// A directed graph of hash-labeled blocks. Node `0` is the entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowGraph {
    pub graph_id: String,
    pub nodes: Vec<CfgNode>,
    pub edges: Vec<(usize, usize)>,
    /// Blocks not reachable from the entry. They stay in the graph.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreachable: Vec<usize>,
}

impl ControlFlowGraph {
    /// Assembles a graph from nodes and edges; edges are sorted and
    /// deduplicated, and the unreachable list is computed.
    pub fn from_parts(graph_id: impl Into<String>, nodes: Vec<CfgNode>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let edges: Vec<(usize, usize)> = edges.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let unreachable = unreachable_from_entry(nodes.len(), &edges);
        ControlFlowGraph { graph_id: graph_id.into(), nodes, edges, unreachable }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn successors(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(a, _)| *a == id).map(|&(_, b)| b)
    }

    pub fn out_degree(&self, id: usize) -> usize {
        self.successors(id).count()
    }

    /// Checks the structural invariants: dense node ids, valid and unique
    /// edges, and a correct unreachable list.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err(format!("graph `{}` has no nodes", self.graph_id));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(format!("graph `{}`: node {} has id {}", self.graph_id, i, n.id));
            }
        }
        let count = self.nodes.len();
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= count || b >= count {
                return Err(format!("graph `{}`: edge {a}->{b} out of range", self.graph_id));
            }
            if !seen.insert((a, b)) {
                return Err(format!("graph `{}`: duplicate edge {a}->{b}", self.graph_id));
            }
        }
        if unreachable_from_entry(count, &self.edges) != self.unreachable {
            return Err(format!("graph `{}`: unreachable list is stale", self.graph_id));
        }
        Ok(())
    }
}

/// Splits a method into maximal leader-to-leader runs.
///
/// Leaders are instruction 0, every branch target, and every instruction
/// following a branch, switch, return or throw.
pub fn partition_blocks(method: &MethodListing) -> Vec<BasicBlock> {
    let len = method.instructions.len();
    let mut leader = vec![false; len];
    if len > 0 {
        leader[0] = true;
    }
    for ins in &method.instructions {
        for &t in &ins.branch_targets {
            leader[t] = true;
        }
        if ins.kind().ends_block() && ins.index + 1 < len {
            leader[ins.index + 1] = true;
        }
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=len {
        if i == len || leader[i] {
            blocks.push(BasicBlock {
                id: blocks.len(),
                opcodes: method.instructions[start..i].iter().map(|x| x.mnemonic().to_string()).collect(),
                span: (start, i - 1),
            });
            start = i;
        }
    }
    blocks
}

pub fn build_cfg(method: &MethodListing) -> ControlFlowGraph {
    build_cfg_with_blocks(method).1
}

/// Builds the CFG and also returns the blocks it was built from, in node
/// order.
pub fn build_cfg_with_blocks(method: &MethodListing) -> (Vec<BasicBlock>, ControlFlowGraph) {
    let blocks = partition_blocks(method);
    let mut block_of = vec![0usize; method.instructions.len()];
    for b in &blocks {
        for slot in &mut block_of[b.span.0..=b.span.1] {
            *slot = b.id;
        }
    }
    let mut edges = BTreeSet::new();
    for b in &blocks {
        let last = &method.instructions[b.span.1];
        let next = (b.id + 1 < blocks.len()).then_some(b.id + 1);
        let kind = last.kind();
        for &t in &last.branch_targets {
            edges.insert((b.id, block_of[t]));
        }
        if kind.falls_through() {
            if let Some(n) = next {
                edges.insert((b.id, n));
            }
        }
        debug_assert!(kind.is_branch() || last.branch_targets.is_empty());
        debug_assert!(kind != OpKind::Return || last.branch_targets.is_empty());
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let nodes = blocks
        .iter()
        .map(|b| CfgNode { id: b.id, hash: hash_block(b), size: b.len() })
        .collect::<Vec<_>>();
    let unreachable = unreachable_from_entry(nodes.len(), &edges);
    let cfg = ControlFlowGraph {
        graph_id: format!("{}/{}", method.program_id, method.method_id),
        nodes,
        edges,
        unreachable,
    };
    (blocks, cfg)
}

/// One CFG per method, in program order.
pub fn build_program_cfgs(program: &ProgramListing) -> Vec<ControlFlowGraph> {
    program.methods.iter().map(build_cfg).collect()
}

fn unreachable_from_entry(count: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let mut adjacency = vec![Vec::new(); count];
    for &(a, b) in edges {
        adjacency[a].push(b);
    }
    let mut seen = vec![false; count];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(n) = queue.pop_front() {
        for &s in &adjacency[n] {
            if !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    (0..count).filter(|&i| !seen[i]).collect()
}

/// The per-program CFG document exchanged between pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfgDocument {
    pub program_id: String,
    pub graphs: Vec<ControlFlowGraph>,
}

impl CfgDocument {
    pub fn from_program(program: &ProgramListing) -> Self {
        CfgDocument { program_id: program.program_id.clone(), graphs: build_program_cfgs(program) }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cfg document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn method(parts: &[(&str, &[usize])]) -> MethodListing {
        MethodListing::from_parts("p", "m", parts.iter().map(|(m, t)| (*m, t.to_vec()))).unwrap()
    }

    #[test]
    fn straight_line_is_one_block() {
        let m = method(&[("const", &[]), ("return", &[])]);
        let blocks = partition_blocks(&m);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].len(), 2);
        let cfg = build_cfg(&m);
        assert!(cfg.edges.is_empty());
        assert_eq!(cfg.graph_id, "p/m");
    }

    #[test]
    fn if_eq_splits_into_three_blocks() {
        // leaders: 0 (entry), 1 (after branch), 2 (target)
        let m = method(&[("if-eq", &[2]), ("const", &[]), ("return", &[])]);
        let blocks = partition_blocks(&m);
        let opcodes: Vec<_> = blocks.iter().map(|b| b.opcodes.clone()).collect();
        assert_eq!(opcodes, vec![vec!["if-eq"], vec!["const"], vec!["return"]]);
        assert_eq!(build_cfg(&m).edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn goto_self_loop() {
        let m = method(&[("goto", &[0])]);
        let cfg = build_cfg(&m);
        assert_eq!(cfg.node_count(), 1);
        assert_eq!(cfg.edges, vec![(0, 0)]);
    }

    #[test]
    fn loop_back_to_entry() {
        let m = method(&[("const", &[]), ("add-int", &[]), ("if-nez", &[0]), ("return-void", &[])]);
        let cfg = build_cfg(&m);
        assert_eq!(cfg.edges, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn branch_over_a_block() {
        // blocks: [const, if-eqz] [nop] [return-void]
        let m = method(&[("const", &[]), ("if-eqz", &[3]), ("nop", &[]), ("return-void", &[])]);
        let cfg = build_cfg(&m);
        assert_eq!(cfg.node_count(), 3);
        assert_eq!(cfg.edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn switch_and_unreachable() {
        let m = method(&[
            ("packed-switch", &[2, 3]),
            ("return-void", &[]),
            ("nop", &[]),
            ("throw", &[]),
            ("const", &[]),
            ("return", &[]),
        ]);
        let cfg = build_cfg(&m);
        assert_eq!(cfg.edges, vec![(0, 1), (0, 2), (0, 3), (2, 3)]);
        assert_eq!(cfg.unreachable, vec![4]);
        assert_eq!(cfg.out_degree(1), 0);
        assert_eq!(cfg.out_degree(3), 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn invoke_does_not_end_block() {
        let m = method(&[("invoke-static", &[]), ("move-result", &[]), ("return", &[])]);
        assert_eq!(partition_blocks(&m).len(), 1);
    }

    #[test]
    fn hash_is_newline_joined_fnv() {
        let joined = BlockHash::of_mnemonics(&["const", "return"]);
        assert_eq!(joined.0, fnv1a_64(b"const\nreturn"));
        assert_ne!(joined, BlockHash::of_mnemonics(&["const-wide", "return"]));
        assert_eq!(BlockHash::of_mnemonics(&["a"]).to_string().len(), 16);
        let h = BlockHash(0xdead_beef);
        assert_eq!(h.to_string().parse::<BlockHash>().unwrap(), h);
    }

    #[test]
    fn document_round_trip() {
        let m = method(&[("if-eq", &[2]), ("const", &[]), ("return", &[])]);
        let doc = CfgDocument { program_id: "p".into(), graphs: vec![build_cfg(&m)] };
        let json = doc.to_json();
        assert!(json.contains(&format!("\"{}\"", doc.graphs[0].nodes[0].hash)));
        assert_eq!(CfgDocument::from_json(&json).unwrap(), doc);
    }
}
