//! Characteristic CFG fragments of known malware and the signature
//! database that stores them.
//!
//! Every basic block of a malware program is scored by a trained model.
//! Blocks scoring at least `tau` are grouped into weakly connected
//! components of their method CFG, and each component becomes one
//! signature.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfg::{build_cfg_with_blocks, CfgNode, ControlFlowGraph};
use crate::classifiers::Model;
use crate::features::{extract_ngrams, vectorize, DocUnit, Vocabulary};
use crate::listing::ProgramListing;
use crate::matcher::{find_monomorphisms, SearchOptions};

pub const DB_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_MAX_NODES: usize = 20;
pub const DEFAULT_MIN_BLOCK_OPS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SignatureError {
    #[error("model was trained on vocabulary {model:016x}, got vocabulary {vocabulary:016x}")]
    FingerprintMismatch { model: u64, vocabulary: u64 },
    #[error("tau must be in (0, 1], got {0}")]
    Tau(f64),
    #[error("max_nodes must be at least 1")]
    MaxNodes,
    #[error("malware corpus is empty")]
    EmptyCorpus,
    #[error("program `{0}` is not labeled malware(<family>)")]
    NotMalware(String),
    #[error("no block scored at or above tau {tau}; the database would be empty")]
    EmptyDatabase { tau: f64 },
    #[error("signature `{0}` does not embed in its source CFG")]
    Unsound(String),
    #[error("unsupported database version {found} (this build reads {supported})")]
    Version { found: u64, supported: u32 },
    #[error("corrupt signature database: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Block scores of one method, in CFG node order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method_id: String,
    pub scores: Vec<f64>,
    /// Blocks shorter than the n-gram size; they score 0.
    pub short_blocks: Vec<usize>,
}

/// Scores every basic block of `program` as its own document.
pub fn score_blocks(program: &ProgramListing, model: &Model, vocab: &Vocabulary) -> Result<Vec<MethodScores>, SignatureError> {
    let fingerprint = vocab.fingerprint();
    if model.vocabulary_fingerprint != fingerprint {
        return Err(SignatureError::FingerprintMismatch { model: model.vocabulary_fingerprint, vocabulary: fingerprint });
    }
    if vocab.doc_unit != DocUnit::Block {
        log::warn!("scoring blocks with a {}-level vocabulary", vocab.doc_unit);
    }
    program
        .methods
        .iter()
        .map(|m| {
            let (blocks, _) = build_cfg_with_blocks(m);
            let mut scores = Vec::with_capacity(blocks.len());
            let mut short_blocks = Vec::new();
            for b in &blocks {
                if b.len() < vocab.n {
                    short_blocks.push(b.id);
                    scores.push(0.0);
                    continue;
                }
                let row = vectorize(&extract_ngrams(&b.opcodes, vocab.n)?, vocab)?;
                scores.push(model.score_row(&row));
            }
            Ok(MethodScores { method_id: m.method_id.clone(), scores, short_blocks })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractParams {
    pub tau: f64,
    pub max_nodes: usize,
    /// Single-block fragments need at least this many opcodes.
    pub min_block_ops: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams { tau: DEFAULT_TAU, max_nodes: DEFAULT_MAX_NODES, min_block_ops: DEFAULT_MIN_BLOCK_OPS }
    }
}

impl ExtractParams {
    pub fn validate(&self) -> Result<(), SignatureError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SignatureError::Tau(self.tau));
        }
        if self.max_nodes == 0 {
            return Err(SignatureError::MaxNodes);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignatureSource {
    pub program_id: String,
    pub method_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub signature_id: String,
    pub family: String,
    pub source: SignatureSource,
    /// Mean block score.
    pub score: f64,
    /// The fragment is the whole source CFG.
    pub covers_source: bool,
    /// Source CFG node of each fragment node.
    pub source_blocks: Vec<usize>,
    pub fragment: ControlFlowGraph,
}

fn weak_components(members: &[usize], edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let index: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in edges {
        if let (Some(&i), Some(&j)) = (index.get(a), index.get(b)) {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &m) in members.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(m);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.iter_mut().for_each(|g| g.sort_unstable());
    out.sort();
    out
}

/// Turns the hot blocks of one CFG into fragments. Signature ids are
/// provisional (`graph_id#k`) until the database assigns final ones.
pub fn extract_signature(
    cfg: &ControlFlowGraph,
    scores: &[f64],
    family: &str,
    source: &SignatureSource,
    params: &ExtractParams,
) -> Vec<Signature> {
    let hot: Vec<usize> = (0..cfg.node_count()).filter(|&i| scores.get(i).is_some_and(|&s| s >= params.tau)).collect();
    let mut pieces = Vec::new();
    for comp in weak_components(&hot, &cfg.edges) {
        if comp.len() <= params.max_nodes {
            pieces.push(comp);
            continue;
        }
        let mut ranked = comp;
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked.truncate(params.max_nodes);
        ranked.sort_unstable();
        pieces.extend(weak_components(&ranked, &cfg.edges));
    }
    pieces.sort();
    pieces
        .into_iter()
        .filter(|p| p.len() > 1 || cfg.nodes[p[0]].size >= params.min_block_ops)
        .enumerate()
        .map(|(k, blocks)| {
            let local: HashMap<usize, usize> = blocks.iter().enumerate().map(|(i, &b)| (b, i)).collect();
            let nodes =
                blocks.iter().enumerate().map(|(i, &b)| CfgNode { id: i, hash: cfg.nodes[b].hash, size: cfg.nodes[b].size }).collect();
            let edges = cfg.edges.iter().filter_map(|(a, b)| Some((*local.get(a)?, *local.get(b)?)));
            let id = format!("{}#{k}", cfg.graph_id);
            let score = blocks.iter().map(|&b| scores[b]).sum::<f64>() / blocks.len() as f64;
            Signature {
                signature_id: id.clone(),
                family: family.to_string(),
                source: source.clone(),
                score,
                covers_source: blocks.len() == cfg.node_count(),
                fragment: ControlFlowGraph::from_parts(id, nodes, edges),
                source_blocks: blocks,
            }
        })
        .collect()
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(with = "hex_u64")]
    pub vocabulary_fingerprint: u64,
    #[serde(with = "hex_u64")]
    pub model_fingerprint: u64,
    pub n: usize,
    pub capacity: usize,
    pub doc_unit: DocUnit,
    pub tau: f64,
    pub max_nodes: usize,
    pub min_block_ops: usize,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub source_programs: usize,
    /// Extracted fragments dropped as duplicates of a kept signature.
    #[serde(default)]
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureDatabase {
    pub version: u32,
    pub provenance: Provenance,
    pub signatures: Vec<Signature>,
}

/// `SOURCE_DATE_EPOCH` when set, else the current time.
pub fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
        })
}

/// Node-count, edge-count, hash multiset and hash-labeled edge multiset.
/// Equal keys are necessary for isomorphism, not sufficient.
fn shape_key(g: &ControlFlowGraph) -> (Vec<u64>, Vec<(u64, u64)>) {
    let mut hashes: Vec<u64> = g.nodes.iter().map(|n| n.hash.0).collect();
    hashes.sort_unstable();
    let mut edges: Vec<(u64, u64)> = g.edges.iter().map(|&(a, b)| (g.nodes[a].hash.0, g.nodes[b].hash.0)).collect();
    edges.sort_unstable();
    (hashes, edges)
}

fn strict_embedding(pattern: &ControlFlowGraph, target: &ControlFlowGraph) -> bool {
    let opts = SearchOptions {
        budget: u64::MAX,
        max_maps: 1,
        strict_hashes: true,
        min_agreement: 1.0,
        stop_on_perfect: true,
    };
    !find_monomorphisms(pattern, target, &opts).mappings.is_empty()
}

/// Same family and isomorphic as hash-labeled graphs.
pub fn same_fragment(a: &Signature, b: &Signature) -> bool {
    a.family == b.family
        && a.fragment.node_count() == b.fragment.node_count()
        && a.fragment.edge_count() == b.fragment.edge_count()
        && shape_key(&a.fragment) == shape_key(&b.fragment)
        && strict_embedding(&a.fragment, &b.fragment)
}

/// Scores, extracts, deduplicates and verifies signatures for a labeled
/// malware corpus.
pub fn build_database(
    malware: &[ProgramListing],
    model: &Model,
    vocab: &Vocabulary,
    params: &ExtractParams,
    created: u64,
) -> Result<SignatureDatabase, SignatureError> {
    params.validate()?;
    if malware.is_empty() {
        return Err(SignatureError::EmptyCorpus);
    }
    if let Some(p) = malware.iter().find(|p| p.label.family().is_none_or(str::is_empty)) {
        return Err(SignatureError::NotMalware(p.program_id.clone()));
    }
    let per_program: Vec<Vec<(Signature, ControlFlowGraph)>> = malware
        .par_iter()
        .map(|program| {
            let family = program.label.family().expect("checked above");
            let scores = score_blocks(program, model, vocab)?;
            let mut out = Vec::new();
            for (method, ms) in program.methods.iter().zip(&scores) {
                let (_, cfg) = build_cfg_with_blocks(method);
                let source = SignatureSource { program_id: program.program_id.clone(), method_id: method.method_id.clone() };
                for sig in extract_signature(&cfg, &ms.scores, family, &source, params) {
                    out.push((sig, cfg.clone()));
                }
            }
            if out.is_empty() {
                log::warn!("no block of `{}` reached tau {}", program.program_id, params.tau);
            }
            Ok(out)
        })
        .collect::<Result<_, SignatureError>>()?;

    let mut kept: Vec<Signature> = Vec::new();
    let mut per_family: BTreeMap<String, usize> = BTreeMap::new();
    let mut duplicates = 0;
    for (mut sig, source_cfg) in per_program.into_iter().flatten() {
        if kept.iter().any(|k| same_fragment(k, &sig)) {
            duplicates += 1;
            continue;
        }
        if !strict_embedding(&sig.fragment, &source_cfg) {
            return Err(SignatureError::Unsound(sig.signature_id));
        }
        let count = per_family.entry(sig.family.clone()).or_default();
        *count += 1;
        sig.signature_id = format!("{}-{:04}", sig.family, count);
        sig.fragment.graph_id = sig.signature_id.clone();
        kept.push(sig);
    }
    if kept.is_empty() {
        return Err(SignatureError::EmptyDatabase { tau: params.tau });
    }
    Ok(SignatureDatabase {
        version: DB_VERSION,
        provenance: Provenance {
            vocabulary_fingerprint: vocab.fingerprint(),
            model_fingerprint: model.fingerprint(),
            n: vocab.n,
            capacity: vocab.capacity,
            doc_unit: vocab.doc_unit,
            tau: params.tau,
            max_nodes: params.max_nodes,
            min_block_ops: params.min_block_ops,
            created,
            source_programs: malware.len(),
            duplicates,
        },
        signatures: kept,
    })
}

/// Checks that every signature embeds in its source CFG with full hash
/// agreement. Returns the ids that do not.
pub fn verify_soundness(db: &SignatureDatabase, sources: &[ProgramListing]) -> Vec<String> {
    db.signatures
        .iter()
        .filter(|sig| {
            let cfg = sources
                .iter()
                .filter(|p| p.program_id == sig.source.program_id)
                .flat_map(|p| &p.methods)
                .find(|m| m.method_id == sig.source.method_id)
                .map(|m| build_cfg_with_blocks(m).1);
            !cfg.is_some_and(|cfg| strict_embedding(&sig.fragment, &cfg))
        })
        .map(|sig| sig.signature_id.clone())
        .collect()
}

impl SignatureDatabase {
    /// Signature count per family.
    pub fn family_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.signatures {
            *out.entry(s.family.as_str()).or_default() += 1;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("database serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SignatureError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SignatureError::Corrupt(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| SignatureError::Corrupt("missing version".into()))?;
        if version != u64::from(DB_VERSION) {
            return Err(SignatureError::Version { found: version, supported: DB_VERSION });
        }
        let db: SignatureDatabase = serde_json::from_value(value).map_err(|e| SignatureError::Corrupt(e.to_string()))?;
        db.check()?;
        Ok(db)
    }

    fn check(&self) -> Result<(), SignatureError> {
        let mut ids = std::collections::HashSet::new();
        for s in &self.signatures {
            if !ids.insert(&s.signature_id) {
                return Err(SignatureError::Corrupt(format!("duplicate signature id `{}`", s.signature_id)));
            }
            if s.family.is_empty() {
                return Err(SignatureError::Corrupt(format!("signature `{}` has no family", s.signature_id)));
            }
            s.fragment.validate().map_err(SignatureError::Corrupt)?;
            if s.source_blocks.len() != s.fragment.node_count() {
                return Err(SignatureError::Corrupt(format!("signature `{}` source block count", s.signature_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SignatureError> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SignatureError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
