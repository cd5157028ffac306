//! Subgraph monomorphism search between CFGs, hash agreement scoring and
//! program scanning against a signature database.
//!
//! Matching is structure first: a mapping must be injective and carry every
//! pattern edge onto a target edge (extra target edges are allowed). Block
//! hashes only order the candidates and score the result, unless
//! [`SearchOptions::strict_hashes`] is set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfg::{build_program_cfgs, ControlFlowGraph};
use crate::listing::ProgramListing;
use crate::signature::{Signature, SignatureDatabase};

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_BUDGET: u64 = 1_000_000;
pub const DEFAULT_MAX_MAPS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    /// Maximum number of (pattern node, target node) pairs examined.
    pub budget: u64,
    /// How many mappings to keep, best hash agreement first.
    pub max_maps: usize,
    /// Only pair nodes with equal hashes.
    pub strict_hashes: bool,
    /// Skip mappings whose hash agreement would fall below this fraction.
    pub min_agreement: f64,
    /// Stop as soon as a mapping with full agreement is found.
    pub stop_on_perfect: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            budget: DEFAULT_BUDGET,
            max_maps: DEFAULT_MAX_MAPS,
            strict_hashes: false,
            min_agreement: 0.0,
            stop_on_perfect: false,
        }
    }
}

impl SearchOptions {
    /// Every structural mapping, no budget and no ranking cut.
    pub fn exhaustive() -> Self {
        SearchOptions { budget: u64::MAX, max_maps: usize::MAX, ..SearchOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedMapping {
    /// `mapping[p]` is the target node of pattern node `p`.
    pub mapping: Vec<usize>,
    /// Pattern nodes whose hash equals that of their image.
    pub agreeing: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    /// Sorted by agreement (descending), then mapping (ascending).
    pub mappings: Vec<RankedMapping>,
    pub states: u64,
    /// The budget ran out; `mappings` may be incomplete.
    pub exhausted: bool,
}

struct Adjacency {
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl Adjacency {
    fn new(g: &ControlFlowGraph) -> Self {
        let n = g.node_count();
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(a, b) in &g.edges {
            succ[a].push(b);
            pred[b].push(a);
        }
        for l in succ.iter_mut().chain(pred.iter_mut()) {
            l.sort_unstable();
            l.dedup();
        }
        Adjacency { succ, pred }
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.succ[a].binary_search(&b).is_ok()
    }
}

/// Per-position matching plan for one pattern node.
struct Step {
    node: usize,
    /// An earlier node and whether the edge runs earlier -> node.
    anchor: Option<(usize, bool)>,
    /// Earlier nodes w with an edge node -> w.
    out_to: Vec<usize>,
    /// Earlier nodes w with an edge w -> node.
    in_from: Vec<usize>,
    self_loop: bool,
}

fn plan(p: &Adjacency) -> Vec<Step> {
    let k = p.succ.len();
    let mut placed = vec![false; k];
    let mut steps: Vec<Step> = Vec::with_capacity(k);
    let degree = |u: usize| p.succ[u].len() + p.pred[u].len();
    for _ in 0..k {
        let u = (0..k)
            .filter(|&u| !placed[u])
            .max_by(|&a, &b| {
                let links = |u: usize| p.succ[u].iter().chain(&p.pred[u]).filter(|&&w| placed[w]).count();
                links(a).cmp(&links(b)).then(degree(a).cmp(&degree(b))).then(b.cmp(&a))
            })
            .expect("an unplaced node remains");
        let out_to: Vec<usize> = p.succ[u].iter().copied().filter(|&w| placed[w]).collect();
        let in_from: Vec<usize> = p.pred[u].iter().copied().filter(|&w| placed[w]).collect();
        let anchor = in_from.first().map(|&w| (w, true)).or_else(|| out_to.first().map(|&w| (w, false)));
        steps.push(Step { node: u, anchor, out_to, in_from, self_loop: p.has_edge(u, u) });
        placed[u] = true;
    }
    steps
}

struct Search<'a> {
    pattern: &'a ControlFlowGraph,
    target: &'a ControlFlowGraph,
    p: Adjacency,
    t: Adjacency,
    steps: Vec<Step>,
    opts: &'a SearchOptions,
    min_agreeing: usize,
    map: Vec<usize>,
    used: Vec<bool>,
    kept: Vec<RankedMapping>,
    states: u64,
    exhausted: bool,
    done: bool,
}

impl Search<'_> {
    fn hashes_agree(&self, u: usize, v: usize) -> bool {
        self.pattern.nodes[u].hash == self.target.nodes[v].hash
    }

    /// Fewest agreeing nodes a new mapping needs to be worth keeping.
    fn needed(&self) -> usize {
        if self.kept.len() >= self.opts.max_maps {
            self.min_agreeing.max(self.kept.last().map_or(0, |m| m.agreeing))
        } else {
            self.min_agreeing
        }
    }

    fn feasible(&self, step: &Step, v: usize) -> bool {
        let u = step.node;
        if self.used[v]
            || self.t.succ[v].len() < self.p.succ[u].len()
            || self.t.pred[v].len() < self.p.pred[u].len()
            || (self.opts.strict_hashes && !self.hashes_agree(u, v))
            || (step.self_loop && !self.t.has_edge(v, v))
        {
            return false;
        }
        step.out_to.iter().all(|&w| self.t.has_edge(v, self.map[w]))
            && step.in_from.iter().all(|&w| self.t.has_edge(self.map[w], v))
    }

    fn keep(&mut self, agreeing: usize) {
        let entry = RankedMapping { mapping: self.map.clone(), agreeing };
        let pos = self.kept.partition_point(|m| rank(m, &entry) == Ordering::Less);
        self.kept.insert(pos, entry);
        if self.kept.len() > self.opts.max_maps {
            self.kept.pop();
        }
        if self.opts.stop_on_perfect && agreeing == self.map.len() {
            self.done = true;
        }
    }

    fn extend(&mut self, depth: usize, agreeing: usize) {
        let k = self.steps.len();
        if depth == k {
            self.keep(agreeing);
            return;
        }
        let step = &self.steps[depth];
        let u = step.node;
        let pool: Vec<usize> = match step.anchor {
            Some((w, true)) => self.t.succ[self.map[w]].clone(),
            Some((w, false)) => self.t.pred[self.map[w]].clone(),
            None => (0..self.target.node_count()).collect(),
        };
        let (equal, other): (Vec<usize>, Vec<usize>) = pool.into_iter().partition(|&v| self.hashes_agree(u, v));
        for (v, agrees) in equal.into_iter().map(|v| (v, true)).chain(other.into_iter().map(|v| (v, false))) {
            if self.done {
                return;
            }
            let gained = agreeing + usize::from(agrees);
            // the remaining nodes can at best all agree
            if gained + (k - depth - 1) < self.needed() {
                continue;
            }
            if self.states >= self.opts.budget {
                self.exhausted = true;
                self.done = true;
                return;
            }
            self.states += 1;
            if !self.feasible(&self.steps[depth], v) {
                continue;
            }
            self.map[u] = v;
            self.used[v] = true;
            self.extend(depth + 1, gained);
            self.used[v] = false;
            self.map[u] = usize::MAX;
        }
    }
}

fn rank(a: &RankedMapping, b: &RankedMapping) -> Ordering {
    b.agreeing.cmp(&a.agreeing).then_with(|| a.mapping.cmp(&b.mapping))
}

/// Searches injective, edge-preserving maps of `pattern` into `target`.
pub fn find_monomorphisms(pattern: &ControlFlowGraph, target: &ControlFlowGraph, opts: &SearchOptions) -> SearchOutcome {
    let k = pattern.node_count();
    let empty = SearchOutcome { mappings: Vec::new(), states: 0, exhausted: false };
    if k == 0 || k > target.node_count() || opts.max_maps == 0 {
        return empty;
    }
    let min_agreeing = (opts.min_agreement * k as f64 - 1e-9).ceil().max(0.0) as usize;
    if min_agreeing > k {
        return empty;
    }
    let p = Adjacency::new(pattern);
    let steps = plan(&p);
    let mut search = Search {
        pattern,
        target,
        t: Adjacency::new(target),
        p,
        steps,
        opts,
        min_agreeing,
        map: vec![usize::MAX; k],
        used: vec![false; target.node_count()],
        kept: Vec::new(),
        states: 0,
        exhausted: false,
        done: false,
    };
    search.extend(0, 0);
    SearchOutcome { mappings: search.kept, states: search.states, exhausted: search.exhausted }
}

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("mapping is not a monomorphism of the pattern into the target")]
    InvalidMapping,
    #[error("match threshold must be in (0, 1], got {0}")]
    Theta(f64),
    #[error("signature database is empty")]
    EmptyDatabase,
}

/// Independent check that `mapping` is injective, in range and preserves
/// every pattern edge.
pub fn is_monomorphism(pattern: &ControlFlowGraph, target: &ControlFlowGraph, mapping: &[usize]) -> bool {
    if mapping.len() != pattern.node_count() || mapping.iter().any(|&v| v >= target.node_count()) {
        return false;
    }
    if mapping.iter().collect::<HashSet<_>>().len() != mapping.len() {
        return false;
    }
    let edges: HashSet<(usize, usize)> = target.edges.iter().copied().collect();
    pattern.edges.iter().all(|&(a, b)| edges.contains(&(mapping[a], mapping[b])))
}

/// Fraction of pattern nodes whose hash equals the hash of their image.
pub fn hash_agreement(pattern: &ControlFlowGraph, target: &ControlFlowGraph, mapping: &[usize]) -> Result<f64, MatchError> {
    if !is_monomorphism(pattern, target, mapping) {
        return Err(MatchError::InvalidMapping);
    }
    let agreeing = pattern.nodes.iter().zip(mapping).filter(|(n, &v)| n.hash == target.nodes[v].hash).count();
    Ok(agreeing as f64 / pattern.node_count() as f64)
}

/// `1 - hash_agreement` under the given mapping.
pub fn cfg_distance(pattern: &ControlFlowGraph, target: &ControlFlowGraph, mapping: &[usize]) -> Result<f64, MatchError> {
    hash_agreement(pattern, target, mapping).map(|a| 1.0 - a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOptions {
    pub theta: f64,
    pub budget: u64,
    /// Only pair blocks with equal hashes.
    pub strict_hashes: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { theta: DEFAULT_THETA, budget: DEFAULT_BUDGET, strict_hashes: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub signature_id: String,
    pub family: String,
    pub program_id: String,
    pub method_id: String,
    pub mapping: Vec<usize>,
    pub hash_match_fraction: f64,
    pub distance: f64,
    /// Full agreement and the signature spans the whole target CFG.
    pub exact: bool,
    pub signature_nodes: usize,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", content = "family", rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    KnownMalware(String),
    Variant(String),
}

impl Verdict {
    pub fn is_detection(&self) -> bool {
        !matches!(self, Verdict::Clean)
    }

    pub fn family(&self) -> Option<&str> {
        match self {
            Verdict::Clean => None,
            Verdict::KnownMalware(f) | Verdict::Variant(f) => Some(f),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Verdict::Clean => "clean",
            Verdict::KnownMalware(_) => "known_malware",
            Verdict::Variant(_) => "variant",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family() {
            Some(fam) => write!(f, "{}({fam})", self.kind()),
            None => f.write_str(self.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub program_id: String,
    pub verdict: Verdict,
    pub best_distance: Option<f64>,
    pub theta: f64,
    pub budget: u64,
    pub evidence: Vec<MatchResult>,
    /// `signature_id@method_id` pairs whose search ran out of budget.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budget_exhausted: Vec<String>,
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn hash_overlap(pattern: &ControlFlowGraph, target_hashes: &BTreeMap<u64, usize>) -> usize {
    let mut need: BTreeMap<u64, usize> = BTreeMap::new();
    for n in &pattern.nodes {
        *need.entry(n.hash.0).or_default() += 1;
    }
    need.iter().map(|(h, &c)| c.min(target_hashes.get(h).copied().unwrap_or(0))).sum()
}

fn match_pair(sig: &Signature, program_id: &str, method_id: &str, target: &ControlFlowGraph, opts: &ScanOptions) -> Option<MatchResult> {
    let pattern = &sig.fragment;
    let k = pattern.node_count();
    if k > target.node_count() || pattern.edge_count() > target.edge_count() {
        return None;
    }
    let mut hashes = BTreeMap::new();
    for n in &target.nodes {
        *hashes.entry(n.hash.0).or_default() += 1;
    }
    let min_agreeing = (opts.theta * k as f64 - 1e-9).ceil() as usize;
    if hash_overlap(pattern, &hashes) < min_agreeing {
        return None;
    }
    let search = SearchOptions {
        budget: opts.budget,
        max_maps: 1,
        strict_hashes: opts.strict_hashes,
        min_agreement: opts.theta,
        stop_on_perfect: true,
    };
    let outcome = find_monomorphisms(pattern, target, &search);
    let exhausted = outcome.exhausted;
    match outcome.mappings.into_iter().next() {
        Some(best) => {
            let fraction = best.agreeing as f64 / k as f64;
            Some(MatchResult {
                signature_id: sig.signature_id.clone(),
                family: sig.family.clone(),
                program_id: program_id.to_string(),
                method_id: method_id.to_string(),
                exact: best.agreeing == k && k == target.node_count() && pattern.edge_count() == target.edge_count(),
                mapping: best.mapping,
                hash_match_fraction: fraction,
                distance: 1.0 - fraction,
                signature_nodes: k,
                budget_exhausted: exhausted,
            })
        }
        None if exhausted => Some(MatchResult {
            signature_id: sig.signature_id.clone(),
            family: sig.family.clone(),
            program_id: program_id.to_string(),
            method_id: method_id.to_string(),
            mapping: Vec::new(),
            hash_match_fraction: 0.0,
            distance: 1.0,
            exact: false,
            signature_nodes: k,
            budget_exhausted: true,
        }),
        None => None,
    }
}

/// Stronger evidence first: higher agreement, larger signature, smaller
/// family name.
fn stronger(a: &MatchResult, b: &MatchResult) -> Ordering {
    b.hash_match_fraction
        .total_cmp(&a.hash_match_fraction)
        .then(b.signature_nodes.cmp(&a.signature_nodes))
        .then_with(|| a.family.cmp(&b.family))
}

/// Matches every signature against every method CFG of `program`.
pub fn scan(program: &ProgramListing, db: &SignatureDatabase, opts: &ScanOptions) -> Result<DetectionReport, MatchError> {
    let cfgs = build_program_cfgs(program);
    let methods: Vec<(&str, &ControlFlowGraph)> =
        program.methods.iter().map(|m| m.method_id.as_str()).zip(cfgs.iter()).collect();
    scan_graphs(&program.program_id, &methods, db, opts)
}

/// Like [`scan`], over prebuilt `(method_id, cfg)` pairs.
pub fn scan_graphs(
    program_id: &str,
    methods: &[(&str, &ControlFlowGraph)],
    db: &SignatureDatabase,
    opts: &ScanOptions,
) -> Result<DetectionReport, MatchError> {
    if !(opts.theta > 0.0 && opts.theta <= 1.0) {
        return Err(MatchError::Theta(opts.theta));
    }
    if db.signatures.is_empty() {
        return Err(MatchError::EmptyDatabase);
    }
    let pairs: Vec<(usize, usize)> =
        (0..methods.len()).flat_map(|m| (0..db.signatures.len()).map(move |s| (m, s))).collect();
    let results: Vec<MatchResult> = pairs
        .par_iter()
        .filter_map(|&(m, s)| match_pair(&db.signatures[s], program_id, methods[m].0, methods[m].1, opts))
        .collect();

    let budget_exhausted: Vec<String> =
        results.iter().filter(|r| r.budget_exhausted).map(|r| format!("{}@{}", r.signature_id, r.method_id)).collect();
    let evidence: Vec<MatchResult> =
        results.into_iter().filter(|r| !r.mapping.is_empty() && r.hash_match_fraction >= opts.theta).collect();

    let covers: BTreeSet<&str> =
        db.signatures.iter().filter(|s| s.covers_source).map(|s| s.signature_id.as_str()).collect();
    let known = evidence.iter().filter(|r| r.exact && covers.contains(r.signature_id.as_str())).min_by(|a, b| stronger(a, b));
    let verdict = match known {
        Some(r) => Verdict::KnownMalware(r.family.clone()),
        None => match evidence.iter().min_by(|a, b| stronger(a, b)) {
            Some(r) => Verdict::Variant(r.family.clone()),
            None => Verdict::Clean,
        },
    };
    let best_distance = evidence.iter().map(|r| r.distance).min_by(f64::total_cmp);
    Ok(DetectionReport {
        program_id: program_id.to_string(),
        verdict,
        best_distance,
        theta: opts.theta,
        budget: opts.budget,
        evidence,
        budget_exhausted,
    })
}

/// Plain-text summary, one row per report.
pub fn render_table(reports: &[DetectionReport]) -> String {
    let width = reports.iter().map(|r| r.program_id.len()).max().unwrap_or(0).max("program".len());
    let mut out = format!("{:<width$}  {:<13}  {:<16}  {:>8}  {:>8}\n", "program", "verdict", "family", "distance", "evidence");
    for r in reports {
        let distance = r.best_distance.map_or_else(|| "-".to_string(), |d| format!("{d:.3}"));
        writeln!(
            out,
            "{:<width$}  {:<13}  {:<16}  {:>8}  {:>8}",
            r.program_id,
            r.verdict.kind(),
            r.verdict.family().unwrap_or("-"),
            distance,
            r.evidence.len()
        )
        .unwrap();
        for e in &r.evidence {
            writeln!(
                out,
                "    {} in {}: agreement {:.3}, distance {:.3}{}{}",
                e.signature_id,
                e.method_id,
                e.hash_match_fraction,
                e.distance,
                if e.exact { ", exact" } else { "" },
                if e.budget_exhausted { ", budget exhausted" } else { "" }
            )
            .unwrap();
        }
    }
    out
}
