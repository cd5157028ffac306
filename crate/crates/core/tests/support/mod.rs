//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the code under test except to compare with it.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use opsig::cfg::{BlockHash, CfgNode, ControlFlowGraph};
use opsig::features::{build_vocabulary, vectorize, DocUnit, LabeledDoc, NgramDoc};
use opsig::listing::ProgramLabel;
use opsig::matcher::{find_monomorphisms, SearchOptions};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MNEMONICS: &[&str] = &["const", "move", "add-int", "iget", "iput", "invoke-virtual", "aget"];

/// Random graph over `nodes` nodes whose labels come from `labels` values.
pub fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, labels: u64, density: f64) -> ControlFlowGraph {
    let nodes: Vec<CfgNode> =
        (0..nodes).map(|id| CfgNode { id, hash: BlockHash(rng.random_range(0..labels)), size: 1 }).collect();
    let mut edges = Vec::new();
    for a in 0..nodes.len() {
        for b in 0..nodes.len() {
            let p = if a == b { density / 3.0 } else { density };
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    ControlFlowGraph::from_parts("g", nodes, edges)
}

/// Every injective, edge-preserving map with its agreeing-node count,
/// found by trying all injective maps.
pub fn brute_force(pattern: &ControlFlowGraph, target: &ControlFlowGraph) -> BTreeSet<(Vec<usize>, usize)> {
    fn go(
        p: &ControlFlowGraph,
        t: &ControlFlowGraph,
        edges: &BTreeSet<(usize, usize)>,
        map: &mut Vec<usize>,
        out: &mut BTreeSet<(Vec<usize>, usize)>,
    ) {
        if map.len() == p.node_count() {
            if p.edges.iter().all(|&(a, b)| edges.contains(&(map[a], map[b]))) {
                let agreeing = (0..map.len()).filter(|&i| p.nodes[i].hash == t.nodes[map[i]].hash).count();
                out.insert((map.clone(), agreeing));
            }
            return;
        }
        for v in 0..t.node_count() {
            if !map.contains(&v) {
                map.push(v);
                go(p, t, edges, map, out);
                map.pop();
            }
        }
    }
    let edges: BTreeSet<(usize, usize)> = target.edges.iter().copied().collect();
    let mut out = BTreeSet::new();
    go(pattern, target, &edges, &mut Vec::new(), &mut out);
    out
}

/// Compares the search with brute force on `pairs` seeded random pairs,
/// with and without hash filters. Returns a description of each mismatch.
pub fn matcher_discrepancies(pairs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..pairs {
        let (k, t) = (rng.random_range(1..=4), rng.random_range(1..=7));
        let pattern = random_graph(&mut rng, k, 3, 0.4);
        let target = random_graph(&mut rng, t, 3, 0.45);
        let truth = brute_force(&pattern, &target);

        let all = find_monomorphisms(&pattern, &target, &SearchOptions::exhaustive());
        let found: BTreeSet<(Vec<usize>, usize)> = all.mappings.iter().map(|m| (m.mapping.clone(), m.agreeing)).collect();
        if found != truth || found.len() != all.mappings.len() {
            bad.push(format!("pair {i}: {} mappings, brute force {}", all.mappings.len(), truth.len()));
        }
        let ranked = all.mappings.windows(2).all(|w| (w[1].agreeing, &w[0].mapping) < (w[0].agreeing, &w[1].mapping));
        if !ranked {
            bad.push(format!("pair {i}: mappings out of order"));
        }

        let strict = find_monomorphisms(&pattern, &target, &SearchOptions { strict_hashes: true, ..SearchOptions::exhaustive() });
        let strict: BTreeSet<Vec<usize>> = strict.mappings.into_iter().map(|m| m.mapping).collect();
        let expect: BTreeSet<Vec<usize>> = truth.iter().filter(|(_, a)| *a == k).map(|(m, _)| m.clone()).collect();
        if strict != expect {
            bad.push(format!("pair {i}: strict search found {}, expected {}", strict.len(), expect.len()));
        }

        let floor = 0.5;
        let half = find_monomorphisms(&pattern, &target, &SearchOptions { min_agreement: floor, ..SearchOptions::exhaustive() });
        let half: BTreeSet<Vec<usize>> = half.mappings.into_iter().map(|m| m.mapping).collect();
        let expect: BTreeSet<Vec<usize>> =
            truth.iter().filter(|(_, a)| *a as f64 >= floor * k as f64).map(|(m, _)| m.clone()).collect();
        if half != expect {
            bad.push(format!("pair {i}: agreement floor kept {}, expected {}", half.len(), expect.len()));
        }
    }
    bad
}

/// Random document as a few mnemonic sequences; some may be shorter than n.
pub fn random_sequences(rng: &mut ChaCha8Rng) -> Vec<Vec<&'static str>> {
    (0..rng.random_range(1..=3))
        .map(|_| (0..rng.random_range(0..=25)).map(|_| MNEMONICS[rng.random_range(0..MNEMONICS.len())]).collect())
        .collect()
}

fn windows_equal(seqs: &[Vec<&str>], n: usize, gram: &[String]) -> usize {
    let mut count = 0;
    for s in seqs {
        if s.len() < n {
            continue;
        }
        for i in 0..=s.len() - n {
            if (0..n).all(|j| s[i + j] == gram[j]) {
                count += 1;
            }
        }
    }
    count
}

fn window_total(seqs: &[Vec<&str>], n: usize) -> usize {
    seqs.iter().map(|s| (s.len() + 1).saturating_sub(n)).sum()
}

/// Builds a vocabulary over `docs` random documents for each n in 1..=3 and
/// recomputes every idf, selection score and vector component by counting
/// windows directly. Returns the largest absolute difference seen, or
/// infinity if the selected vocabulary is not a top-capacity set.
pub fn tfidf_max_error(docs: usize, capacity: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<Vec<Vec<&str>>> = (0..docs).map(|_| random_sequences(&mut rng)).collect();
    let mut worst: f64 = 0.0;
    for n in 1..=3 {
        let labeled: Vec<LabeledDoc> = corpus
            .iter()
            .enumerate()
            .map(|(i, seqs)| LabeledDoc {
                owner_id: format!("d{i}"),
                label: Some(if i % 2 == 0 { ProgramLabel::Clean } else { ProgramLabel::Malware("f".into()) }),
                doc: NgramDoc::from_sequences(seqs, n).unwrap(),
            })
            .collect();
        let vocab = build_vocabulary(&labeled, n, capacity, DocUnit::Program).unwrap();

        // every distinct window in the corpus, with its df and tf mass
        let live: Vec<&Vec<Vec<&str>>> = corpus.iter().filter(|s| window_total(s, n) > 0).collect();
        let mut grams: BTreeSet<Vec<String>> = BTreeSet::new();
        for seqs in &live {
            for s in seqs.iter().filter(|s| s.len() >= n) {
                for w in s.windows(n) {
                    grams.insert(w.iter().map(|t| t.to_string()).collect());
                }
            }
        }
        let big_n = live.len() as f64;
        let mut oracle: BTreeMap<Vec<String>, (f64, f64)> = BTreeMap::new();
        for g in &grams {
            let df = live.iter().filter(|s| windows_equal(s, n, g) > 0).count() as f64;
            let idf = ((1.0 + big_n) / (1.0 + df)).ln() + 1.0;
            let mass: f64 =
                live.iter().map(|s| windows_equal(s, n, g) as f64 / window_total(s, n) as f64).sum::<f64>() * idf;
            oracle.insert(g.clone(), (idf, mass));
        }

        if vocab.len() != capacity.min(grams.len()) {
            return f64::INFINITY;
        }
        let kept: BTreeSet<Vec<String>> = vocab.entries.iter().map(|e| e.ngram.tokens().to_vec()).collect();
        let floor = vocab.entries.iter().map(|e| oracle[e.ngram.tokens()].1).fold(f64::INFINITY, f64::min);
        if oracle.iter().any(|(g, (_, mass))| !kept.contains(g) && *mass > floor + 1e-12) {
            return f64::INFINITY;
        }
        for e in &vocab.entries {
            let (idf, mass) = oracle[e.ngram.tokens()];
            worst = worst.max((e.idf - idf).abs()).max((e.score - mass).abs());
        }

        for (seqs, doc) in corpus.iter().zip(&labeled) {
            let got = vectorize(&doc.doc, &vocab).unwrap();
            let total = window_total(seqs, n);
            for (e, v) in vocab.entries.iter().zip(&got) {
                let want =
                    if total == 0 { 0.0 } else { windows_equal(seqs, n, e.ngram.tokens()) as f64 / total as f64 * oracle[e.ngram.tokens()].0 };
                worst = worst.max((v - want).abs());
            }
        }
    }
    worst
}
