use opsig::cfg::{BlockHash, CfgNode, ControlFlowGraph};
use opsig::classifiers::{cross_validate, f1_score, predict, predict_proba, train, ClassifierKind, Hyperparameters};
use opsig::features::{
    build_vocabulary, extract_ngrams, idf_from_counts, term_frequency, vectorize, DocUnit, FeatureVector, LabeledDoc,
    NgramDoc,
};
use opsig::listing::{parse_oplist, serialize_oplist, MethodListing, OpKind, ProgramLabel, ProgramListing};
use opsig::matcher::{find_monomorphisms, is_monomorphism, SearchOptions};
use proptest::prelude::*;

const OPS: &[&str] = &["const", "move", "add-int", "iget", "iput", "aget"];

fn sequence(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(OPS), 0..max)
}

fn labeled(i: usize, seqs: &[Vec<&str>], n: usize) -> LabeledDoc {
    LabeledDoc {
        owner_id: format!("d{i}"),
        label: Some(if i.is_multiple_of(2) { ProgramLabel::Clean } else { ProgramLabel::Malware("f".into()) }),
        doc: NgramDoc::from_sequences(seqs, n).unwrap(),
    }
}

proptest! {
    #[test]
    fn term_frequencies_sum_to_one(seq in sequence(40), n in 1usize..4) {
        let doc = extract_ngrams(&seq, n).unwrap();
        prop_assume!(!doc.is_empty());
        let sum: f64 = doc.iter().map(|(g, _)| term_frequency(&doc, g).unwrap()).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_order_does_not_matter(seqs in prop::collection::vec(sequence(12), 1..6), n in 1usize..3) {
        let corpus: Vec<LabeledDoc> = (0..4).map(|i| labeled(i, &seqs[i % seqs.len()..], n)).collect();
        prop_assume!(corpus.iter().any(|d| !d.doc.is_empty()));
        let vocab = build_vocabulary(&corpus, n, 10, DocUnit::Program).unwrap();
        let mut reversed = seqs.clone();
        reversed.reverse();
        let a = vectorize(&NgramDoc::from_sequences(&seqs, n).unwrap(), &vocab).unwrap();
        let b = vectorize(&NgramDoc::from_sequences(&reversed, n).unwrap(), &vocab).unwrap();
        prop_assert_eq!(a, b);
    }

    // Smoothing moves the values themselves: (1+2N)/(1+2df) != (1+N)/(1+df).
    // What survives duplication is the ranking and the counts behind it.
    #[test]
    fn duplicating_the_corpus_keeps_idf_order(docs in prop::collection::vec(sequence(15), 1..8)) {
        let corpus: Vec<LabeledDoc> = docs.iter().enumerate().map(|(i, s)| labeled(i, std::slice::from_ref(s), 2)).collect();
        prop_assume!(corpus.iter().any(|d| !d.doc.is_empty()));
        let twice: Vec<LabeledDoc> = corpus.iter().chain(&corpus).cloned().collect();
        let mut a = build_vocabulary(&corpus, 2, 1000, DocUnit::Program).unwrap();
        let mut b = build_vocabulary(&twice, 2, 1000, DocUnit::Program).unwrap();
        prop_assert_eq!(b.documents, 2 * a.documents);
        a.entries.sort_by(|x, y| x.ngram.cmp(&y.ngram));
        b.entries.sort_by(|x, y| x.ngram.cmp(&y.ngram));
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert_eq!(&x.ngram, &y.ngram);
            let df = corpus.iter().filter(|d| d.doc.contains(&x.ngram)).count();
            prop_assert_eq!(x.idf, idf_from_counts(a.documents, df));
            prop_assert_eq!(y.idf, idf_from_counts(b.documents, 2 * df));
        }
        for (x1, y1) in a.entries.iter().zip(&b.entries) {
            for (x2, y2) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x1.idf < x2.idf, y1.idf < y2.idf);
            }
        }
    }
}

#[test]
fn idf_is_smoothed() {
    assert_eq!(idf_from_counts(10, 10), 1.0);
    assert!((idf_from_counts(3, 0) - (4.0f64.ln() + 1.0)).abs() < 1e-15);
}

fn dataset() -> impl Strategy<Value = Vec<(Vec<f64>, bool)>> {
    prop::collection::vec((prop::collection::vec(0u8..6, 3), any::<bool>()), 8..24).prop_map(|mut rows| {
        rows[0].1 = true;
        rows[1].1 = false;
        rows.into_iter().map(|(v, y)| (v.into_iter().map(f64::from).collect(), y)).collect()
    })
}

fn vectors(rows: &[(Vec<f64>, bool)], scale: f64) -> Vec<FeatureVector> {
    rows.iter()
        .enumerate()
        .map(|(i, (v, y))| FeatureVector {
            owner_id: format!("r{i}"),
            values: v.iter().map(|x| x * scale).collect(),
            label: Some(if *y { ProgramLabel::Malware("f".into()) } else { ProgramLabel::Clean }),
            vocabulary: 0,
        })
        .collect()
}

fn small() -> Hyperparameters {
    Hyperparameters { trees: 15, k: 3, ..Hyperparameters::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn order_based_learners_ignore_scale(rows in dataset(), scale in prop::sample::select(vec![0.25, 0.5, 2.0, 3.0, 7.0])) {
        let plain = vectors(&rows, 1.0);
        let scaled = vectors(&rows, scale);
        for kind in [ClassifierKind::DecisionTree, ClassifierKind::RandomForest, ClassifierKind::Knn] {
            let a = train(kind, &plain, &small()).unwrap();
            let b = train(kind, &scaled, &small()).unwrap();
            for (x, y) in plain.iter().zip(&scaled) {
                prop_assert_eq!(predict(&a, x).unwrap(), predict(&b, y).unwrap(), "{:?}", kind);
            }
        }
    }

    #[test]
    fn scores_are_probabilities(rows in dataset(), probe in prop::collection::vec(-50.0f64..50.0, 3)) {
        let data = vectors(&rows, 1.0);
        let query = FeatureVector { owner_id: "q".into(), values: probe, label: None, vocabulary: 0 };
        for kind in ClassifierKind::ALL {
            let model = train(kind, &data, &small()).unwrap();
            let p = predict_proba(&model, &query).unwrap();
            prop_assert!((0.0..=1.0).contains(&p), "{:?} gave {}", kind, p);
        }
    }

    #[test]
    fn f1_is_bounded(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let f = f1_score(tp, fp, fn_);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn tree_fits_a_perfect_split(rows in dataset(), cut in 1.0f64..5.0) {
        let rows: Vec<(Vec<f64>, bool)> = rows.into_iter().map(|(v, _)| { let y = v[1] > cut; (v, y) }).collect();
        prop_assume!(rows.iter().any(|r| r.1) && rows.iter().any(|r| !r.1));
        let data = vectors(&rows, 1.0);
        let model = train(ClassifierKind::DecisionTree, &data, &Hyperparameters::default()).unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for v in &data {
            match (v.is_infected(), predict(&model, v).unwrap()) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        prop_assert_eq!(f1_score(tp, fp, fn_), 1.0);
    }
}

#[test]
fn cross_validation_is_bit_reproducible() {
    let rows: Vec<(Vec<f64>, bool)> =
        (0..60).map(|i| (vec![(i % 7) as f64, (i * 13 % 5) as f64, (i % 3) as f64], (i * 7 + i / 5) % 3 == 0)).collect();
    let data = vectors(&rows, 1.0);
    for kind in ClassifierKind::ALL {
        let a = cross_validate(kind, &data, 5, 0.2, &small()).unwrap();
        let b = cross_validate(kind, &data, 5, 0.2, &small()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

fn graph(nodes: usize, labels: &[u64], edges: &[(usize, usize)]) -> ControlFlowGraph {
    let nodes = (0..nodes).map(|id| CfgNode { id, hash: BlockHash(labels[id % labels.len()]), size: 1 }).collect();
    ControlFlowGraph::from_parts("g", nodes, edges.iter().copied())
}

fn edges(max_nodes: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..max_nodes, 0..max_nodes), 0..10)
}

proptest! {
    #[test]
    fn growing_the_target_keeps_matches(
        p_edges in edges(3),
        t_edges in edges(5),
        extra in edges(7),
        labels in prop::collection::vec(0u64..3, 7),
    ) {
        let pattern = graph(3, &labels[..3], &p_edges);
        let small_t = graph(5, &labels, &t_edges);
        let big_t = graph(7, &labels, &[t_edges.clone(), extra].concat());
        let before = find_monomorphisms(&pattern, &small_t, &SearchOptions::exhaustive());
        let after = find_monomorphisms(&pattern, &big_t, &SearchOptions::exhaustive());
        for m in &before.mappings {
            prop_assert!(is_monomorphism(&pattern, &small_t, &m.mapping));
            prop_assert!(after.mappings.iter().any(|x| x.mapping == m.mapping));
        }
    }

    #[test]
    fn listings_round_trip(ops in prop::collection::vec((0u8..8, 0usize..32), 1..30), malware in any::<bool>()) {
        let len = ops.len();
        let parts = ops.iter().map(|&(k, t)| match k {
            0 => ("if-nez", vec![t % len]),
            1 => ("goto", vec![t % len]),
            2 => ("sparse-switch", vec![t % len, (t + 1) % len]),
            3 => ("return-object", vec![]),
            _ => (OPS[t % OPS.len()], vec![]),
        });
        let method = MethodListing::from_parts("prog", "m0", parts).unwrap();
        for ins in &method.instructions {
            if ins.kind() == OpKind::Plain {
                prop_assert!(ins.branch_targets.is_empty());
            }
        }
        let label = if malware { ProgramLabel::Malware("fam".into()) } else { ProgramLabel::Clean };
        let program = ProgramListing { program_id: "prog".into(), label, methods: vec![method] };
        let text = serialize_oplist(&program);
        prop_assert_eq!(parse_oplist(&text).unwrap(), program.clone());
        prop_assert_eq!(serialize_oplist(&parse_oplist(&text).unwrap()), text);
    }
}
