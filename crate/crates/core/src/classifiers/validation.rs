use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, train_refs, ClassifierError, ClassifierKind, Confusion, EvalReport, Hyperparameters};
use crate::features::{build_vocabulary, program_documents, vectorize_all, DocUnit, FeatureVector};
use crate::listing::ProgramListing;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_HOLDOUT: f64 = 0.2;

const FOLD_STREAM: u64 = 0xf01d;
const HOLDOUT_STREAM: u64 = 0x4010;

fn class_indices(vectors: &[FeatureVector]) -> (Vec<usize>, Vec<usize>) {
    (0..vectors.len()).partition(|&i| vectors[i].is_infected())
}

/// Assigns every vector to one of `folds` test folds so that each fold
/// holds an (almost) equal share of each class. Returns the indices of each
/// fold, sorted.
pub fn stratified_folds(vectors: &[FeatureVector], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>, ClassifierError> {
    if folds < 2 {
        return Err(ClassifierError::Setting(format!("need at least 2 folds, got {folds}")));
    }
    let (mut infected, mut clean) = class_indices(vectors);
    for (class, idx) in [("infected", &infected), ("clean", &clean)] {
        if idx.len() < folds {
            return Err(ClassifierError::TooFewSamples { class, count: idx.len(), folds });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, FOLD_STREAM));
    infected.shuffle(&mut rng);
    clean.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    // clean continues the deal where infected stopped so fold sizes differ by at most one
    for (pos, &i) in infected.iter().chain(&clean).enumerate() {
        out[pos % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Stratified train/test split; returns (train, test) index lists.
pub fn holdout_split(
    vectors: &[FeatureVector],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ClassifierError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ClassifierError::Setting(format!("holdout fraction must be in (0, 1), got {test_fraction}")));
    }
    let (infected, clean) = class_indices(vectors);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, HOLDOUT_STREAM));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in [("infected", infected), ("clean", clean)] {
        if idx.len() < 2 {
            return Err(ClassifierError::TooFewSamples { class, count: idx.len(), folds: 2 });
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn evaluate(
    kind: ClassifierKind,
    vectors: &[FeatureVector],
    train: &[usize],
    test: &[usize],
    hp: &Hyperparameters,
) -> Result<Confusion, ClassifierError> {
    let train_refs_: Vec<&FeatureVector> = train.iter().map(|&i| &vectors[i]).collect();
    let model = train_refs(kind, &train_refs_, hp)?;
    Ok(Confusion::from_pairs(
        test.iter().map(|&i| (vectors[i].is_infected(), model.score_row(&vectors[i].values) > 0.5)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub kind: ClassifierKind,
    pub folds: usize,
    /// Pooled over all folds, with per-fold F1 attached.
    pub cv: EvalReport,
    /// Single stratified split, model retrained on the training share.
    pub holdout: EvalReport,
    pub holdout_fraction: f64,
}

/// Stratified k-fold cross-validation over the whole set, plus a separate
/// stratified holdout evaluation.
pub fn cross_validate(
    kind: ClassifierKind,
    vectors: &[FeatureVector],
    folds: usize,
    holdout_fraction: f64,
    hp: &Hyperparameters,
) -> Result<CrossValidation, ClassifierError> {
    hp.validate()?;
    let fold_sets = stratified_folds(vectors, folds, hp.seed)?;
    let per_fold: Vec<Confusion> = fold_sets
        .par_iter()
        .map(|test| {
            let mut in_test = vec![false; vectors.len()];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..vectors.len()).filter(|&i| !in_test[i]).collect();
            evaluate(kind, vectors, &train, test, hp)
        })
        .collect::<Result<_, _>>()?;
    let mut pooled = Confusion::default();
    per_fold.iter().for_each(|c| pooled.merge(c));
    let mut cv = EvalReport::from_confusion(pooled);
    cv.fold_f1 = per_fold.iter().map(Confusion::f1).collect();

    let (train, test) = holdout_split(vectors, holdout_fraction, hp.seed)?;
    let holdout = EvalReport::from_confusion(evaluate(kind, vectors, &train, &test, hp)?);
    Ok(CrossValidation { kind, folds, cv, holdout, holdout_fraction })
}

/// Mean cross-validated F1 per (classifier, n-gram size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkGrid {
    pub capacity: usize,
    pub ns: Vec<usize>,
    pub rows: Vec<(ClassifierKind, Vec<f64>)>,
}

impl BenchmarkGrid {
    pub fn cell(&self, kind: ClassifierKind, n: usize) -> Option<f64> {
        let col = self.ns.iter().position(|&m| m == n)?;
        self.rows.iter().find(|(k, _)| *k == kind).map(|(_, v)| v[col])
    }

    /// One row per classifier, one column per n-gram size, three decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Algorithm");
        for n in &self.ns {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (kind, values) in &self.rows {
            out.push_str(kind.display_name());
            for v in values {
                write!(out, ",{v:.3}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// For every n in `ns`: builds a program-level vocabulary of `capacity`
/// n-grams over the whole corpus, vectorizes it and cross-validates every
/// classifier kind.
pub fn benchmark_grid(
    corpus: &[ProgramListing],
    kinds: &[ClassifierKind],
    ns: RangeInclusive<usize>,
    capacity: usize,
    folds: usize,
    hp: &Hyperparameters,
) -> Result<BenchmarkGrid, ClassifierError> {
    let ns: Vec<usize> = ns.collect();
    let mut columns = Vec::with_capacity(ns.len());
    for &n in &ns {
        let docs = corpus
            .iter()
            .map(|p| program_documents(p, DocUnit::Program, n))
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let vocab = build_vocabulary(&docs, n, capacity, DocUnit::Program)?;
        let vectors = vectorize_all(&docs, &vocab)?;
        let mut column = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let cv = cross_validate(kind, &vectors, folds, DEFAULT_HOLDOUT, hp)?;
            log::info!("{} n={n}: mean fold F1 {:.3}", kind.display_name(), cv.cv.mean_fold_f1());
            column.push(cv.cv.mean_fold_f1());
        }
        columns.push(column);
    }
    let rows = kinds.iter().enumerate().map(|(r, &k)| (k, columns.iter().map(|c| c[r]).collect())).collect();
    Ok(BenchmarkGrid { capacity, ns, rows })
}
