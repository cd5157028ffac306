//! Supervised infected-vs-clean classifiers over feature vectors.
//!
//! Four learners are available: a CART decision tree, a bagged random
//! forest, k-nearest neighbours and a linear SVM trained with Pegasos. All
//! randomness is drawn from ChaCha8 streams seeded from
//! [`Hyperparameters::seed`], so training is reproducible bit for bit.

mod knn;
mod metrics;
mod svm;
mod tree;
mod validation;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfg::fnv1a_64;
use crate::features::FeatureVector;

pub use knn::Knn;
pub use metrics::{f1_score, precision, recall, Confusion, EvalReport};
pub use svm::LinearSvm;
pub use tree::{DecisionTree, TreeNode};
pub use validation::{
    benchmark_grid, cross_validate, holdout_split, stratified_folds, BenchmarkGrid, CrossValidation,
    DEFAULT_FOLDS, DEFAULT_HOLDOUT,
};

use tree::TreeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    RandomForest,
    DecisionTree,
    Knn,
    LinearSvm,
}

impl ClassifierKind {
    /// All kinds, in the row order of the benchmark table.
    pub const ALL: [ClassifierKind; 4] =
        [ClassifierKind::RandomForest, ClassifierKind::DecisionTree, ClassifierKind::Knn, ClassifierKind::LinearSvm];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::RandomForest => "random-forest",
            ClassifierKind::DecisionTree => "decision-tree",
            ClassifierKind::Knn => "knn",
            ClassifierKind::LinearSvm => "linear-svm",
        }
    }

    /// Row label used in benchmark tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassifierKind::RandomForest => "Random Forest",
            ClassifierKind::DecisionTree => "Decision Tree",
            ClassifierKind::Knn => "KNN",
            ClassifierKind::LinearSvm => "SVM",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown classifier `{s}` (random-forest, decision-tree, knn, linear-svm)"))
    }
}

/// Hyperparameters for every kind; each learner reads the fields it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub seed: u64,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub trees: usize,
    /// Features tried per forest split; `None` means ceil(sqrt(width)).
    pub max_features: Option<usize>,
    pub k: usize,
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            seed: 42,
            max_depth: None,
            min_samples_split: 2,
            trees: 100,
            max_features: None,
            k: 5,
            lambda: 1e-3,
            epochs: 50,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Hyperparameter(m.to_string()));
        if self.trees == 0 {
            return bad("trees must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.max_features == Some(0) {
            return bad("max_features must be at least 1");
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelState {
    DecisionTree { tree: DecisionTree },
    RandomForest { trees: Vec<DecisionTree> },
    Knn(Knn),
    LinearSvm(LinearSvm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ClassifierKind,
    pub hyperparameters: Hyperparameters,
    pub vocabulary_fingerprint: u64,
    pub width: usize,
    pub state: ModelState,
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("training data needs both classes ({infected} infected, {clean} clean)")]
    SingleClass { infected: usize, clean: usize },
    #[error("vector `{owner}` has width {found}, expected {expected}")]
    WidthMismatch { owner: String, expected: usize, found: usize },
    #[error("vector `{owner}` was built with vocabulary {found:016x}, model expects {expected:016x}")]
    FingerprintMismatch { owner: String, expected: u64, found: u64 },
    #[error("training vectors come from different vocabularies")]
    MixedVocabularies,
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    TooFewSamples { class: &'static str, count: usize, folds: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("invalid evaluation setting: {0}")]
    Setting(String),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains a model on labeled vectors. A vector counts as infected when its
/// label is `malware(_)`; anything else is clean.
pub fn train(
    kind: ClassifierKind,
    vectors: &[FeatureVector],
    hyperparameters: &Hyperparameters,
) -> Result<Model, ClassifierError> {
    let refs: Vec<&FeatureVector> = vectors.iter().collect();
    train_refs(kind, &refs, hyperparameters)
}

pub(crate) fn train_refs(
    kind: ClassifierKind,
    vectors: &[&FeatureVector],
    hyperparameters: &Hyperparameters,
) -> Result<Model, ClassifierError> {
    hyperparameters.validate()?;
    let width = vectors.first().map_or(0, |v| v.values.len());
    let fingerprint = vectors.first().map_or(0, |v| v.vocabulary);
    for v in vectors {
        if v.values.len() != width {
            return Err(ClassifierError::WidthMismatch { owner: v.owner_id.clone(), expected: width, found: v.values.len() });
        }
        if v.vocabulary != fingerprint {
            return Err(ClassifierError::MixedVocabularies);
        }
    }
    let y: Vec<bool> = vectors.iter().map(|v| v.is_infected()).collect();
    let infected = y.iter().filter(|&&b| b).count();
    if infected == 0 || infected == y.len() {
        return Err(ClassifierError::SingleClass { infected, clean: y.len() - infected });
    }
    let x: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let hp = hyperparameters;
    let state = match kind {
        ClassifierKind::DecisionTree => {
            let params = TreeParams { max_depth: hp.max_depth, min_samples_split: hp.min_samples_split, max_features: None };
            ModelState::DecisionTree { tree: DecisionTree::fit(&x, &y, (0..x.len()).collect(), params, None) }
        }
        ClassifierKind::RandomForest => {
            let mtry = hp.max_features.unwrap_or_else(|| (width as f64).sqrt().ceil() as usize).max(1);
            let params =
                TreeParams { max_depth: hp.max_depth, min_samples_split: hp.min_samples_split, max_features: Some(mtry) };
            let trees = (0..hp.trees as u64)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, t));
                    let sample = bootstrap(x.len(), &mut rng);
                    DecisionTree::fit(&x, &y, sample, params, Some(&mut rng))
                })
                .collect();
            ModelState::RandomForest { trees }
        }
        ClassifierKind::Knn => ModelState::Knn(Knn::fit(&x, &y, hp.k)),
        ClassifierKind::LinearSvm => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, u64::MAX));
            ModelState::LinearSvm(LinearSvm::fit(&x, &y, hp.lambda, hp.epochs, &mut rng))
        }
    };
    Ok(Model { kind, hyperparameters: hp.clone(), vocabulary_fingerprint: fingerprint, width, state })
}

fn bootstrap(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::RngExt;
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

impl Model {
    /// Infected-class score in `[0, 1]` for a raw row, without the
    /// vocabulary check.
    pub fn score_row(&self, row: &[f64]) -> f64 {
        match &self.state {
            ModelState::DecisionTree { tree } => tree.leaf_purity(row),
            ModelState::RandomForest { trees } => {
                trees.iter().filter(|t| t.votes_infected(row)).count() as f64 / trees.len() as f64
            }
            ModelState::Knn(knn) => knn.infected_fraction(row),
            ModelState::LinearSvm(svm) => svm.probability(row),
        }
    }

    fn check(&self, v: &FeatureVector) -> Result<(), ClassifierError> {
        if v.vocabulary != self.vocabulary_fingerprint {
            return Err(ClassifierError::FingerprintMismatch {
                owner: v.owner_id.clone(),
                expected: self.vocabulary_fingerprint,
                found: v.vocabulary,
            });
        }
        if v.values.len() != self.width {
            return Err(ClassifierError::WidthMismatch { owner: v.owner_id.clone(), expected: self.width, found: v.values.len() });
        }
        Ok(())
    }

    /// Stable fingerprint of the persisted form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a_64(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifierError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Infected-class score. Forest: share of trees voting infected; KNN:
/// share of infected neighbours; tree: infected share of the leaf; SVM:
/// logistic of the margin.
pub fn predict_proba(model: &Model, vector: &FeatureVector) -> Result<f64, ClassifierError> {
    model.check(vector)?;
    Ok(model.score_row(&vector.values))
}

/// Hard label: infected when the score is strictly above one half.
pub fn predict(model: &Model, vector: &FeatureVector) -> Result<bool, ClassifierError> {
    predict_proba(model, vector).map(|p| p > 0.5)
}

#[cfg(test)]
pub(crate) mod testdata {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::features::FeatureVector;
    use crate::listing::ProgramLabel;

    pub fn vector(id: usize, values: Vec<f64>, infected: bool) -> FeatureVector {
        FeatureVector {
            owner_id: format!("v{id}"),
            values,
            label: Some(if infected { ProgramLabel::Malware("fam".into()) } else { ProgramLabel::Clean }),
            vocabulary: 7,
        }
    }

    /// Two well separated Gaussian-ish clusters in `width` dimensions.
    pub fn clusters(per_class: usize, width: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..2 * per_class {
            let infected = i % 2 == 1;
            let center = if infected { 1.0 } else { 0.0 };
            let values = (0..width).map(|_| center + rng.random_range(-0.3..0.3)).collect();
            out.push(vector(i, values, infected));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::testdata::*;
    use super::*;

    #[test]
    fn every_kind_fits_separable_clusters() {
        let data = clusters(30, 5, 1);
        for kind in ClassifierKind::ALL {
            let model = train(kind, &data, &Hyperparameters::default()).unwrap();
            let correct = data.iter().filter(|v| predict(&model, v).unwrap() == v.is_infected()).count();
            assert_eq!(correct, data.len(), "{kind}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = clusters(20, 4, 2);
        let hp = Hyperparameters { seed: 9, ..Hyperparameters::default() };
        for kind in ClassifierKind::ALL {
            let a = train(kind, &data, &hp).unwrap();
            let b = train(kind, &data, &hp).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn knn_with_k1_reproduces_training_labels() {
        let data = clusters(15, 3, 3);
        let hp = Hyperparameters { k: 1, ..Hyperparameters::default() };
        let model = train(ClassifierKind::Knn, &data, &hp).unwrap();
        assert!(data.iter().all(|v| predict(&model, v).unwrap() == v.is_infected()));
    }

    #[test]
    fn training_errors() {
        let one_class: Vec<_> = (0..4).map(|i| vector(i, vec![0.0], false)).collect();
        assert!(matches!(
            train(ClassifierKind::DecisionTree, &one_class, &Hyperparameters::default()),
            Err(ClassifierError::SingleClass { infected: 0, clean: 4 })
        ));
        let ragged = vec![vector(0, vec![0.0], false), vector(1, vec![0.0, 1.0], true)];
        assert!(matches!(
            train(ClassifierKind::Knn, &ragged, &Hyperparameters::default()),
            Err(ClassifierError::WidthMismatch { .. })
        ));
        let bad = Hyperparameters { trees: 0, ..Hyperparameters::default() };
        assert!(matches!(train(ClassifierKind::RandomForest, &clusters(3, 2, 0), &bad), Err(ClassifierError::Hyperparameter(_))));
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let data = clusters(5, 2, 4);
        let model = train(ClassifierKind::DecisionTree, &data, &Hyperparameters::default()).unwrap();
        let mut foreign = data[0].clone();
        foreign.vocabulary = 8;
        assert!(matches!(predict_proba(&model, &foreign), Err(ClassifierError::FingerprintMismatch { .. })));
    }

    #[test]
    fn forest_unanimous_vote_scores_one() {
        let data = clusters(10, 2, 5);
        let model = train(ClassifierKind::RandomForest, &data, &Hyperparameters::default()).unwrap();
        let far_infected = vector(99, vec![5.0, 5.0], true);
        assert_eq!(predict_proba(&model, &far_infected).unwrap(), 1.0);
    }

    #[test]
    fn model_json_round_trip() {
        let data = clusters(10, 3, 6);
        for kind in ClassifierKind::ALL {
            let model = train(kind, &data, &Hyperparameters::default()).unwrap();
            let back = Model::from_json(&model.to_json()).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.fingerprint(), model.fingerprint());
        }
    }

    #[test]
    fn kind_names() {
        for kind in ClassifierKind::ALL {
            assert_eq!(kind.as_str().parse::<ClassifierKind>().unwrap(), kind);
        }
        assert!("xgboost".parse::<ClassifierKind>().is_err());
    }
}
