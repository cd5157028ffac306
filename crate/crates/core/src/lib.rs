//! Static malware detection from opcode listings.
//!
//! The pipeline learns which opcode n-grams characterize infected code,
//! turns the blocks that carry them into hash-labeled control-flow
//! fragments, and detects those fragments in unknown programs by subgraph
//! monomorphism scored on block-hash agreement.
//!
//! | module | role |
//! |---|---|
//! | [`listing`] | `.oplist` and smali-subset ingestion |
//! | [`cfg`] | basic blocks, block hashes, per-method CFGs |
//! | [`features`] | n-grams, TF-IDF, vocabularies, feature vectors |
//! | [`classifiers`] | decision tree, random forest, KNN, linear SVM, evaluation |
//! | [`signature`] | characteristic fragments and the signature database |
//! | [`matcher`] | monomorphism search, hash agreement, scanning |
//! | [`harness`] | synthetic corpora and the experiment protocols |
//!
//! The book under `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod cfg;
pub mod classifiers;
pub mod features;
pub mod harness;
pub mod listing;
pub mod matcher;
pub mod signature;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/listings.md")]
    mod listings {}
    #[doc = include_str!("../../../book/src/cfg.md")]
    mod cfg {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/classifiers.md")]
    mod classifiers {}
    #[doc = include_str!("../../../book/src/signatures.md")]
    mod signatures {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
