//! The laboratory, real-style and benchmark experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{synthesize_benign, synthesize_payload, BenignParams, PayloadParams};
use super::transform::{apply_transforms, Transform};
use super::{inject_methods, CorpusManifest, HarnessError, ManifestEntry, Role, VariantInfo};
use crate::classifiers::{
    benchmark_grid, derive_seed, train, BenchmarkGrid, ClassifierKind, Confusion, EvalReport, Hyperparameters, Model,
};
use crate::features::{build_vocabulary, program_documents, vectorize_all, DocUnit, Vocabulary};
use crate::listing::{MethodListing, ProgramListing};
use crate::matcher::{scan, DetectionReport, ScanOptions, Verdict, DEFAULT_BUDGET, DEFAULT_THETA};
use crate::signature::{build_database, creation_time, ExtractParams, SignatureDatabase};

/// Settings shared by every train, build and scan step of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub n: usize,
    pub capacity: usize,
    pub doc_unit: DocUnit,
    pub classifier: ClassifierKind,
    pub hyperparameters: Hyperparameters,
    pub extract: ExtractParams,
    pub theta: f64,
    pub budget: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            n: crate::features::DEFAULT_NGRAM,
            capacity: crate::features::DEFAULT_CAPACITY,
            doc_unit: DocUnit::Block,
            classifier: ClassifierKind::RandomForest,
            hyperparameters: Hyperparameters::default(),
            extract: ExtractParams::default(),
            theta: DEFAULT_THETA,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl PipelineParams {
    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions { theta: self.theta, budget: self.budget, strict_hashes: false }
    }

    /// Vocabulary and model from `training`, then a database from `sources`.
    pub fn build(
        &self,
        training: &[&ProgramListing],
        sources: &[ProgramListing],
    ) -> Result<(Vocabulary, Model, SignatureDatabase), HarnessError> {
        let mut docs = Vec::new();
        for p in training {
            docs.extend(program_documents(p, self.doc_unit, self.n)?);
        }
        let vocab = build_vocabulary(&docs, self.n, self.capacity, self.doc_unit)?;
        let vectors = vectorize_all(&docs, &vocab)?;
        let model = train(self.classifier, &vectors, &self.hyperparameters)?;
        let db = build_database(sources, &model, &vocab, &self.extract, creation_time())?;
        Ok((vocab, model, db))
    }
}

fn scan_all(programs: &[ProgramListing], db: &SignatureDatabase, opts: &ScanOptions) -> Result<Vec<DetectionReport>, HarnessError> {
    programs.par_iter().map(|p| scan(p, db, opts).map_err(HarnessError::from)).collect()
}

fn variant_methods(payload: &MethodListing, transforms: &[Transform], seed: u64) -> Vec<MethodListing> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a));
    apply_transforms(payload, transforms, &mut rng)
}

fn table_csv(first: &str, rows: impl Iterator<Item = (String, EvalReport)>) -> String {
    let mut out = format!("{first},Precision,Recall,F-measure\n");
    for (name, r) in rows {
        writeln!(out, "{name},{:.3},{:.3},{:.3}", r.precision, r.recall, r.f1).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabSpec {
    pub seed: u64,
    pub hosts: usize,
    pub extras: usize,
    pub family: String,
    pub benign: BenignParams,
    pub payload: PayloadParams,
    /// One transform pipeline per variant.
    pub variants: Vec<Vec<Transform>>,
    pub pipeline: PipelineParams,
}

impl Default for LabSpec {
    fn default() -> Self {
        LabSpec {
            seed: 7,
            hosts: 10,
            extras: 100,
            family: "labmal".into(),
            benign: BenignParams::default(),
            payload: PayloadParams::default(),
            variants: vec![
                vec![Transform::OpcodeSubstitution { rate: 0.05 }],
                vec![Transform::BlockReorder],
                vec![Transform::NopPadding { rate: 0.03 }],
            ],
            pipeline: PipelineParams::default(),
        }
    }
}

/// Originals, then extras, then the infected programs grouped by variant.
pub fn lab_corpus(spec: &LabSpec) -> Result<(Vec<ProgramListing>, CorpusManifest), HarnessError> {
    if spec.hosts == 0 {
        return Err(HarnessError::Spec("the laboratory needs at least one host".into()));
    }
    if spec.variants.is_empty() {
        return Err(HarnessError::Spec("the laboratory needs at least one variant".into()));
    }
    let mut benign = synthesize_benign(spec.hosts + spec.extras, "app", &spec.benign, derive_seed(spec.seed, 1))?;
    for (i, p) in benign.iter_mut().enumerate().skip(spec.hosts) {
        p.set_program_id(format!("extra-{:03}", i - spec.hosts));
    }
    let payload = synthesize_payload("payload_main", &spec.payload, derive_seed(spec.seed, 2))?;
    let mut entries: Vec<ManifestEntry> = benign
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestEntry {
            program_id: p.program_id.clone(),
            role: if i < spec.hosts { Role::BenignOriginal } else { Role::BenignExtra },
            family: None,
            variant: None,
            host: None,
        })
        .collect();
    let mut programs = benign.clone();
    let mut variants = Vec::new();
    for (v, transforms) in spec.variants.iter().enumerate() {
        let vseed = derive_seed(spec.seed, 0x100 + v as u64);
        let methods = variant_methods(&payload, transforms, vseed);
        for host in &benign[..spec.hosts] {
            let mut infected = inject_methods(host, &methods, &spec.family, vseed);
            infected.set_program_id(format!("{}-v{}", host.program_id, v + 1));
            entries.push(ManifestEntry {
                program_id: infected.program_id.clone(),
                role: Role::Infected,
                family: Some(spec.family.clone()),
                variant: Some(v + 1),
                host: Some(host.program_id.clone()),
            });
            programs.push(infected);
        }
        variants.push(VariantInfo {
            family: spec.family.clone(),
            variant: v + 1,
            payload_methods: methods.iter().map(|m| m.method_id.clone()).collect(),
            transforms: transforms.clone(),
        });
    }
    Ok((programs, CorpusManifest { seed: spec.seed, entries, variants }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: usize,
    pub transforms: Vec<Transform>,
    pub signatures: usize,
    pub report: EvalReport,
    pub verdicts: Vec<(String, Verdict)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabReport {
    pub seed: u64,
    pub theta: f64,
    pub rows: Vec<VariantResult>,
}

impl LabReport {
    /// Precision, recall and F-measure per single-variant dictionary.
    pub fn to_csv(&self) -> String {
        table_csv("Dictionary", self.rows.iter().map(|r| (format!("Variant {}", r.variant), r.report.clone())))
    }

    /// Recall pooled over every dictionary.
    pub fn micro_recall(&self) -> f64 {
        let mut c = Confusion::default();
        self.rows.iter().for_each(|r| c.merge(&r.report.confusion));
        c.recall()
    }
}

/// For each variant: train on the original hosts plus that variant's
/// infected programs, build a dictionary from those infected programs,
/// scan the whole corpus and score detections against ground truth. The
/// extras are never trained on.
pub fn run_laboratory(spec: &LabSpec) -> Result<LabReport, HarnessError> {
    let (programs, manifest) = lab_corpus(spec)?;
    let opts = spec.pipeline.scan_options();
    let mut rows = Vec::new();
    for info in &manifest.variants {
        let in_variant = |e: &ManifestEntry| match e.role {
            Role::BenignOriginal => true,
            Role::BenignExtra => false,
            Role::Infected => e.variant == Some(info.variant),
        };
        let training: Vec<&ProgramListing> =
            programs.iter().zip(&manifest.entries).filter(|(_, e)| in_variant(e)).map(|(p, _)| p).collect();
        let sources: Vec<ProgramListing> = programs
            .iter()
            .zip(&manifest.entries)
            .filter(|(_, e)| e.role == Role::Infected && e.variant == Some(info.variant))
            .map(|(p, _)| p.clone())
            .collect();
        let (_, _, db) = spec.pipeline.build(&training, &sources)?;
        let reports = scan_all(&programs, &db, &opts)?;
        let confusion = Confusion::from_pairs(
            manifest.entries.iter().zip(&reports).map(|(e, r)| (e.role == Role::Infected, r.verdict.is_detection())),
        );
        log::info!("variant {}: {} signatures, {:?}", info.variant, db.signatures.len(), confusion);
        rows.push(VariantResult {
            variant: info.variant,
            transforms: info.transforms.clone(),
            signatures: db.signatures.len(),
            report: EvalReport::from_confusion(confusion),
            verdicts: reports.into_iter().map(|r| (r.program_id, r.verdict)).collect(),
        });
    }
    Ok(LabReport { seed: spec.seed, theta: spec.pipeline.theta, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub variants: usize,
    pub per_variant: usize,
    /// Payload opcode slot.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "family", rename_all = "kebab-case")]
pub enum Dictionary {
    /// Built from variant 0 of one family.
    Family(String),
    AllMalware,
}

impl Dictionary {
    pub fn label(&self) -> String {
        match self {
            Dictionary::Family(f) => f.clone(),
            Dictionary::AllMalware => "Set of malware".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealStyleSpec {
    pub seed: u64,
    pub clean: usize,
    pub families: Vec<FamilySpec>,
    pub benign: BenignParams,
    pub payload: PayloadParams,
    /// Variant `j > 0` of a family uses entry `(j - 1) % len`; variant 0 is
    /// the untransformed payload.
    pub variant_menu: Vec<Vec<Transform>>,
    pub dictionaries: Vec<Dictionary>,
    pub pipeline: PipelineParams,
}

impl Default for RealStyleSpec {
    fn default() -> Self {
        RealStyleSpec {
            seed: 11,
            clean: 100,
            families: vec![
                FamilySpec { name: "alpha".into(), variants: 6, per_variant: 10, slot: 0 },
                FamilySpec { name: "beta".into(), variants: 4, per_variant: 10, slot: 1 },
            ],
            benign: BenignParams::default(),
            payload: PayloadParams::default(),
            variant_menu: vec![
                vec![Transform::OpcodeSubstitution { rate: 0.05 }],
                vec![Transform::BlockReorder],
                vec![Transform::NopPadding { rate: 0.03 }],
                vec![Transform::BlockReorder, Transform::OpcodeSubstitution { rate: 0.05 }],
                vec![Transform::BlockReorder, Transform::NopPadding { rate: 0.03 }],
            ],
            dictionaries: vec![
                Dictionary::Family("alpha".into()),
                Dictionary::Family("beta".into()),
                Dictionary::AllMalware,
            ],
            pipeline: PipelineParams::default(),
        }
    }
}

/// Clean programs first, then each family's samples grouped by variant.
/// Every sample repackages one of the clean programs, taken in turn.
pub fn realstyle_corpus(spec: &RealStyleSpec) -> Result<(Vec<ProgramListing>, CorpusManifest), HarnessError> {
    let malware: usize = spec.families.iter().map(|f| f.variants * f.per_variant).sum();
    if malware == 0 {
        return Err(HarnessError::Spec("the malware corpus is empty".into()));
    }
    if spec.clean == 0 {
        return Err(HarnessError::Spec("the clean corpus is empty".into()));
    }
    let benign = synthesize_benign(spec.clean, "clean", &spec.benign, derive_seed(spec.seed, 1))?;
    let mut entries: Vec<ManifestEntry> = benign
        .iter()
        .map(|p| ManifestEntry { program_id: p.program_id.clone(), role: Role::BenignExtra, family: None, variant: None, host: None })
        .collect();
    let mut programs = benign.clone();
    let mut variants = Vec::new();
    let mut next_host = benign.iter().cycle();
    for (fi, fam) in spec.families.iter().enumerate() {
        let params = PayloadParams { slot: fam.slot, ..spec.payload.clone() };
        let payload =
            synthesize_payload(&format!("{}_main", fam.name), &params, derive_seed(spec.seed, 0x200 + fi as u64))?;
        for v in 0..fam.variants {
            let transforms =
                if v == 0 || spec.variant_menu.is_empty() { Vec::new() } else { spec.variant_menu[(v - 1) % spec.variant_menu.len()].clone() };
            let vseed = derive_seed(spec.seed, 0x1000 * (fi as u64 + 1) + v as u64);
            let methods = variant_methods(&payload, &transforms, vseed);
            for k in 0..fam.per_variant {
                let host = next_host.next().expect("clean corpus is not empty");
                let mut sample = inject_methods(host, &methods, &fam.name, vseed);
                sample.set_program_id(format!("{}-v{v}-{k:02}", fam.name));
                entries.push(ManifestEntry {
                    program_id: sample.program_id.clone(),
                    role: Role::Infected,
                    family: Some(fam.name.clone()),
                    variant: Some(v),
                    host: Some(host.program_id.clone()),
                });
                programs.push(sample);
            }
            variants.push(VariantInfo {
                family: fam.name.clone(),
                variant: v,
                payload_methods: methods.iter().map(|m| m.method_id.clone()).collect(),
                transforms,
            });
        }
    }
    Ok((programs, CorpusManifest { seed: spec.seed, entries, variants }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryResult {
    pub dictionary: Dictionary,
    pub signatures: usize,
    pub report: EvalReport,
    /// True family (or `clean`) -> verdict family (or `clean`) -> count.
    pub attribution: BTreeMap<String, BTreeMap<String, usize>>,
    /// Malware detected as a family other than its own.
    pub off_diagonal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealStyleReport {
    pub seed: u64,
    pub theta: f64,
    pub rows: Vec<DictionaryResult>,
}

impl RealStyleReport {
    pub fn to_csv(&self) -> String {
        table_csv("Dictionary based on", self.rows.iter().map(|r| (r.dictionary.label(), r.report.clone())))
    }

    /// Attribution matrices, one block per dictionary.
    pub fn attribution_csv(&self) -> String {
        let mut out = String::from("dictionary,truth,verdict,count\n");
        for r in &self.rows {
            for (truth, row) in &r.attribution {
                for (verdict, count) in row {
                    writeln!(out, "{},{truth},{verdict},{count}", r.dictionary.label()).unwrap();
                }
            }
        }
        out
    }
}

/// Builds each requested dictionary, scans clean and malware programs and
/// reports detection quality plus family attribution.
pub fn run_realstyle(spec: &RealStyleSpec) -> Result<RealStyleReport, HarnessError> {
    let (programs, manifest) = realstyle_corpus(spec)?;
    let opts = spec.pipeline.scan_options();
    let mut rows = Vec::new();
    for dict in &spec.dictionaries {
        let selected = |e: &ManifestEntry| match dict {
            Dictionary::Family(f) => e.family.as_deref() == Some(f.as_str()) && e.variant == Some(0),
            Dictionary::AllMalware => e.role == Role::Infected,
        };
        if !manifest.entries.iter().any(selected) {
            return Err(HarnessError::Spec(format!("dictionary `{}` selects no malware", dict.label())));
        }
        let training: Vec<&ProgramListing> = programs
            .iter()
            .zip(&manifest.entries)
            .filter(|(_, e)| e.role != Role::Infected || selected(e))
            .map(|(p, _)| p)
            .collect();
        let sources: Vec<ProgramListing> =
            programs.iter().zip(&manifest.entries).filter(|(_, e)| selected(e)).map(|(p, _)| p.clone()).collect();
        let (_, _, db) = spec.pipeline.build(&training, &sources)?;
        let reports = scan_all(&programs, &db, &opts)?;
        let positive = |e: &ManifestEntry| match dict {
            Dictionary::Family(f) => e.family.as_deref() == Some(f.as_str()),
            Dictionary::AllMalware => e.role == Role::Infected,
        };
        let confusion = Confusion::from_pairs(
            manifest.entries.iter().zip(&reports).map(|(e, r)| (positive(e), r.verdict.is_detection())),
        );
        let mut attribution: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut off_diagonal = 0;
        for (e, r) in manifest.entries.iter().zip(&reports) {
            let truth = e.family.clone().unwrap_or_else(|| "clean".into());
            let verdict = r.verdict.family().unwrap_or("clean").to_string();
            if e.family.is_some() && r.verdict.is_detection() && verdict != truth {
                off_diagonal += 1;
            }
            *attribution.entry(truth).or_default().entry(verdict).or_default() += 1;
        }
        log::info!("dictionary {}: {} signatures, {:?}", dict.label(), db.signatures.len(), confusion);
        rows.push(DictionaryResult {
            dictionary: dict.clone(),
            signatures: db.signatures.len(),
            report: EvalReport::from_confusion(confusion),
            attribution,
            off_diagonal,
        });
    }
    Ok(RealStyleReport { seed: spec.seed, theta: spec.pipeline.theta, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub corpus: RealStyleSpec,
    pub ns: (usize, usize),
    pub capacity: usize,
    pub folds: usize,
    pub kinds: Vec<ClassifierKind>,
    pub hyperparameters: Hyperparameters,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            corpus: RealStyleSpec::default(),
            ns: (crate::features::MIN_NGRAM, crate::features::MAX_NGRAM),
            capacity: crate::features::DEFAULT_CAPACITY,
            folds: crate::classifiers::DEFAULT_FOLDS,
            kinds: ClassifierKind::ALL.to_vec(),
            hyperparameters: Hyperparameters::default(),
        }
    }
}

/// The programs of the real-style corpus, used for the classifier grid.
pub fn benchmark_corpus(spec: &BenchmarkSpec) -> Result<Vec<ProgramListing>, HarnessError> {
    Ok(realstyle_corpus(&spec.corpus)?.0)
}

/// Cross-validated F1 for every classifier and n-gram size on
/// program-level documents.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkGrid, HarnessError> {
    let corpus = benchmark_corpus(spec)?;
    Ok(benchmark_grid(&corpus, &spec.kinds, spec.ns.0..=spec.ns.1, spec.capacity, spec.folds, &spec.hyperparameters)?)
}
