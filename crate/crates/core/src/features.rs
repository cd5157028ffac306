//! Opcode n-grams, TF-IDF weighting and fixed-width feature vectors.
//!
//! Term frequency is relative (`count / total`), inverse document frequency
//! is smoothed: `ln((1 + N) / (1 + df)) + 1`. A [`Vocabulary`] keeps the
//! `capacity` n-grams with the largest corpus-wide TF-IDF mass.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::cfg::{fnv1a_64, partition_blocks};
use crate::listing::{ProgramLabel, ProgramListing};

pub const MIN_NGRAM: usize = 1;
pub const MAX_NGRAM: usize = 9;
pub const DEFAULT_NGRAM: usize = 2;
pub const DEFAULT_CAPACITY: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("n-gram size {0} outside {MIN_NGRAM}..={MAX_NGRAM}")]
    NgramSize(usize),
    #[error("vocabulary capacity must be at least 1")]
    Capacity,
    #[error("term frequency of an empty document")]
    EmptyDocument,
    #[error("document uses {doc}-grams but the vocabulary uses {vocab}-grams")]
    SizeMismatch { doc: usize, vocab: usize },
    #[error("corpus has no non-empty documents")]
    EmptyCorpus,
    #[error("feature matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn check_ngram_size(n: usize) -> Result<(), FeatureError> {
    if (MIN_NGRAM..=MAX_NGRAM).contains(&n) {
        Ok(())
    } else {
        Err(FeatureError::NgramSize(n))
    }
}

/// A contiguous run of mnemonics. Ordered lexicographically by tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ngram(Vec<String>);

impl Ngram {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self, FeatureError> {
        check_ngram_size(tokens.len())?;
        Ok(Ngram(tokens.iter().map(|t| t.as_ref().to_string()).collect()))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Ngram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("|"))
    }
}

/// A multiset of same-size n-grams.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NgramDoc {
    n: usize,
    counts: BTreeMap<Ngram, usize>,
    total: usize,
}

impl NgramDoc {
    pub fn empty(n: usize) -> Result<Self, FeatureError> {
        check_ngram_size(n)?;
        Ok(NgramDoc { n, counts: BTreeMap::new(), total: 0 })
    }

    /// Union of the windows of several sequences. Windows never span two
    /// sequences.
    pub fn from_sequences<S: AsRef<str>>(sequences: &[Vec<S>], n: usize) -> Result<Self, FeatureError> {
        let mut doc = NgramDoc::empty(n)?;
        for seq in sequences {
            doc.add_sequence(seq);
        }
        Ok(doc)
    }

    fn add_sequence<S: AsRef<str>>(&mut self, seq: &[S]) {
        for window in seq.windows(self.n) {
            let gram = Ngram(window.iter().map(|t| t.as_ref().to_string()).collect());
            *self.counts.entry(gram).or_insert(0) += 1;
            self.total += 1;
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, gram: &Ngram) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn contains(&self, gram: &Ngram) -> bool {
        self.counts.contains_key(gram)
    }

    /// Distinct n-grams with their counts, in n-gram order.
    pub fn iter(&self) -> impl Iterator<Item = (&Ngram, usize)> {
        self.counts.iter().map(|(g, &c)| (g, c))
    }
}

/// All contiguous windows of length `n`.
pub fn extract_ngrams<S: AsRef<str>>(seq: &[S], n: usize) -> Result<NgramDoc, FeatureError> {
    let mut doc = NgramDoc::empty(n)?;
    doc.add_sequence(seq);
    Ok(doc)
}

pub fn term_frequency(doc: &NgramDoc, gram: &Ngram) -> Result<f64, FeatureError> {
    if doc.is_empty() {
        return Err(FeatureError::EmptyDocument);
    }
    Ok(doc.count(gram) as f64 / doc.total() as f64)
}

pub fn document_frequency(corpus: &[NgramDoc], gram: &Ngram) -> usize {
    corpus.iter().filter(|d| d.contains(gram)).count()
}

pub fn idf_from_counts(documents: usize, df: usize) -> f64 {
    ((1.0 + documents as f64) / (1.0 + df as f64)).ln() + 1.0
}

pub fn inverse_document_frequency(corpus: &[NgramDoc], gram: &Ngram) -> f64 {
    idf_from_counts(corpus.len(), document_frequency(corpus, gram))
}

/// What a single document stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocUnit {
    #[default]
    Program,
    Method,
    Block,
}

impl std::str::FromStr for DocUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "program" => Ok(DocUnit::Program),
            "method" => Ok(DocUnit::Method),
            "block" => Ok(DocUnit::Block),
            other => Err(format!("unknown document unit `{other}` (program, method or block)")),
        }
    }
}

impl fmt::Display for DocUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocUnit::Program => "program",
            DocUnit::Method => "method",
            DocUnit::Block => "block",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDoc {
    pub owner_id: String,
    pub label: Option<ProgramLabel>,
    pub doc: NgramDoc,
}

/// Owner id of a block document.
pub fn block_owner_id(program_id: &str, method_id: &str, block_id: usize) -> String {
    format!("{program_id}/{method_id}#{block_id}")
}

/// Splits a program into documents of the given unit. Every document
/// inherits the program label (unknown becomes `None`).
pub fn program_documents(program: &ProgramListing, unit: DocUnit, n: usize) -> Result<Vec<LabeledDoc>, FeatureError> {
    check_ngram_size(n)?;
    let label = match &program.label {
        ProgramLabel::Unknown => None,
        other => Some(other.clone()),
    };
    let mut docs = Vec::new();
    match unit {
        DocUnit::Program => {
            let seqs: Vec<Vec<&str>> = program.methods.iter().map(|m| m.mnemonics()).collect();
            docs.push(LabeledDoc {
                owner_id: program.program_id.clone(),
                label,
                doc: NgramDoc::from_sequences(&seqs, n)?,
            });
        }
        DocUnit::Method => {
            for m in &program.methods {
                docs.push(LabeledDoc {
                    owner_id: format!("{}/{}", program.program_id, m.method_id),
                    label: label.clone(),
                    doc: extract_ngrams(&m.mnemonics(), n)?,
                });
            }
        }
        DocUnit::Block => {
            for m in &program.methods {
                for b in partition_blocks(m) {
                    docs.push(LabeledDoc {
                        owner_id: block_owner_id(&program.program_id, &m.method_id, b.id),
                        label: label.clone(),
                        doc: extract_ngrams(&b.opcodes, n)?,
                    });
                }
            }
        }
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub ngram: Ngram,
    pub idf: f64,
    /// Corpus-wide TF-IDF mass used for selection.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n: usize,
    pub capacity: usize,
    pub doc_unit: DocUnit,
    /// Number of non-empty documents the idf values were computed over.
    pub documents: usize,
    pub entries: Vec<VocabEntry>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stable fingerprint over everything that affects vectorization.
    pub fn fingerprint(&self) -> u64 {
        let mut text = format!("{}|{}|{}|{}\n", self.n, self.capacity, self.doc_unit, self.documents);
        for e in &self.entries {
            text.push_str(&e.ngram.to_string());
            text.push('\t');
            text.push_str(&format!("{:016x}\n", e.idf.to_bits()));
        }
        fnv1a_64(text.as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Selects the `capacity` n-grams with the highest summed TF-IDF over the
/// corpus. Ties go to the lexicographically smaller n-gram. Empty documents
/// are skipped entirely (they count neither towards `N` nor towards `df`).
pub fn build_vocabulary(
    corpus: &[LabeledDoc],
    n: usize,
    capacity: usize,
    doc_unit: DocUnit,
) -> Result<Vocabulary, FeatureError> {
    check_ngram_size(n)?;
    if capacity == 0 {
        return Err(FeatureError::Capacity);
    }
    let docs: Vec<&LabeledDoc> = corpus.iter().filter(|d| !d.doc.is_empty()).collect();
    if docs.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    if let Some(d) = docs.iter().find(|d| d.doc.n() != n) {
        return Err(FeatureError::SizeMismatch { doc: d.doc.n(), vocab: n });
    }
    let malware = docs.iter().filter(|d| d.label.as_ref().is_some_and(ProgramLabel::is_malware)).count();
    let clean = docs.iter().filter(|d| d.label == Some(ProgramLabel::Clean)).count();
    if malware == 0 || clean == 0 {
        log::warn!("vocabulary corpus has a single label ({malware} malware, {clean} clean documents)");
    }

    // (document frequency, summed term frequency)
    let mut stats: BTreeMap<&Ngram, (usize, f64)> = BTreeMap::new();
    for d in &docs {
        let total = d.doc.total() as f64;
        for (gram, count) in d.doc.iter() {
            let e = stats.entry(gram).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += count as f64 / total;
        }
    }
    let documents = docs.len();
    let mut entries: Vec<VocabEntry> = stats
        .into_iter()
        .map(|(gram, (df, tf_sum))| {
            let idf = idf_from_counts(documents, df);
            VocabEntry { ngram: gram.clone(), idf, score: tf_sum * idf }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ngram.cmp(&b.ngram)));
    entries.truncate(capacity);
    Ok(Vocabulary { n, capacity, doc_unit, documents, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub owner_id: String,
    pub values: Vec<f64>,
    pub label: Option<ProgramLabel>,
    /// Fingerprint of the vocabulary that produced `values`.
    #[serde(default)]
    pub vocabulary: u64,
}

impl FeatureVector {
    pub fn is_infected(&self) -> bool {
        self.label.as_ref().is_some_and(ProgramLabel::is_malware)
    }
}

/// TF x IDF over the vocabulary entries, in vocabulary order. An empty
/// document maps to the zero vector.
pub fn vectorize(doc: &NgramDoc, vocab: &Vocabulary) -> Result<Vec<f64>, FeatureError> {
    if doc.n() != vocab.n {
        return Err(FeatureError::SizeMismatch { doc: doc.n(), vocab: vocab.n });
    }
    if doc.is_empty() {
        return Ok(vec![0.0; vocab.len()]);
    }
    let total = doc.total() as f64;
    Ok(vocab.entries.iter().map(|e| doc.count(&e.ngram) as f64 / total * e.idf).collect())
}

pub fn vectorize_labeled(doc: &LabeledDoc, vocab: &Vocabulary) -> Result<FeatureVector, FeatureError> {
    vectorize_with_fingerprint(doc, vocab, vocab.fingerprint())
}

/// Vectorizes a batch of documents against one vocabulary.
pub fn vectorize_all(docs: &[LabeledDoc], vocab: &Vocabulary) -> Result<Vec<FeatureVector>, FeatureError> {
    let fingerprint = vocab.fingerprint();
    docs.iter().map(|d| vectorize_with_fingerprint(d, vocab, fingerprint)).collect()
}

fn vectorize_with_fingerprint(doc: &LabeledDoc, vocab: &Vocabulary, fingerprint: u64) -> Result<FeatureVector, FeatureError> {
    Ok(FeatureVector {
        owner_id: doc.owner_id.clone(),
        values: vectorize(&doc.doc, vocab)?,
        label: doc.label.clone(),
        vocabulary: fingerprint,
    })
}

/// Writes the feature matrix as CSV: `owner_id,label,<ngram>...` with
/// n-gram tokens joined by `|`.
pub fn write_feature_matrix<W: io::Write>(
    writer: W,
    vocab: &Vocabulary,
    vectors: &[FeatureVector],
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["owner_id".to_string(), "label".to_string()];
    header.extend(vocab.entries.iter().map(|e| e.ngram.to_string()));
    w.write_record(&header)?;
    for v in vectors {
        if v.values.len() != vocab.len() {
            return Err(FeatureError::Matrix(format!("row `{}` has {} values", v.owner_id, v.values.len())));
        }
        let mut row = vec![v.owner_id.clone(), v.label.as_ref().map(ToString::to_string).unwrap_or_default()];
        row.extend(v.values.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a matrix written by [`write_feature_matrix`]; returns the header
/// n-grams (as `|`-joined text) and the rows. The CSV does not carry a
/// vocabulary fingerprint, so rows come back with `vocabulary = 0`.
pub fn read_feature_matrix<R: io::Read>(reader: R) -> Result<(Vec<String>, Vec<FeatureVector>), FeatureError> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let owner_id = record.get(0).unwrap_or_default().to_string();
        let label = match record.get(1).unwrap_or_default() {
            "" => None,
            text => Some(text.parse::<ProgramLabel>().map_err(FeatureError::Matrix)?),
        };
        let values = record
            .iter()
            .skip(2)
            .map(|x| x.parse::<f64>().map_err(|e| FeatureError::Matrix(format!("`{x}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(FeatureVector { owner_id, values, label, vocabulary: 0 });
    }
    Ok((header, rows))
}
