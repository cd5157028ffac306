//! Run configuration: defaults, then a `key=value` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;

use super::Failure;
use opsig::classifiers::{ClassifierKind, Hyperparameters};
use opsig::features::{check_ngram_size, DocUnit, DEFAULT_CAPACITY, DEFAULT_NGRAM};
use opsig::harness::PipelineParams;
use opsig::matcher::{ScanOptions, DEFAULT_BUDGET, DEFAULT_THETA};
use opsig::signature::ExtractParams;

pub const DEFAULT_MODEL_DIR: &str = "model";
pub const DEFAULT_DB: &str = "signatures.json";
pub const DEFAULT_REPORT_DIR: &str = "reports";

const KEYS: &[&str] = &[
    "n", "capacity", "classifier", "tau", "theta", "seed", "db", "out", "jobs", "strict", "lenient", "doc-unit", "corpus",
    "model", "budget",
];

#[derive(Args, Debug, Default)]
pub struct Flags {
    /// Flat `key=value` file using the flag names; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// N-gram size, 1 to 9.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Vocabulary size.
    #[arg(long, global = true)]
    pub capacity: Option<usize>,
    /// random-forest, decision-tree, knn or linear-svm.
    #[arg(long, global = true)]
    pub classifier: Option<String>,
    /// Block score needed to enter a signature.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Hash agreement needed for a detection.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Signature database file.
    #[arg(long, global = true)]
    pub db: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Abort on the first unparseable input.
    #[arg(long, global = true, conflicts_with = "lenient")]
    pub strict: bool,
    /// Skip unparseable inputs with a message.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// program, method or block.
    #[arg(long, global = true)]
    pub doc_unit: Option<String>,
    /// Labeled corpus directory.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Directory holding `vocab.json` and `model.json`.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Matcher search budget per method and signature.
    #[arg(long, global = true)]
    pub budget: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n: usize,
    pub capacity: usize,
    pub classifier: ClassifierKind,
    pub hyperparameters: Hyperparameters,
    pub doc_unit: DocUnit,
    pub extract: ExtractParams,
    pub theta: f64,
    pub budget: u64,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub strict: bool,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Values given explicitly, which override harness spec files.
    pub seed_flag: Option<u64>,
    pub capacity_flag: Option<usize>,
    explicit: BTreeMap<&'static str, bool>,
}

fn parse_file(text: &str) -> Result<BTreeMap<String, String>, Failure> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Failure::Config(format!("config line {}: expected key=value", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(Failure::Config(format!("config line {}: unknown key `{key}`", i + 1)));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn from_file<T: FromStr>(file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|e| Failure::Config(format!("config key `{key}`: {e}"))))
        .transpose()
}

/// The flag if given, else the file value.
fn pick<T: FromStr + Clone>(flag: &Option<T>, file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v.clone())),
        None => from_file(file, key),
    }
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<RunConfig, Failure> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                parse_file(&text)?
            }
            None => BTreeMap::new(),
        };
        let n = pick(&flags.n, &file, "n")?;
        let capacity = pick(&flags.capacity, &file, "capacity")?;
        let classifier = pick(&flags.classifier, &file, "classifier")?;
        let tau = pick(&flags.tau, &file, "tau")?;
        let theta = pick(&flags.theta, &file, "theta")?;
        let seed = pick(&flags.seed, &file, "seed")?;
        let doc_unit = pick(&flags.doc_unit, &file, "doc-unit")?;
        let strict = if flags.strict {
            true
        } else if flags.lenient {
            false
        } else {
            match (from_file::<bool>(&file, "strict")?, from_file::<bool>(&file, "lenient")?) {
                (Some(true), Some(true)) => return Err(Failure::Config("both strict and lenient set".into())),
                (Some(s), _) => s,
                (None, Some(l)) => !l,
                (None, None) => true,
            }
        };

        let mut explicit = BTreeMap::new();
        for (key, set) in [
            ("n", n.is_some()),
            ("capacity", capacity.is_some()),
            ("classifier", classifier.is_some()),
            ("tau", tau.is_some()),
            ("theta", theta.is_some()),
            ("doc-unit", doc_unit.is_some()),
        ] {
            explicit.insert(key, set);
        }

        let n = n.unwrap_or(DEFAULT_NGRAM);
        check_ngram_size(n).map_err(|e| Failure::Config(e.to_string()))?;
        let capacity = capacity.unwrap_or(DEFAULT_CAPACITY);
        if capacity == 0 {
            return Err(Failure::Config("capacity must be at least 1".into()));
        }
        let classifier = match &classifier {
            Some(name) => name.parse::<ClassifierKind>().map_err(Failure::Config)?,
            None => ClassifierKind::RandomForest,
        };
        let doc_unit = match &doc_unit {
            Some(name) => name.parse::<DocUnit>().map_err(Failure::Config)?,
            None => DocUnit::Block,
        };
        let extract = ExtractParams { tau: tau.unwrap_or(ExtractParams::default().tau), ..ExtractParams::default() };
        extract.validate().map_err(|e| Failure::Config(e.to_string()))?;
        let theta = theta.unwrap_or(DEFAULT_THETA);
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Failure::Config(format!("theta {theta} outside (0, 1]")));
        }
        let budget = pick(&flags.budget, &file, "budget")?.unwrap_or(DEFAULT_BUDGET);
        if budget == 0 {
            return Err(Failure::Config("budget must be at least 1".into()));
        }
        let jobs = pick(&flags.jobs, &file, "jobs")?;
        if jobs == Some(0) {
            return Err(Failure::Config("jobs must be at least 1".into()));
        }
        let hyperparameters = Hyperparameters { seed: seed.unwrap_or(Hyperparameters::default().seed), ..Hyperparameters::default() };
        hyperparameters.validate().map_err(|e| Failure::Config(e.to_string()))?;

        Ok(RunConfig {
            n,
            capacity,
            classifier,
            doc_unit,
            extract,
            theta,
            budget,
            seed: hyperparameters.seed,
            hyperparameters,
            jobs,
            strict,
            corpus: pick(&flags.corpus, &file, "corpus")?,
            model: pick(&flags.model, &file, "model")?,
            db: pick(&flags.db, &file, "db")?,
            out: pick(&flags.out, &file, "out")?,
            seed_flag: seed,
            capacity_flag: flags.capacity.or(from_file(&file, "capacity")?),
            explicit,
        })
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions { theta: self.theta, budget: self.budget, strict_hashes: false }
    }

    /// Overrides the harness pipeline with every value set explicitly.
    pub fn apply_to_pipeline(&self, p: &mut PipelineParams) {
        let set = |k: &str| self.explicit.get(k).copied().unwrap_or(false);
        if set("n") {
            p.n = self.n;
        }
        if set("capacity") {
            p.capacity = self.capacity;
        }
        if set("classifier") {
            p.classifier = self.classifier;
        }
        if set("tau") {
            p.extract.tau = self.extract.tau;
        }
        if set("theta") {
            p.theta = self.theta;
        }
        if set("doc-unit") {
            p.doc_unit = self.doc_unit;
        }
        if self.seed_flag.is_some() {
            p.hyperparameters.seed = self.seed;
        }
        p.budget = self.budget;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# lab run\nn = 3\ntheta=0.7\ndoc_unit = program\n").unwrap();
        let flags = Flags { config: Some(path), n: Some(4), ..Flags::default() };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.theta, 0.7);
        assert_eq!(cfg.doc_unit, DocUnit::Program);
        assert!(cfg.strict);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for flags in [
            Flags { n: Some(10), ..Flags::default() },
            Flags { theta: Some(0.0), ..Flags::default() },
            Flags { tau: Some(1.5), ..Flags::default() },
            Flags { classifier: Some("xgboost".into()), ..Flags::default() },
        ] {
            assert!(matches!(RunConfig::resolve(&flags), Err(Failure::Config(_))), "{flags:?}");
        }
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(matches!(parse_file("colour = red"), Err(Failure::Config(_))));
        assert!(matches!(parse_file("n"), Err(Failure::Config(_))));
    }
}
