//! `opsig`: batch front end for training, signature building, scanning and
//! the experiment harness.
//!
//! Exit codes: 0 success (scan: nothing detected), 2 configuration error,
//! 3 data error, 4 empty signature database, 10 scan detected something,
//! 1 anything else.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use config::{Flags, RunConfig};
use opsig::cfg::build_program_cfgs;
use opsig::classifiers::{holdout_split, train, Confusion, EvalReport, Model, DEFAULT_HOLDOUT};
use opsig::features::{build_vocabulary, program_documents, vectorize_all, Vocabulary};
use opsig::harness::{
    lab_corpus, realstyle_corpus, run_benchmark, run_laboratory, run_realstyle, write_corpus, BenchmarkSpec, LabSpec,
    RealStyleSpec,
};
use opsig::listing::{parse_oplist, parse_smali_subset, serialize_oplist, ProgramLabel, ProgramListing, SmaliMode};
use opsig::matcher::{render_table, scan, DetectionReport, MatchError};
use opsig::signature::{build_database, creation_time, SignatureDatabase, SignatureError};

#[derive(Parser)]
#[command(name = "opsig", version, about = "Opcode n-gram signatures and CFG matching for static malware detection")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse listings and print a summary per program.
    Parse {
        inputs: Vec<PathBuf>,
    },
    /// Learn a vocabulary and a classifier from a labeled corpus.
    Train,
    /// Extract signatures from the malware of a corpus.
    BuildDb,
    /// Scan programs against a signature database.
    Scan {
        inputs: Vec<PathBuf>,
    },
    /// Run the experiment harness and write its tables.
    Eval(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// JSON harness spec with optional `lab`, `realstyle` and `benchmark` sections.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Experiment::All)]
    experiment: Experiment,
    /// Also write the generated corpora here.
    #[arg(long)]
    dump_corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Lab,
    Realstyle,
    Benchmark,
    All,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    EmptyDb(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::EmptyDb(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::EmptyDb(m) | Failure::Other(m) => m,
        }
    }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = RunConfig::resolve(&cli.flags).and_then(|cfg| {
        if let Some(jobs) = cfg.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .map_err(|e| Failure::Other(format!("thread pool: {e}")))?;
        }
        match &cli.command {
            Command::Parse { inputs } => cmd_parse(&cfg, inputs),
            Command::Train => cmd_train(&cfg),
            Command::BuildDb => cmd_build_db(&cfg),
            Command::Scan { inputs } => cmd_scan(&cfg, inputs),
            Command::Eval(args) => cmd_eval(&cfg, args),
        }
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("opsig: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn listing_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), Failure> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() || matches!(p.extension().and_then(|e| e.to_str()), Some("oplist" | "smali")) {
                listing_files(&p, out)?;
            }
        }
        Ok(())
    } else if path.is_file() {
        out.push(path.to_path_buf());
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file or directory", path.display())))
    }
}

fn read_listing(path: &Path, strict: bool) -> Result<ProgramListing, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unnamed");
    if path.extension().and_then(|e| e.to_str()) == Some("smali") {
        let mode = if strict { SmaliMode::Strict } else { SmaliMode::Lenient };
        let parsed = parse_smali_subset(&text, mode).map_err(|e| format!("{}: {e}", path.display()))?;
        for d in &parsed.diagnostics {
            log::warn!("{}:{}: {}", path.display(), d.line, d.message);
        }
        let mut program = parsed.program;
        program.set_program_id(stem);
        Ok(program)
    } else {
        let mut program = parse_oplist(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if program.program_id == opsig::listing::DEFAULT_PROGRAM_ID {
            program.set_program_id(stem);
        }
        Ok(program)
    }
}

/// Reads every listing under `inputs`. Unparseable files abort in strict
/// mode and are skipped with a message otherwise.
fn load_programs(inputs: &[PathBuf], strict: bool) -> Result<Vec<ProgramListing>, Failure> {
    let mut files = Vec::new();
    for p in inputs {
        listing_files(p, &mut files)?;
    }
    let parsed: Vec<Result<ProgramListing, String>> = files.par_iter().map(|f| read_listing(f, strict)).collect();
    let mut programs = Vec::with_capacity(parsed.len());
    for r in parsed {
        match r {
            Ok(p) => programs.push(p),
            Err(e) if strict => return Err(Failure::Data(e)),
            Err(e) => eprintln!("skipping {e}"),
        }
    }
    Ok(programs)
}

fn corpus(cfg: &RunConfig) -> Result<Vec<ProgramListing>, Failure> {
    let dir = cfg.corpus.as_ref().ok_or_else(|| Failure::Config("no corpus given (--corpus)".into()))?;
    if !dir.exists() {
        return Err(Failure::Data(format!("corpus {}: no such file or directory", dir.display())));
    }
    let programs = load_programs(std::slice::from_ref(dir), cfg.strict)?;
    if programs.is_empty() {
        return Err(Failure::Data(format!("corpus {} holds no listings", dir.display())));
    }
    Ok(programs)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_parse(cfg: &RunConfig, inputs: &[PathBuf]) -> Outcome {
    if inputs.is_empty() {
        return Err(Failure::Config("no inputs given".into()));
    }
    let programs = load_programs(inputs, cfg.strict)?;
    for p in &programs {
        let cfgs = build_program_cfgs(p);
        let blocks: usize = cfgs.iter().map(|g| g.node_count()).sum();
        let edges: usize = cfgs.iter().map(|g| g.edge_count()).sum();
        println!(
            "{}\t{}\t{} methods\t{} instructions\t{blocks} blocks\t{edges} edges",
            p.program_id,
            p.label,
            p.methods.len(),
            p.instruction_count()
        );
        if let Some(dir) = &cfg.out {
            write(&dir.join(format!("{}.oplist", p.program_id)), &serialize_oplist(p))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let programs = corpus(cfg)?;
    if let Some(p) = programs.iter().find(|p| p.label == ProgramLabel::Unknown) {
        return Err(Failure::Data(format!("`{}` has no label", p.program_id)));
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(config::DEFAULT_MODEL_DIR));
    let mut docs = Vec::new();
    for p in &programs {
        docs.extend(program_documents(p, cfg.doc_unit, cfg.n).map_err(|e| Failure::Data(e.to_string()))?);
    }
    let vocab = build_vocabulary(&docs, cfg.n, cfg.capacity, cfg.doc_unit).map_err(|e| Failure::Data(e.to_string()))?;
    let vectors = vectorize_all(&docs, &vocab).map_err(|e| Failure::Data(e.to_string()))?;

    let (train_idx, test_idx) =
        holdout_split(&vectors, DEFAULT_HOLDOUT, cfg.seed).map_err(|e| Failure::Data(e.to_string()))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| vectors[i].clone()).collect::<Vec<_>>();
    let held = train(cfg.classifier, &pick(&train_idx), &cfg.hyperparameters).map_err(|e| Failure::Data(e.to_string()))?;
    let confusion = Confusion::from_pairs(test_idx.iter().map(|&i| {
        let v = &vectors[i];
        (v.is_infected(), held.score_row(&v.values) > 0.5)
    }));
    let report = EvalReport::from_confusion(confusion);

    let model = train(cfg.classifier, &vectors, &cfg.hyperparameters).map_err(|e| Failure::Data(e.to_string()))?;
    write(&out.join("vocab.json"), &(vocab.to_json() + "\n"))?;
    write(&out.join("model.json"), &(model.to_json() + "\n"))?;
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    println!(
        "{} on {} {} documents: holdout precision {:.3}, recall {:.3}, F1 {:.3} ({} held out)",
        cfg.classifier.display_name(),
        vectors.len(),
        cfg.doc_unit,
        report.precision,
        report.recall,
        report.f1,
        test_idx.len()
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(cfg: &RunConfig) -> Result<(Vocabulary, Model), Failure> {
    let dir = cfg.model.clone().unwrap_or_else(|| PathBuf::from(config::DEFAULT_MODEL_DIR));
    let vocab = Vocabulary::from_json(&read(&dir.join("vocab.json"))?)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.join("vocab.json").display())))?;
    let model = Model::from_json(&read(&dir.join("model.json"))?)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.join("model.json").display())))?;
    Ok((vocab, model))
}

fn cmd_build_db(cfg: &RunConfig) -> Outcome {
    let db_path = cfg.db.clone().unwrap_or_else(|| PathBuf::from(config::DEFAULT_DB));
    let (vocab, model) = load_model(cfg)?;
    let malware: Vec<ProgramListing> = corpus(cfg)?.into_iter().filter(|p| p.label.is_malware()).collect();
    if malware.is_empty() {
        return Err(Failure::EmptyDb("the corpus holds no malware".into()));
    }
    let db = match build_database(&malware, &model, &vocab, &cfg.extract, creation_time()) {
        Ok(db) => db,
        Err(e @ SignatureError::EmptyDatabase { .. }) => return Err(Failure::EmptyDb(e.to_string())),
        Err(e) => return Err(Failure::Data(e.to_string())),
    };
    db.save(&db_path).map_err(|e| Failure::Other(e.to_string()))?;
    for (family, count) in db.family_counts() {
        println!("{family}\t{count}");
    }
    println!(
        "{} signatures from {} programs, {} duplicates merged; wrote {}",
        db.signatures.len(),
        db.provenance.source_programs,
        db.provenance.duplicates,
        db_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_scan(cfg: &RunConfig, inputs: &[PathBuf]) -> Outcome {
    let mut inputs = inputs.to_vec();
    inputs.extend(cfg.corpus.clone());
    if inputs.is_empty() {
        return Err(Failure::Config("no inputs given".into()));
    }
    let db_path = cfg.db.clone().unwrap_or_else(|| PathBuf::from(config::DEFAULT_DB));
    let db = SignatureDatabase::load(&db_path).map_err(|e| Failure::Data(format!("{}: {e}", db_path.display())))?;
    let programs = load_programs(&inputs, cfg.strict)?;
    let opts = cfg.scan_options();
    let reports: Vec<DetectionReport> = programs
        .par_iter()
        .map(|p| scan(p, &db, &opts))
        .collect::<Result<_, _>>()
        .map_err(|e| match e {
            MatchError::EmptyDatabase => Failure::EmptyDb(format!("{}: {e}", db_path.display())),
            e => Failure::Config(e.to_string()),
        })?;
    print!("{}", render_table(&reports));
    let count = |kind: &str| reports.iter().filter(|r| r.verdict.kind() == kind).count();
    println!(
        "{} scanned: {} clean, {} known_malware, {} variant",
        reports.len(),
        count("clean"),
        count("known_malware"),
        count("variant")
    );
    if let Some(out) = &cfg.out {
        write(out, &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"))?;
    }
    Ok(if reports.iter().any(|r| r.verdict.is_detection()) { ExitCode::from(10) } else { ExitCode::SUCCESS })
}

#[derive(Default, serde::Deserialize)]
#[serde(default)]
struct HarnessSpec {
    lab: LabSpec,
    realstyle: RealStyleSpec,
    benchmark: BenchmarkSpec,
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Outcome {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_str::<HarnessSpec>(&read(path)?)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => HarnessSpec::default(),
    };
    cfg.apply_to_pipeline(&mut spec.lab.pipeline);
    cfg.apply_to_pipeline(&mut spec.realstyle.pipeline);
    if let Some(seed) = cfg.seed_flag {
        spec.lab.seed = seed;
        spec.realstyle.seed = seed;
        spec.benchmark.corpus.seed = seed;
        spec.benchmark.hyperparameters.seed = seed;
    }
    if let Some(capacity) = cfg.capacity_flag {
        spec.benchmark.capacity = capacity;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(config::DEFAULT_REPORT_DIR));
    let run = |e: Experiment| args.experiment == e || args.experiment == Experiment::All;
    let harness = |e: opsig::harness::HarnessError| Failure::Data(e.to_string());

    if let Some(dir) = &args.dump_corpus {
        if run(Experiment::Lab) {
            let (programs, manifest) = lab_corpus(&spec.lab).map_err(harness)?;
            write_corpus(&dir.join("lab"), &programs, &manifest).map_err(|e| Failure::Other(e.to_string()))?;
        }
        if run(Experiment::Realstyle) || run(Experiment::Benchmark) {
            let (programs, manifest) = realstyle_corpus(&spec.realstyle).map_err(harness)?;
            write_corpus(&dir.join("realstyle"), &programs, &manifest).map_err(|e| Failure::Other(e.to_string()))?;
        }
    }
    if run(Experiment::Benchmark) {
        let grid = run_benchmark(&spec.benchmark).map_err(harness)?;
        let csv = grid.to_csv();
        write(&out.join("table1.csv"), &csv)?;
        println!("classifier F1 by n-gram size (capacity {}):\n{csv}", grid.capacity);
    }
    if run(Experiment::Lab) {
        let report = run_laboratory(&spec.lab).map_err(harness)?;
        let csv = report.to_csv();
        write(&out.join("table2.csv"), &csv)?;
        write(&out.join("lab.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
        println!("laboratory, one dictionary per variant (theta {}):\n{csv}", report.theta);
    }
    if run(Experiment::Realstyle) {
        let report = run_realstyle(&spec.realstyle).map_err(harness)?;
        let csv = report.to_csv();
        write(&out.join("table3.csv"), &csv)?;
        write(&out.join("attribution.csv"), &report.attribution_csv())?;
        println!("real-style corpus (theta {}):\n{csv}", report.theta);
        for row in &report.rows {
            println!("{}: {} signatures, {} misattributed", row.dictionary.label(), row.signatures, row.off_diagonal);
        }
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
