//! Opcode listings: the unit of ingestion.
//!
//! Programs arrive either as `.oplist` text (the canonical format, see
//! [`parse_oplist`]) or as a subset of smali ([`parse_smali_subset`]).
//! Operands are dropped at ingestion; only mnemonics and resolved branch
//! targets survive.

mod opcode;
mod oplist;
mod smali;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use opcode::{classify, is_valid_mnemonic, InvalidMnemonic, OpKind, Opcode};
pub use oplist::{parse_oplist, serialize_oplist, DEFAULT_PROGRAM_ID};
pub use smali::{parse_smali_subset, Diagnostic, SmaliMode, SmaliParse};

/// One instruction of a method listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub index: usize,
    pub opcode: Opcode,
    /// Explicit branch targets. Fall-through of conditional branches and
    /// switches is implicit.
    pub branch_targets: Vec<usize>,
}

impl Instruction {
    pub fn kind(&self) -> OpKind {
        self.opcode.kind()
    }

    pub fn mnemonic(&self) -> &str {
        self.opcode.mnemonic()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodListing {
    pub program_id: String,
    pub method_id: String,
    pub instructions: Vec<Instruction>,
}

impl MethodListing {
    /// Builds a method from `(mnemonic, targets)` pairs, validating every
    /// listing invariant.
    pub fn from_parts<S: AsRef<str>>(
        program_id: impl Into<String>,
        method_id: impl Into<String>,
        parts: impl IntoIterator<Item = (S, Vec<usize>)>,
    ) -> Result<Self, ListingError> {
        let mut instructions = Vec::new();
        for (index, (mnemonic, branch_targets)) in parts.into_iter().enumerate() {
            let opcode = Opcode::new(mnemonic.as_ref())?;
            instructions.push(Instruction { index, opcode, branch_targets });
        }
        let method = MethodListing {
            program_id: program_id.into(),
            method_id: method_id.into(),
            instructions,
        };
        method.validate()?;
        Ok(method)
    }

    /// Straight-line convenience constructor (no branch targets).
    pub fn straight<S: AsRef<str>>(
        program_id: impl Into<String>,
        method_id: impl Into<String>,
        mnemonics: impl IntoIterator<Item = S>,
    ) -> Result<Self, ListingError> {
        Self::from_parts(program_id, method_id, mnemonics.into_iter().map(|m| (m, Vec::new())))
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn mnemonics(&self) -> Vec<&str> {
        self.instructions.iter().map(Instruction::mnemonic).collect()
    }

    pub fn validate(&self) -> Result<(), ListingError> {
        if self.instructions.is_empty() {
            return Err(ListingError::EmptyMethod(self.method_id.clone()));
        }
        let len = self.instructions.len();
        for (i, ins) in self.instructions.iter().enumerate() {
            if ins.index != i {
                return Err(ListingError::NonContiguous { method: self.method_id.clone(), index: i });
            }
            let kind = ins.kind();
            let count = ins.branch_targets.len();
            let ok = match kind {
                OpKind::CondBranch | OpKind::UncondBranch => count == 1,
                OpKind::Switch => count >= 1,
                _ => count == 0,
            };
            if !ok {
                return Err(ListingError::TargetCount {
                    method: self.method_id.clone(),
                    index: i,
                    mnemonic: ins.mnemonic().to_string(),
                    count,
                });
            }
            if let Some(&t) = ins.branch_targets.iter().find(|&&t| t >= len) {
                return Err(ListingError::TargetOutOfRange { method: self.method_id.clone(), index: i, target: t });
            }
        }
        Ok(())
    }
}

/// Ground-truth label of a program.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "class", content = "family", rename_all = "lowercase")]
pub enum ProgramLabel {
    Clean,
    Malware(String),
    Unknown,
}

impl ProgramLabel {
    pub fn is_malware(&self) -> bool {
        matches!(self, ProgramLabel::Malware(_))
    }

    pub fn family(&self) -> Option<&str> {
        match self {
            ProgramLabel::Malware(f) => Some(f),
            _ => None,
        }
    }
}

impl fmt::Display for ProgramLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProgramLabel::Clean => f.write_str("clean"),
            ProgramLabel::Malware(family) => write!(f, "malware:{family}"),
            ProgramLabel::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for ProgramLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(ProgramLabel::Clean),
            "unknown" => Ok(ProgramLabel::Unknown),
            _ => match s.strip_prefix("malware:") {
                Some(family) if is_identifier(family) => Ok(ProgramLabel::Malware(family.to_string())),
                _ => Err(format!("invalid label `{s}` (expected clean, unknown or malware:<family>)")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramListing {
    pub program_id: String,
    pub label: ProgramLabel,
    pub methods: Vec<MethodListing>,
}

impl ProgramListing {
    pub fn validate(&self) -> Result<(), ListingError> {
        let mut seen = HashSet::new();
        for m in &self.methods {
            if !seen.insert(m.method_id.as_str()) {
                return Err(ListingError::DuplicateMethod(m.method_id.clone()));
            }
            m.validate()?;
        }
        Ok(())
    }

    pub fn instruction_count(&self) -> usize {
        self.methods.iter().map(MethodListing::len).sum()
    }

    /// Renames the program, keeping each method's back-reference in sync.
    pub fn set_program_id(&mut self, id: impl Into<String>) {
        self.program_id = id.into();
        for m in &mut self.methods {
            m.program_id = self.program_id.clone();
        }
    }
}

/// Per-method mnemonic sequences, in program order.
pub fn opcode_stream(program: &ProgramListing) -> Vec<Vec<&str>> {
    program.methods.iter().map(MethodListing::mnemonics).collect()
}

/// Identifiers for programs, methods and families: no whitespace, no '#'.
pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '#' || c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ListingError {
    #[error(transparent)]
    Mnemonic(#[from] InvalidMnemonic),
    #[error("method `{0}` has no instructions")]
    EmptyMethod(String),
    #[error("duplicate method id `{0}`")]
    DuplicateMethod(String),
    #[error("method `{method}`: instruction indices not contiguous at {index}")]
    NonContiguous { method: String, index: usize },
    #[error("method `{method}`: `{mnemonic}` at {index} has {count} branch target(s)")]
    TargetCount { method: String, index: usize, mnemonic: String, count: usize },
    #[error("method `{method}`: branch target {target} at {index} is out of range")]
    TargetOutOfRange { method: String, index: usize, target: usize },
}

/// What went wrong while parsing a listing.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate method id `{0}`")]
    DuplicateMethod(String),
    #[error("method `{0}` is empty")]
    EmptyMethod(String),
    #[error("unsupported directive `{0}`")]
    UnsupportedDirective(String),
    #[error(transparent)]
    Invalid(#[from] ListingError),
}

/// A parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    pub(crate) fn new(line: usize, column: usize, kind: ParseErrorKind) -> Self {
        ParseError { line, column, kind }
    }
}
