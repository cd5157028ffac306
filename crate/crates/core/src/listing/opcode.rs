use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Control-flow role of a mnemonic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Plain,
    CondBranch,
    UncondBranch,
    Switch,
    Return,
    Throw,
    /// Calls are intra-method plain instructions as far as block
    /// partitioning is concerned.
    Invoke,
}

impl OpKind {
    /// Kinds that carry explicit branch targets.
    pub fn is_branch(self) -> bool {
        matches!(self, OpKind::CondBranch | OpKind::UncondBranch | OpKind::Switch)
    }

    /// Kinds after which a new basic block starts.
    pub fn ends_block(self) -> bool {
        matches!(
            self,
            OpKind::CondBranch | OpKind::UncondBranch | OpKind::Switch | OpKind::Return | OpKind::Throw
        )
    }

    /// Whether execution may continue with the next instruction.
    pub fn falls_through(self) -> bool {
        !matches!(self, OpKind::UncondBranch | OpKind::Return | OpKind::Throw)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Plain => "plain",
            OpKind::CondBranch => "cond-branch",
            OpKind::UncondBranch => "uncond-branch",
            OpKind::Switch => "switch",
            OpKind::Return => "return",
            OpKind::Throw => "throw",
            OpKind::Invoke => "invoke",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "plain" => OpKind::Plain,
            "cond-branch" => OpKind::CondBranch,
            "uncond-branch" => OpKind::UncondBranch,
            "switch" => OpKind::Switch,
            "return" => OpKind::Return,
            "throw" => OpKind::Throw,
            "invoke" => OpKind::Invoke,
            other => return Err(format!("unknown opcode kind `{other}`")),
        })
    }
}

/// A normalized mnemonic together with its classified kind.
///
/// The kind is never stored independently of the mnemonic: it is always
/// looked up in the shipped classification table, so two opcodes with the
/// same mnemonic are always equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Opcode {
    mnemonic: String,
    kind: OpKind,
}

impl Opcode {
    /// Normalizes (lowercases) and validates a mnemonic token.
    pub fn new(token: &str) -> Result<Self, InvalidMnemonic> {
        let mnemonic = token.to_ascii_lowercase();
        if !is_valid_mnemonic(&mnemonic) {
            return Err(InvalidMnemonic(token.to_string()));
        }
        let kind = classify(&mnemonic);
        Ok(Opcode { mnemonic, kind })
    }

    pub fn mnemonic(&self) -> &str {
        &self.mnemonic
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid mnemonic `{0}` (expected [a-z0-9/_-]+)")]
pub struct InvalidMnemonic(pub String);

pub fn is_valid_mnemonic(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'/' | b'_' | b'-'))
}

const TABLE_SOURCE: &str = include_str!("../../data/opcode_kinds.txt");

enum Pattern {
    Exact(String),
    Prefix(String),
    Suffix(String),
}

struct Table {
    exact: Vec<(String, OpKind)>,
    // sorted by pattern length, longest first
    wildcard: Vec<(Pattern, OpKind)>,
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut exact = Vec::new();
        let mut wildcard = Vec::new();
        for (lineno, line) in TABLE_SOURCE.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(pat), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                panic!("opcode table line {}: expected `<pattern> <kind>`", lineno + 1);
            };
            let kind: OpKind = kind
                .parse()
                .unwrap_or_else(|e| panic!("opcode table line {}: {e}", lineno + 1));
            let pattern = if let Some(p) = pat.strip_suffix('*') {
                Pattern::Prefix(p.to_string())
            } else if let Some(s) = pat.strip_prefix('*') {
                Pattern::Suffix(s.to_string())
            } else {
                Pattern::Exact(pat.to_string())
            };
            match pattern {
                Pattern::Exact(p) => exact.push((p, kind)),
                other => wildcard.push((other, kind)),
            }
        }
        exact.sort_by(|a, b| a.0.cmp(&b.0));
        wildcard.sort_by_key(|(p, _)| {
            let len = match p {
                Pattern::Prefix(s) | Pattern::Suffix(s) | Pattern::Exact(s) => s.len(),
            };
            std::cmp::Reverse(len)
        });
        Table { exact, wildcard }
    })
}

/// Classifies a normalized mnemonic using the shipped table.
pub fn classify(mnemonic: &str) -> OpKind {
    let table = table();
    if let Ok(i) = table.exact.binary_search_by(|(p, _)| p.as_str().cmp(mnemonic)) {
        return table.exact[i].1;
    }
    for (pattern, kind) in &table.wildcard {
        let hit = match pattern {
            Pattern::Prefix(p) => mnemonic.starts_with(p.as_str()),
            Pattern::Suffix(s) => mnemonic.ends_with(s.as_str()),
            Pattern::Exact(e) => mnemonic == e,
        };
        if hit {
            return *kind;
        }
    }
    OpKind::Plain
}
