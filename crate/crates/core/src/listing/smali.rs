//! Adapter for a subset of smali (Dalvik assembly).
//!
//! Supported: `.method` / `.end method`, `:label` lines, every opcode line
//! (operands are discarded), and `.packed-switch` / `.sparse-switch` payload
//! tables so switch targets can be resolved. Pure metadata directives
//! (`.registers`, `.locals`, `.line`, `.class`, ...) are ignored. Anything
//! else is an unsupported directive: fatal in strict mode, reported and
//! skipped in lenient mode.

use std::collections::{HashMap, HashSet};

use super::{
    Instruction, ListingError, MethodListing, OpKind, Opcode, ParseError, ParseErrorKind, ProgramLabel,
    ProgramListing,
};

pub const DEFAULT_SMALI_PROGRAM_ID: &str = "smali";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmaliMode {
    Strict,
    #[default]
    Lenient,
}

/// A non-fatal problem reported in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmaliParse {
    pub program: ProgramListing,
    pub diagnostics: Vec<Diagnostic>,
}

const IGNORED_DIRECTIVES: &[&str] =
    &[".registers", ".locals", ".line", ".prologue", ".epilogue", ".source", ".class", ".super", ".implements"];

/// Directives whose body runs until a matching `.end <name>` line.
const BLOCK_DIRECTIVES: &[&str] = &[".annotation", ".subannotation", ".array-data"];

enum Target {
    Label(String),
    Payload(String),
}

struct RawInstruction {
    opcode: Opcode,
    target: Option<Target>,
    line: usize,
}

#[derive(Default)]
struct MethodBody {
    id: String,
    line: usize,
    labels: HashMap<String, usize>,
    payloads: HashMap<String, Vec<String>>,
    pending: Vec<String>,
    instructions: Vec<RawInstruction>,
}

enum PayloadKind {
    Packed,
    Sparse,
}

pub fn parse_smali_subset(text: &str, mode: SmaliMode) -> Result<SmaliParse, ParseError> {
    let mut diagnostics = Vec::new();
    let mut methods = Vec::new();
    let mut method_ids = HashSet::new();
    let mut body: Option<MethodBody> = None;
    let mut payload: Option<(PayloadKind, Vec<String>, Vec<String>)> = None;
    let mut skipping: Option<(String, usize)> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = strip_comment(raw);
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = raw.len() - raw.trim_start().len() + 1;

        if let Some((end, _)) = &skipping {
            if trimmed == end {
                skipping = None;
            }
            continue;
        }

        if payload.is_some() {
            if trimmed == ".end packed-switch" || trimmed == ".end sparse-switch" {
                let m = body.as_mut().expect("payload inside method");
                let (_, owners, targets) = payload.take().expect("payload");
                for owner in owners {
                    m.payloads.insert(owner, targets.clone());
                }
                continue;
            }
            let (kind, _, targets) = payload.as_mut().expect("payload");
            let label = match kind {
                PayloadKind::Packed => trimmed,
                PayloadKind::Sparse => trimmed.split_once("->").map(|(_, l)| l.trim()).unwrap_or(""),
            };
            match label.strip_prefix(':') {
                Some(name) if !name.is_empty() => targets.push(name.to_string()),
                _ => return Err(syntax(line, col, format!("malformed switch payload entry `{trimmed}`"))),
            }
            continue;
        }

        let head = trimmed.split_whitespace().next().unwrap_or_default();
        if head == ".method" {
            if let Some(open) = &body {
                return Err(syntax(line, col, format!("`.method` inside method `{}`", open.id)));
            }
            let Some(id) = trimmed.split_whitespace().skip(1).last() else {
                return Err(syntax(line, col, "expected method name"));
            };
            body = Some(MethodBody { id: id.to_string(), line, ..MethodBody::default() });
            continue;
        }
        if trimmed == ".end method" {
            let Some(m) = body.take() else {
                return Err(syntax(line, col, "`.end method` without `.method`"));
            };
            if m.instructions.is_empty() {
                match mode {
                    SmaliMode::Strict => {
                        return Err(ParseError::new(line, col, ParseErrorKind::EmptyMethod(m.id)));
                    }
                    SmaliMode::Lenient => {
                        diagnostics.push(Diagnostic { line: m.line, message: format!("skipped empty method `{}`", m.id) });
                        continue;
                    }
                }
            }
            if !method_ids.insert(m.id.clone()) {
                return Err(ParseError::new(m.line, 1, ParseErrorKind::DuplicateMethod(m.id)));
            }
            methods.push(finish_method(m)?);
            continue;
        }
        if IGNORED_DIRECTIVES.contains(&head) {
            continue;
        }
        if head == ".packed-switch" || head == ".sparse-switch" {
            let Some(m) = body.as_mut() else {
                return Err(syntax(line, col, format!("`{head}` outside a method")));
            };
            let owners = std::mem::take(&mut m.pending);
            let kind = if head == ".packed-switch" { PayloadKind::Packed } else { PayloadKind::Sparse };
            payload = Some((kind, owners, Vec::new()));
            continue;
        }
        if head.starts_with('.') {
            match mode {
                SmaliMode::Strict => {
                    return Err(ParseError::new(line, col, ParseErrorKind::UnsupportedDirective(head.to_string())));
                }
                SmaliMode::Lenient => {
                    diagnostics.push(Diagnostic { line, message: format!("skipped unsupported directive `{head}`") });
                    if BLOCK_DIRECTIVES.contains(&head) {
                        skipping = Some((format!(".end {}", head.trim_start_matches('.')), line));
                    }
                    continue;
                }
            }
        }

        let Some(m) = body.as_mut() else {
            return Err(syntax(line, col, "instruction outside a method"));
        };
        if let Some(name) = trimmed.strip_prefix(':') {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(syntax(line, col, format!("invalid label `{trimmed}`")));
            }
            if m.labels.contains_key(name) || m.payloads.contains_key(name) || m.pending.iter().any(|p| p == name) {
                return Err(ParseError::new(line, col, ParseErrorKind::DuplicateLabel(name.to_string())));
            }
            m.pending.push(name.to_string());
            continue;
        }

        let ins = parse_instruction(trimmed, line, col)?;
        let index = m.instructions.len();
        for name in m.pending.drain(..) {
            m.labels.insert(name, index);
        }
        m.instructions.push(ins);
    }

    if let Some((end, start)) = skipping {
        return Err(syntax(start, 1, format!("missing `{end}`")));
    }
    if payload.is_some() {
        return Err(syntax(text.lines().count(), 1, "unterminated switch payload"));
    }
    if let Some(m) = body {
        return Err(syntax(m.line, 1, format!("method `{}` is missing `.end method`", m.id)));
    }

    let mut program = ProgramListing {
        program_id: DEFAULT_SMALI_PROGRAM_ID.to_string(),
        label: ProgramLabel::Unknown,
        methods,
    };
    program.set_program_id(DEFAULT_SMALI_PROGRAM_ID);
    Ok(SmaliParse { program, diagnostics })
}

fn parse_instruction(trimmed: &str, line: usize, col: usize) -> Result<RawInstruction, ParseError> {
    let (mnemonic, operands) = match trimmed.split_once(char::is_whitespace) {
        Some((m, rest)) => (m, rest.trim()),
        None => (trimmed, ""),
    };
    let opcode = Opcode::new(mnemonic)
        .map_err(|e| ParseError::new(line, col, ParseErrorKind::Invalid(ListingError::Mnemonic(e))))?;
    let last_label = operands
        .split(',')
        .map(str::trim)
        .filter_map(|o| o.strip_prefix(':'))
        .next_back()
        .map(str::to_string);
    let target = match opcode.kind() {
        OpKind::CondBranch | OpKind::UncondBranch => match last_label {
            Some(l) => Some(Target::Label(l)),
            None => return Err(syntax(line, col, format!("`{mnemonic}` needs a :label operand"))),
        },
        OpKind::Switch => match last_label {
            Some(l) => Some(Target::Payload(l)),
            None => return Err(syntax(line, col, format!("`{mnemonic}` needs a payload :label operand"))),
        },
        _ => None,
    };
    Ok(RawInstruction { opcode, target, line })
}

fn finish_method(m: MethodBody) -> Result<MethodListing, ParseError> {
    let mut instructions = Vec::with_capacity(m.instructions.len());
    for (index, raw) in m.instructions.into_iter().enumerate() {
        let resolve = |name: &String| {
            m.labels
                .get(name)
                .copied()
                .ok_or_else(|| ParseError::new(raw.line, 1, ParseErrorKind::UnresolvedLabel(name.clone())))
        };
        let branch_targets = match &raw.target {
            None => Vec::new(),
            Some(Target::Label(name)) => vec![resolve(name)?],
            Some(Target::Payload(name)) => {
                let labels = m
                    .payloads
                    .get(name)
                    .ok_or_else(|| ParseError::new(raw.line, 1, ParseErrorKind::UnresolvedLabel(name.clone())))?;
                let mut targets = labels.iter().map(&resolve).collect::<Result<Vec<_>, _>>()?;
                targets.dedup();
                if targets.is_empty() {
                    return Err(syntax(raw.line, 1, format!("switch payload `{name}` has no targets")));
                }
                targets
            }
        };
        instructions.push(Instruction { index, opcode: raw.opcode, branch_targets });
    }
    let method = MethodListing { program_id: String::new(), method_id: m.id, instructions };
    method.validate().map_err(|e| ParseError::new(m.line, 1, ParseErrorKind::Invalid(e)))?;
    Ok(method)
}

/// Drops a trailing `#` comment, ignoring `#` inside string literals.
fn strip_comment(line: &str) -> &str {
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_string => escaped = true,
            '"' => in_string = !in_string,
            '#' if !in_string => return &line[..i],
            _ => {}
        }
    }
    line
}

fn syntax(line: usize, column: usize, msg: impl Into<String>) -> ParseError {
    ParseError::new(line, column, ParseErrorKind::Syntax(msg.into()))
}
