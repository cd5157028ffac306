//! The `.oplist` text format.
//!
//! ```text
//! program <program_id> [label=clean|malware:<family>|unknown]
//! method <method_id>
//!   [<label>:]
//!   <mnemonic> [-> <label>[,<label>...]]
//! end
//! ```
//!
//! Line oriented, UTF-8, `#` starts a comment. A label line binds to the
//! next instruction of the same method. The `program` header is optional;
//! without it the program id is `unnamed` and the label `unknown`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use super::{
    is_identifier, Instruction, ListingError, MethodListing, Opcode, ParseError, ParseErrorKind, ProgramLabel,
    ProgramListing,
};

pub const DEFAULT_PROGRAM_ID: &str = "unnamed";

struct PendingInstruction {
    opcode: Opcode,
    targets: Vec<(String, usize)>,
    line: usize,
}

struct OpenMethod {
    id: String,
    line: usize,
    labels: HashMap<String, usize>,
    pending_labels: Vec<(String, usize, usize)>,
    instructions: Vec<PendingInstruction>,
}

/// Parses one program in `.oplist` form.
pub fn parse_oplist(text: &str) -> Result<ProgramListing, ParseError> {
    let mut program_id: Option<String> = None;
    let mut label = ProgramLabel::Unknown;
    let mut methods: Vec<MethodListing> = Vec::new();
    let mut method_ids: HashSet<String> = HashSet::new();
    let mut open: Option<OpenMethod> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = column_of(content, trimmed);
        let mut words = trimmed.split_whitespace();
        let head = words.next().unwrap_or_default();

        match open.as_mut() {
            None => match head {
                "program" => {
                    if program_id.is_some() || !methods.is_empty() {
                        return Err(syntax(line_no, col, "`program` header must appear once, before any method"));
                    }
                    let Some(id) = words.next() else {
                        return Err(syntax(line_no, col, "expected program id"));
                    };
                    if !is_identifier(id) {
                        return Err(syntax(line_no, col + 8, format!("invalid program id `{id}`")));
                    }
                    program_id = Some(id.to_string());
                    for attr in words {
                        let attr_col = column_of(content, attr);
                        let Some(value) = attr.strip_prefix("label=") else {
                            return Err(syntax(line_no, attr_col, format!("unexpected `{attr}`")));
                        };
                        label = value.parse().map_err(|e: String| syntax(line_no, attr_col, e))?;
                    }
                }
                "method" => {
                    let rest: Vec<&str> = words.collect();
                    let [id] = rest.as_slice() else {
                        return Err(syntax(line_no, col, "expected `method <method_id>`"));
                    };
                    if !is_identifier(id) {
                        return Err(syntax(line_no, col, format!("invalid method id `{id}`")));
                    }
                    if method_ids.contains(*id) {
                        return Err(ParseError::new(
                            line_no,
                            column_of(content, id),
                            ParseErrorKind::DuplicateMethod(id.to_string()),
                        ));
                    }
                    open = Some(OpenMethod {
                        id: id.to_string(),
                        line: line_no,
                        labels: HashMap::new(),
                        pending_labels: Vec::new(),
                        instructions: Vec::new(),
                    });
                }
                other => return Err(syntax(line_no, col, format!("unexpected `{other}` outside a method"))),
            },
            Some(m) => {
                if trimmed == "end" {
                    let m = open.take().expect("open method");
                    let pid = program_id.clone().unwrap_or_else(|| DEFAULT_PROGRAM_ID.to_string());
                    method_ids.insert(m.id.clone());
                    methods.push(close_method(pid, m, line_no, col)?);
                    continue;
                }
                if let Some(name) = trimmed.strip_suffix(':') {
                    if !is_label(name) {
                        return Err(syntax(line_no, col, format!("invalid label `{name}`")));
                    }
                    if m.labels.contains_key(name) || m.pending_labels.iter().any(|(n, _, _)| n == name) {
                        return Err(ParseError::new(line_no, col, ParseErrorKind::DuplicateLabel(name.to_string())));
                    }
                    m.pending_labels.push((name.to_string(), line_no, col));
                    continue;
                }
                let pending = parse_instruction(content, trimmed, line_no, col)?;
                let index = m.instructions.len();
                for (name, _, _) in m.pending_labels.drain(..) {
                    m.labels.insert(name, index);
                }
                m.instructions.push(pending);
            }
        }
    }

    if let Some(m) = open {
        return Err(syntax(m.line, 1, format!("method `{}` is missing `end`", m.id)));
    }
    Ok(ProgramListing {
        program_id: program_id.unwrap_or_else(|| DEFAULT_PROGRAM_ID.to_string()),
        label,
        methods,
    })
}

fn parse_instruction(content: &str, trimmed: &str, line: usize, col: usize) -> Result<PendingInstruction, ParseError> {
    let (mnemonic_part, targets_part) = match trimmed.split_once("->") {
        Some((m, t)) => (m.trim(), Some(t)),
        None => (trimmed, None),
    };
    if mnemonic_part.split_whitespace().count() != 1 {
        return Err(syntax(line, col, format!("expected a single mnemonic, found `{mnemonic_part}`")));
    }
    let opcode = Opcode::new(mnemonic_part)
        .map_err(|e| ParseError::new(line, col, ParseErrorKind::Invalid(ListingError::Mnemonic(e))))?;
    let mut targets = Vec::new();
    if let Some(t) = targets_part {
        let arrow_col = col + trimmed.find("->").unwrap_or(0);
        for name in t.split(',') {
            let name = name.trim();
            if !is_label(name) {
                return Err(syntax(line, arrow_col, format!("invalid branch target `{name}`")));
            }
            targets.push((name.to_string(), column_of(content, name)));
        }
    }
    Ok(PendingInstruction { opcode, targets, line })
}

fn close_method(program_id: String, m: OpenMethod, end_line: usize, end_col: usize) -> Result<MethodListing, ParseError> {
    if let Some((name, line, col)) = m.pending_labels.first() {
        return Err(syntax(*line, *col, format!("label `{name}` is not followed by an instruction")));
    }
    if m.instructions.is_empty() {
        return Err(ParseError::new(end_line, end_col, ParseErrorKind::EmptyMethod(m.id)));
    }
    let mut instructions = Vec::with_capacity(m.instructions.len());
    for (index, p) in m.instructions.into_iter().enumerate() {
        let mut branch_targets = Vec::with_capacity(p.targets.len());
        for (name, col) in &p.targets {
            match m.labels.get(name) {
                Some(&t) => branch_targets.push(t),
                None => return Err(ParseError::new(p.line, *col, ParseErrorKind::UnresolvedLabel(name.clone()))),
            }
        }
        instructions.push((p.line, Instruction { index, opcode: p.opcode, branch_targets }));
    }
    let lines: Vec<usize> = instructions.iter().map(|(l, _)| *l).collect();
    let method = MethodListing {
        program_id,
        method_id: m.id,
        instructions: instructions.into_iter().map(|(_, i)| i).collect(),
    };
    method.validate().map_err(|e| {
        let line = match &e {
            ListingError::TargetCount { index, .. } | ListingError::TargetOutOfRange { index, .. } => lines[*index],
            _ => end_line,
        };
        ParseError::new(line, 1, ParseErrorKind::Invalid(e))
    })?;
    Ok(method)
}

/// Renders a program in canonical `.oplist` form. Branch targets get
/// synthetic `L<index>` labels.
pub fn serialize_oplist(program: &ProgramListing) -> String {
    let mut out = String::new();
    match &program.label {
        ProgramLabel::Unknown => writeln!(out, "program {}", program.program_id),
        label => writeln!(out, "program {} label={label}", program.program_id),
    }
    .expect("write to string");
    for method in &program.methods {
        writeln!(out, "method {}", method.method_id).expect("write to string");
        let targets: BTreeSet<usize> =
            method.instructions.iter().flat_map(|i| i.branch_targets.iter().copied()).collect();
        for ins in &method.instructions {
            if targets.contains(&ins.index) {
                writeln!(out, "L{}:", ins.index).expect("write to string");
            }
            out.push_str("  ");
            out.push_str(ins.mnemonic());
            if !ins.branch_targets.is_empty() {
                let labels: Vec<String> = ins.branch_targets.iter().map(|t| format!("L{t}")).collect();
                out.push_str(" -> ");
                out.push_str(&labels.join(","));
            }
            out.push('\n');
        }
        out.push_str("end\n");
    }
    out
}

fn is_label(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '-'))
}

fn column_of(line: &str, fragment: &str) -> usize {
    // fragment is always a sub-slice of line
    let offset = fragment.as_ptr() as usize - line.as_ptr() as usize;
    line[..offset].chars().count() + 1
}

fn syntax(line: usize, column: usize, msg: impl Into<String>) -> ParseError {
    ParseError::new(line, column, ParseErrorKind::Syntax(msg.into()))
}
