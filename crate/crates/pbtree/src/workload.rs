//! Text workload files: one operation per line, `#` comments.
//!
//! ```text
//! I <key> <info>       insert
//! U <key> <info>       update
//! D <key>              delete
//! Q <lowkey> <highkey> <version>   range query
//! ```

use std::fmt::Write as _;

use crate::model::{Info, Key, VersionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadOp {
    Insert { key: Key, info: Info },
    Update { key: Key, info: Info },
    Delete { key: Key },
    Query { lowkey: Key, highkey: Key, version: VersionId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

pub fn parse(text: &str) -> Result<Vec<WorkloadOp>, ParseError> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let tag = fields.next().unwrap();
        let mut num = |name: &str| -> Result<u64, ParseError> {
            let field = fields.next().ok_or_else(|| ParseError {
                line,
                message: format!("missing {name}"),
            })?;
            field.parse::<u64>().map_err(|_| ParseError {
                line,
                message: format!("{name} is not an unsigned integer: {field:?}"),
            })
        };
        let op = match tag {
            "I" => WorkloadOp::Insert { key: Key(num("key")?), info: Info::from_u64(num("info")?) },
            "U" => WorkloadOp::Update { key: Key(num("key")?), info: Info::from_u64(num("info")?) },
            "D" => WorkloadOp::Delete { key: Key(num("key")?) },
            "Q" => {
                let lo = Key(num("lowkey")?);
                let hi = Key(num("highkey")?);
                let v = VersionId(num("version")?);
                if lo > hi {
                    return Err(ParseError { line, message: format!("lowkey {} > highkey {}", lo, hi) });
                }
                WorkloadOp::Query { lowkey: lo, highkey: hi, version: v }
            }
            other => {
                return Err(ParseError { line, message: format!("unknown op tag {other:?}") });
            }
        };
        if fields.next().is_some() {
            return Err(ParseError { line, message: "trailing fields".into() });
        }
        ops.push(op);
    }
    Ok(ops)
}

pub fn emit(ops: &[WorkloadOp]) -> String {
    let mut out = String::new();
    for op in ops {
        match op {
            WorkloadOp::Insert { key, info } => writeln!(out, "I {} {}", key, info).unwrap(),
            WorkloadOp::Update { key, info } => writeln!(out, "U {} {}", key, info).unwrap(),
            WorkloadOp::Delete { key } => writeln!(out, "D {}", key).unwrap(),
            WorkloadOp::Query { lowkey, highkey, version } => {
                writeln!(out, "Q {} {} {}", lowkey, highkey, version.0).unwrap()
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_op_forms() {
        let text = "# header comment\nI 5 77\nU 5 78\n\nD 5\nQ 0 9 2\n";
        let ops = parse(text).unwrap();
        assert_eq!(
            ops,
            vec![
                WorkloadOp::Insert { key: Key(5), info: Info::from_u64(77) },
                WorkloadOp::Update { key: Key(5), info: Info::from_u64(78) },
                WorkloadOp::Delete { key: Key(5) },
                WorkloadOp::Query { lowkey: Key(0), highkey: Key(9), version: VersionId(2) },
            ]
        );
    }

    #[test]
    fn error_names_offending_line() {
        let text = "I 1 1\nI 2 2\nX 3 3\n";
        let err = parse(text).unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn rejects_inverted_query_range() {
        let err = parse("Q 9 3 1\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn emit_parse_roundtrip() {
        let ops = vec![
            WorkloadOp::Insert { key: Key(1), info: Info::from_u64(10) },
            WorkloadOp::Query { lowkey: Key(0), highkey: Key(5), version: VersionId(1) },
            WorkloadOp::Delete { key: Key(1) },
        ];
        assert_eq!(parse(&emit(&ops)).unwrap(), ops);
    }
}
