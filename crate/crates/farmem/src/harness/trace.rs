//! Trace files: one operation per line.
//!
//! ```text
//! phase <name>
//! set <object_id> <size>
//! get <object_id>
//! ```
//!
//! Object ids map to allocation order; a `set` of an id with a new size
//! reallocates the object.

use std::path::Path;

use crate::error::{FmError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Get { id: u64 },
    Set { id: u64, size: usize },
    Phase { name: String },
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let verb = parts.next().unwrap();
        let op = match verb {
            "get" => {
                let id = parse_field(parts.next(), line_no, "object id")?;
                TraceOp::Get { id }
            }
            "set" => {
                let id = parse_field(parts.next(), line_no, "object id")?;
                let size: u64 = parse_field(parts.next(), line_no, "size")?;
                if size == 0 {
                    return Err(FmError::Parse {
                        line: line_no,
                        msg: "set size must be positive".into(),
                    });
                }
                TraceOp::Set { id, size: size as usize }
            }
            "phase" => {
                let name = parts.next().ok_or(FmError::Parse {
                    line: line_no,
                    msg: "phase needs a name".into(),
                })?;
                TraceOp::Phase { name: name.to_string() }
            }
            other => {
                return Err(FmError::Parse {
                    line: line_no,
                    msg: format!("unknown op {other:?}"),
                })
            }
        };
        if parts.next().is_some() {
            return Err(FmError::Parse {
                line: line_no,
                msg: "trailing tokens".into(),
            });
        }
        ops.push(op);
    }
    Ok(ops)
}

fn parse_field(tok: Option<&str>, line: usize, what: &str) -> Result<u64> {
    let tok = tok.ok_or_else(|| FmError::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| FmError::Parse {
        line,
        msg: format!("bad {what} {tok:?}"),
    })
}

pub fn parse_trace_file(path: &Path) -> Result<Vec<TraceOp>> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_three_ops() {
        let ops = parse_trace("phase build\nset 0 64\nget 0\n").unwrap();
        assert_eq!(
            ops,
            vec![
                TraceOp::Phase { name: "build".into() },
                TraceOp::Set { id: 0, size: 64 },
                TraceOp::Get { id: 0 },
            ]
        );
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let ops = parse_trace("# header\n\nget 3\n").unwrap();
        assert_eq!(ops, vec![TraceOp::Get { id: 3 }]);
    }

    #[test]
    fn malformed_line_numbers_are_reported() {
        let err = parse_trace("get 1\nget 2\nget 3\nget 4\nget 5\nget 6\nbogus 7\n").unwrap_err();
        match err {
            FmError::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}
