//! FASTA and dot-bracket file I/O.

use super::{FoldError, RnaSequence, SecondaryStructure};
use std::io::{BufRead, Write};

/// Reads FASTA records; multi-line sequences are concatenated. Parse
/// failures report the 1-based line number.
pub fn read_fasta<R: BufRead>(reader: R) -> Result<Vec<RnaSequence>, FoldError> {
    let mut records = Vec::new();
    let mut current: Option<(String, String, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| FoldError::Fasta {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('>') {
            if let Some((id, bases, start)) = current.take() {
                records.push(build_record(&id, &bases, start)?);
            }
            let id = rest.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(FoldError::Fasta {
                    line: line_no,
                    message: "header without an identifier".into(),
                });
            }
            current = Some((id, String::new(), line_no));
        } else {
            match current.as_mut() {
                Some((_, bases, _)) => bases.push_str(line.trim()),
                None => {
                    return Err(FoldError::Fasta {
                        line: line_no,
                        message: "sequence data before any '>' header".into(),
                    })
                }
            }
        }
    }
    if let Some((id, bases, start)) = current {
        records.push(build_record(&id, &bases, start)?);
    }
    Ok(records)
}

fn build_record(id: &str, bases: &str, header_line: usize) -> Result<RnaSequence, FoldError> {
    RnaSequence::new(id, bases).map_err(|e| FoldError::Fasta {
        line: header_line,
        message: e.to_string(),
    })
}

pub fn write_fasta<W: Write>(writer: &mut W, records: &[RnaSequence]) -> std::io::Result<()> {
    for r in records {
        writeln!(writer, ">{}", r.id())?;
        writeln!(writer, "{}", r.bases())?;
    }
    Ok(())
}

/// One record of the dot-bracket text format: id line, sequence line,
/// structure line.
#[derive(Debug, Clone, PartialEq)]
pub struct DbRecord {
    pub seq: RnaSequence,
    pub structure: SecondaryStructure,
}

pub fn write_dot_bracket_file<W: Write>(
    writer: &mut W,
    records: &[DbRecord],
) -> Result<(), FoldError> {
    for r in records {
        let db = super::to_dot_bracket(&r.structure)?;
        writeln!(writer, ">{}", r.seq.id()).map_err(io_err)?;
        writeln!(writer, "{}", r.seq.bases()).map_err(io_err)?;
        writeln!(writer, "{db}").map_err(io_err)?;
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> FoldError {
    FoldError::Fasta {
        line: 0,
        message: e.to_string(),
    }
}

pub fn read_dot_bracket_file<R: BufRead>(reader: R) -> Result<Vec<DbRecord>, FoldError> {
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.map(|s| (i + 1, s.trim_end().to_string())).map_err(|e| FoldError::Fasta {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut nonempty = lines.into_iter().filter(|(_, l)| !l.is_empty());
    let mut records = Vec::new();
    while let Some((line_no, header)) = nonempty.next() {
        let id = header
            .strip_prefix('>')
            .ok_or_else(|| FoldError::Fasta {
                line: line_no,
                message: "expected '>' header".into(),
            })?
            .split_whitespace()
            .next()
            .unwrap_or("")
            .to_string();
        let (seq_line_no, bases) = nonempty.next().ok_or_else(|| FoldError::Fasta {
            line: line_no,
            message: "record truncated: missing sequence line".into(),
        })?;
        let (db_line_no, db) = nonempty.next().ok_or_else(|| FoldError::Fasta {
            line: seq_line_no,
            message: "record truncated: missing structure line".into(),
        })?;
        let seq = RnaSequence::new(id, &bases).map_err(|e| FoldError::Fasta {
            line: seq_line_no,
            message: e.to_string(),
        })?;
        let structure = super::from_dot_bracket(&db).map_err(|e| FoldError::Fasta {
            line: db_line_no,
            message: e.to_string(),
        })?;
        if structure.length() != seq.len() {
            return Err(FoldError::Fasta {
                line: db_line_no,
                message: format!(
                    "structure length {} does not match sequence length {}",
                    structure.length(),
                    seq.len()
                ),
            });
        }
        records.push(DbRecord { seq, structure });
    }
    Ok(records)
}
