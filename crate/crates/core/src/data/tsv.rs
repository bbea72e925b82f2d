//! Dataset files: one TSV record per sample plus a JSON split manifest.

use super::{DataError, Sample};
use crate::fold::{from_dot_bracket, to_dot_bracket, RnaSequence};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

const HEADER: &str = "id\tsequence\tdot_bracket\tfamily_id\tsplit";

pub fn write_samples_tsv<W: Write>(writer: &mut W, samples: &[Sample]) -> Result<(), DataError> {
    writeln!(writer, "{HEADER}")?;
    for s in samples {
        let db = to_dot_bracket(&s.structure).map_err(|e| DataError::Config {
            message: format!("sample '{}': {e}", s.seq.id()),
        })?;
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}",
            s.seq.id(),
            s.seq.bases(),
            db,
            s.family_id,
            s.split
        )?;
    }
    Ok(())
}

pub fn read_samples_tsv<R: BufRead>(reader: R) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != HEADER {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("expected header '{HEADER}'"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let seq = RnaSequence::new(fields[0], fields[1]).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let structure = from_dot_bracket(fields[2]).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if structure.length() != seq.len() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!(
                    "structure length {} does not match sequence length {}",
                    structure.length(),
                    seq.len()
                ),
            });
        }
        samples.push(Sample {
            seq,
            structure,
            family_id: fields[3].to_string(),
            split: fields[4].to_string(),
        });
    }
    Ok(samples)
}

pub fn write_split_manifest<W: Write>(
    writer: &mut W,
    manifest: &BTreeMap<String, String>,
) -> Result<(), DataError> {
    serde_json::to_writer_pretty(&mut *writer, manifest).map_err(|e| DataError::Config {
        message: e.to_string(),
    })?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_split_manifest<R: std::io::Read>(
    reader: R,
) -> Result<BTreeMap<String, String>, DataError> {
    serde_json::from_reader(reader).map_err(|e| DataError::Parse {
        line: 0,
        message: e.to_string(),
    })
}
