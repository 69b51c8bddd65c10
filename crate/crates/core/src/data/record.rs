//! Line-oriented example records: `tag \t hex(x) \t hex(y)`, where each token
//! id is written as four hex digits (big-endian 16-bit).

use std::io::{BufRead, Write};

use super::synthetic::{TaskExample, TaskTag};
use super::DataError;

fn encode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().flat_map(|&id| (id as u16).to_be_bytes()).collect();
    hex::encode(bytes)
}

fn decode(s: &str, line: usize) -> Result<Vec<u32>, DataError> {
    let bytes = hex::decode(s).map_err(|e| DataError::Parse {
        line,
        msg: format!("bad hex: {e}"),
    })?;
    if bytes.len() % 2 != 0 {
        return Err(DataError::Parse {
            line,
            msg: "token field length is not a multiple of four hex digits".into(),
        });
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect())
}

pub fn format_record(ex: &TaskExample) -> String {
    format!("{}\t{}\t{}", ex.task, encode(&ex.x), encode(&ex.y))
}

pub fn write_records<W: Write>(mut w: W, examples: &[TaskExample]) -> std::io::Result<()> {
    for ex in examples {
        writeln!(w, "{}", format_record(ex))?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<TaskExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: "<records>".into(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [tag, x, y] = fields[..] else {
            return Err(DataError::Parse {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        };
        out.push(TaskExample {
            task: tag.parse::<TaskTag>().map_err(|e| DataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?,
            x: decode(x, i + 1)?,
            y: decode(y, i + 1)?,
        });
    }
    Ok(out)
}
