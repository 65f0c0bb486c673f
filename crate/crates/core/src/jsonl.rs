//! Line-delimited JSON reading and writing shared by every file format in the crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Parses one record per non-blank line. Errors carry the 1-based line number.
pub fn read_records<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_records(BufReader::new(file))?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn write_records<'a, T: Serialize + 'a>(
    mut writer: impl Write,
    records: impl IntoIterator<Item = &'a T>,
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_file<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}
