//! JSON-lines helpers for plans, logs and caches.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_line<T: Serialize>(record: &T) -> Result<String> {
    let mut s = serde_json::to_string(record).map_err(|e| Error::json("serialize record", e))?;
    s.push('\n');
    Ok(s)
}

/// Write records to a fresh file, one per line.
pub fn write_records<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        w.write_all(to_line(r)?.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read every record; a malformed line is an error naming its line number.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Read an append-only file that may end in a torn write. A trailing
/// fragment without a newline is truncated away before reading. A missing
/// file reads as empty.
pub fn read_records_repairing<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let keep = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    if keep < bytes.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    read_records(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "[1]\n[2]\n[3").unwrap();
        let v: Vec<Vec<u32>> = read_records_repairing(&p).unwrap();
        assert_eq!(v, vec![vec![1], vec![2]]);
        assert_eq!(fs::read_to_string(&p).unwrap(), "[1]\n[2]\n");
    }

    #[test]
    fn bad_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "[1]\nnope\n").unwrap();
        let err = read_records::<Vec<u32>>(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
