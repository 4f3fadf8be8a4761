//! Artifact files: atomic writes and tables in CSV or JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Writes `rows` as `<stem>.csv` or `<stem>.json` under `dir`.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T], format: Format) -> CliResult<PathBuf> {
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let bytes = match format {
        Format::Csv => csv_bytes(rows)?,
        Format::Json => {
            let mut b = serde_json::to_vec_pretty(rows)?;
            b.push(b'\n');
            b
        }
    };
    write_atomic(&path, &bytes)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut b = serde_json::to_vec_pretty(value)?;
    b.push(b'\n');
    write_atomic(path, &b)
}

/// Fails with a pointer to the producing command when `path` is absent.
pub fn require(path: &Path, producer: &'static str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            path: path.to_path_buf(),
            producer,
        })
    }
}

/// Reads a table written by [`write_table`], trying `prefer` first and
/// then the other format.
pub fn read_table<T: DeserializeOwned>(
    dir: &Path,
    stem: &str,
    producer: &'static str,
    prefer: Format,
) -> CliResult<Vec<T>> {
    let other = match prefer {
        Format::Csv => Format::Json,
        Format::Json => Format::Csv,
    };
    for format in [prefer, other] {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        if !path.is_file() {
            continue;
        }
        return match format {
            Format::Csv => csv::Reader::from_path(&path)?
                .deserialize()
                .map(|row| row.map_err(CliError::from))
                .collect(),
            Format::Json => Ok(serde_json::from_slice(&fs::read(&path)?)?),
        };
    }
    Err(CliError::MissingInput {
        path: dir.join(format!("{stem}.{}", prefer.extension())),
        producer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        k: usize,
        value: f64,
    }

    #[test]
    fn tables_round_trip_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![Row { k: 3, value: 0.1 + 0.2 }, Row { k: 2, value: 1e-12 }];
        for format in [Format::Json, Format::Csv] {
            write_table(dir.path(), "t", &rows, format).unwrap();
            let back: Vec<Row> = read_table(dir.path(), "t", "x", format).unwrap();
            assert_eq!(back, rows);
        }
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(text.starts_with("k,value\n"));
    }

    #[test]
    fn missing_table_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        match read_table::<Row>(dir.path(), "nope", "sweep-k", Format::Csv) {
            Err(CliError::MissingInput { producer, .. }) => assert_eq!(producer, "sweep-k"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
