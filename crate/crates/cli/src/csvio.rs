//! Minimal CSV writer/reader for the experiment artifacts. No quoting —
//! the emitters never produce commas inside fields — and parse errors
//! carry the 1-based row number.

use std::fs;
use std::path::Path;

use crate::{CliError, Result};

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("csv has no column '{name}'")))
    }

    pub fn f64(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col]
            .parse()
            .map_err(|_| CliError::Data(format!("row {}: bad number '{}'", row + 2, self.rows[row][col])))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::Data("csv row 1: empty file".into()))?;
    let header: Vec<String> = header_line.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != header.len() {
            return Err(CliError::Data(format!(
                "csv row {}: {} fields, header has {}",
                i + 2,
                fields.len(),
                header.len()
            )));
        }
        rows.push(fields);
    }
    Ok(CsvTable { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("chaosdnn-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3.5".into(), "x".into()]],
        )
        .unwrap();
        let t = read_csv(&path).unwrap();
        assert_eq!(t.header, vec!["a", "b"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.f64(0, 0).unwrap(), 1.0);
        match t.f64(1, 1) {
            Err(CliError::Data(msg)) => assert!(msg.contains("row 3"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
        std::fs::write(&path, "a,b\n1\n").unwrap();
        match read_csv(&path) {
            Err(CliError::Data(msg)) => assert!(msg.contains("row 2")),
            other => panic!("expected data error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
