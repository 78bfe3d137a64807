//! File helpers shared by the commands. CSV is headerless, row-major, and
//! prints every value with enough digits to round-trip.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use uotalign::features::{read_embedding_file, write_embedding_file};
use uotalign::transport::INF;
use uotalign::Mat;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Mat> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>().with_context(|| format!("{}: row {}: not a number: {f:?}", path.display(), i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: no rows", path.display());
    }
    Ok(Mat::from_rows(&rows)?)
}

/// Reads EMB1 by magic, anything else as CSV.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let head = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    if head.starts_with(uotalign::features::MAGIC) {
        Ok(read_embedding_file(path)?)
    } else {
        read_csv(path)
    }
}

pub fn write_matrix_pair(dir: &Path, stem: &str, m: &Mat) -> Result<()> {
    write_csv(&dir.join(format!("{stem}.csv")), m)?;
    write_embedding_file(dir.join(format!("{stem}.emb")), m)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn parse_rho(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(INF),
        t => t.parse::<f64>().map_err(|e| format!("{s:?}: {e}")),
    }
}

pub fn parse_list<T, E: std::fmt::Display>(s: &str, item: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| item(t.trim()).map_err(|e| anyhow::anyhow!("{t:?}: {e}")))
        .collect()
}

pub fn rho_json(rho: f64) -> serde_json::Value {
    if rho.is_infinite() {
        serde_json::Value::from("inf")
    } else {
        serde_json::Value::from(rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Mat::from_rows(&[vec![1.0, 0.1 + 0.2], vec![1e-300, -3.5]]).unwrap();
        write_csv(&path, &m).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "1.0,0.30000000000000004\n1e-300,-3.5\n");
        assert_eq!(read_csv(&path).unwrap(), m);
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn ragged_or_text_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,2\nx,3\n").unwrap();
        assert!(read_csv(&path).is_err());
        fs::write(&path, "").unwrap();
        assert!(read_csv(&path).is_err());
    }

    #[test]
    fn rho_parsing() {
        assert_eq!(parse_rho("inf").unwrap(), INF);
        assert_eq!(parse_rho(" 0.04").unwrap(), 0.04);
        assert!(parse_rho("soon").is_err());
        assert_eq!(parse_list("inf, 1", parse_rho).unwrap(), vec![INF, 1.0]);
        assert_eq!(rho_json(INF), serde_json::json!("inf"));
    }
}
