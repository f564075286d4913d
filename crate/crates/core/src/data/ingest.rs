//! CSV ingestion: `timestamp,<name>...` with UTC epoch-second timestamps.

use std::io::Read;
use std::path::Path;

use crate::error::{FincastError, Result};

/// One value column as read, before cleaning. Values may be non-finite.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    pub freq_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub series: Vec<RawSeries>,
    /// 1-based file line numbers of rows that could not be parsed.
    pub bad_rows: Vec<u64>,
}

pub fn ingest_csv(path: &Path, freq_index: usize) -> Result<Ingested> {
    let f = std::fs::File::open(path)?;
    ingest_reader(f, freq_index).map_err(|e| FincastError::Data(format!("{}: {e}", path.display())))
}

/// Parse CSV text. Rows whose timestamp or any value fails to parse are
/// skipped and reported. Repeated or decreasing timestamps are an error.
pub fn ingest_reader<R: Read>(reader: R, freq_index: usize) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(FincastError::Data("empty file: no header row".into()));
    }
    if headers.len() < 2 {
        return Err(FincastError::Data(
            "need a timestamp column and at least one value column".into(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ts = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut lines = Vec::new();
    let mut bad_rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            bad_rows.push(line);
            continue;
        }
        let Ok(t) = rec[0].parse::<i64>() else {
            bad_rows.push(line);
            continue;
        };
        let vals: std::result::Result<Vec<f64>, _> =
            rec.iter().skip(1).map(str::parse::<f64>).collect();
        let Ok(vals) = vals else {
            bad_rows.push(line);
            continue;
        };
        ts.push(t);
        lines.push(line);
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    if ts.is_empty() {
        return Err(FincastError::Data(format!(
            "no parsable rows ({} unparsable)",
            bad_rows.len()
        )));
    }
    let dups: Vec<String> = ts
        .windows(2)
        .zip(lines.windows(2))
        .filter(|(w, _)| w[1] == w[0])
        .map(|(_, l)| format!("{}/{}", l[0], l[1]))
        .collect();
    if !dups.is_empty() {
        return Err(FincastError::Data(format!(
            "duplicate timestamps at rows {}",
            dups.join(", ")
        )));
    }
    let back: Vec<String> = ts
        .windows(2)
        .zip(lines.windows(2))
        .filter(|(w, _)| w[1] < w[0])
        .map(|(_, l)| l[1].to_string())
        .collect();
    if !back.is_empty() {
        return Err(FincastError::Data(format!(
            "timestamps decrease at rows {}",
            back.join(", ")
        )));
    }
    let series = names
        .into_iter()
        .zip(cols)
        .map(|(name, values)| RawSeries {
            name,
            timestamps: ts.clone(),
            values,
            freq_index,
        })
        .collect();
    Ok(Ingested { series, bad_rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Ingested> {
        ingest_reader(s.as_bytes(), 3)
    }

    #[test]
    fn one_series_per_value_column() {
        let r = parse("timestamp,open,close\n1,1.0,2.0\n2,1.5,2.5\n").unwrap();
        assert_eq!(r.series.len(), 2);
        assert_eq!(r.series[1].name, "close");
        assert_eq!(r.series[1].values, vec![2.0, 2.5]);
        assert_eq!(r.series[0].timestamps, vec![1, 2]);
    }

    #[test]
    fn empty_file_rejected() {
        assert!(parse("").is_err());
        assert!(parse("timestamp,x\n").is_err());
    }

    #[test]
    fn duplicate_timestamps_name_rows() {
        let err = parse("timestamp,x\n1,1\n2,2\n2,3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate") && err.contains("3/4"), "{err}");
    }

    #[test]
    fn non_monotone_rejected() {
        assert!(parse("timestamp,x\n5,1\n3,2\n").is_err());
    }

    #[test]
    fn bad_rows_counted() {
        let r = parse("timestamp,x\n1,1\nfoo,2\n3,bar\n4,NaN\n5\n").unwrap();
        assert_eq!(r.bad_rows, vec![3, 4, 6]);
        assert_eq!(r.series[0].values.len(), 2);
        assert!(r.series[0].values[1].is_nan());
    }
}
