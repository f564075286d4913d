//! Dataset directories: `manifest.csv` listing `path,freq,channels`.

use std::path::{Path, PathBuf};

use super::clean::{clean, CleanReport};
use super::ingest::ingest_csv;
use crate::config::freq_index;
use crate::error::{FincastError, Result};
use crate::input::Series;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub freq_index: usize,
    /// Value columns to keep; empty keeps all.
    pub channels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Train, validation, test fractions by time order.
    pub split: [f64; 3],
}

/// Per-file outcome of [`DatasetManifest::load_series`].
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub bad_rows: Vec<(PathBuf, Vec<u64>)>,
    pub cleaning: Vec<(String, CleanReport)>,
}

impl DatasetManifest {
    /// Read `dir/manifest.csv`. Without one, every `*.csv` in `dir` is used
    /// with `default_freq`. Channels are `;`-separated.
    pub fn load(dir: &Path, default_freq: usize) -> Result<Self> {
        let manifest = dir.join("manifest.csv");
        let mut entries = Vec::new();
        if manifest.exists() {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_path(&manifest)?;
            let headers = rdr.headers()?.clone();
            let col = |name: &str| {
                headers.iter().position(|h| h == name).ok_or_else(|| {
                    FincastError::Data(format!("manifest.csv lacks a {name:?} column"))
                })
            };
            let (pc, fc) = (col("path")?, col("freq")?);
            let cc = headers.iter().position(|h| h == "channels");
            for rec in rdr.records() {
                let rec = rec?;
                let channels = cc
                    .and_then(|c| rec.get(c))
                    .map(|s| {
                        s.split(';')
                            .map(str::trim)
                            .filter(|c| !c.is_empty())
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default();
                entries.push(ManifestEntry {
                    path: dir.join(&rec[pc]),
                    freq_index: freq_index(&rec[fc])?,
                    channels,
                });
            }
        } else {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            entries = files
                .into_iter()
                .map(|path| ManifestEntry {
                    path,
                    freq_index: default_freq,
                    channels: Vec::new(),
                })
                .collect();
        }
        let m = Self {
            entries,
            split: [0.7, 0.1, 0.2],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(FincastError::Data("dataset has no files".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.path.is_file()) {
            return Err(FincastError::Data(format!(
                "referenced file {} does not exist",
                e.path.display()
            )));
        }
        if self.split.iter().any(|&x| x < 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(FincastError::Data(format!(
                "split ratios must be nonnegative and sum to 1: {:?}",
                self.split
            )));
        }
        Ok(())
    }

    /// Ingest and clean every listed channel; series shorter than `min_len`
    /// after cleaning are dropped (and reported).
    pub fn load_series(&self, min_len: usize) -> Result<(Vec<Series>, LoadReport)> {
        let mut out = Vec::new();
        let mut report = LoadReport::default();
        for e in &self.entries {
            let ing = ingest_csv(&e.path, e.freq_index)?;
            if !ing.bad_rows.is_empty() {
                report.bad_rows.push((e.path.clone(), ing.bad_rows.clone()));
            }
            for raw in ing.series {
                if !e.channels.is_empty() && !e.channels.contains(&raw.name) {
                    continue;
                }
                let c = clean(&raw, min_len);
                let stem = e
                    .path
                    .file_stem()
                    .map_or(String::new(), |s| s.to_string_lossy().into_owned());
                let label = format!("{stem}/{}", raw.name);
                report.cleaning.push((label.clone(), c.report.clone()));
                if let Some(mut s) = c.into_series()? {
                    s.name = label;
                    out.push(s);
                }
            }
        }
        Ok((out, report))
    }
}

/// End indices of the train and validation segments of a length-`len`
/// series under `split`.
pub fn split_bounds(len: usize, split: [f64; 3]) -> (usize, usize) {
    // tolerance so that e.g. 0.7 + 0.1 lands on 0.8 of the length
    let cut = |f: f64| (len as f64 * f + 1e-9).floor() as usize;
    let (a, b) = (cut(split[0]), cut(split[0] + split[1]));
    (a.min(len), b.min(len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("timestamp,open,close\n");
        for t in 0..50 {
            csv.push_str(&format!("{t},{},{}\n", t as f64 * 0.1, (t as f64).sin()));
        }
        std::fs::write(dir.path().join("a.csv"), &csv).unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "path,freq,channels\na.csv,hourly,close\n",
        )
        .unwrap();
        let m = DatasetManifest::load(dir.path(), 3).unwrap();
        assert_eq!(m.entries[0].freq_index, 2);
        let (series, _) = m.load_series(10).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].name, "a/close");
        let (none, rep) = m.load_series(100).unwrap();
        assert!(none.is_empty());
        assert!(rep.cleaning[0].1.excluded);
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "path,freq\nnope.csv,daily\n",
        )
        .unwrap();
        assert!(DatasetManifest::load(dir.path(), 3).is_err());
    }

    #[test]
    fn default_split() {
        assert_eq!(split_bounds(1000, [0.7, 0.1, 0.2]), (700, 800));
    }
}
