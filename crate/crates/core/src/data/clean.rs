//! Invalid-value removal and rolling z-score outlier clipping.

use super::ingest::RawSeries;
use crate::error::Result;
use crate::input::Series;

pub const OUTLIER_Z: f64 = 12.0;
pub const OUTLIER_WINDOW: usize = 256;
/// Fewer trailing points than this and the z-score is not trusted.
pub const MIN_HISTORY: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CleanReport {
    pub dropped_non_finite: usize,
    /// `(position in the input, run length)` of each dropped run.
    pub gaps: Vec<(usize, usize)>,
    /// Output positions that were clipped.
    pub clipped: Vec<usize>,
    /// Too short after cleaning for the requested context plus horizon.
    pub excluded: bool,
}

impl CleanReport {
    pub fn is_empty(&self) -> bool {
        self.dropped_non_finite == 0 && self.clipped.is_empty() && !self.excluded
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cleaned {
    pub series: RawSeries,
    pub report: CleanReport,
}

impl Cleaned {
    /// The validated series, or `None` when it was excluded.
    pub fn into_series(self) -> Result<Option<Series>> {
        if self.report.excluded || self.series.values.is_empty() {
            return Ok(None);
        }
        let s = Series::new(self.series.name, self.series.values, self.series.freq_index)?
            .with_timestamps(self.series.timestamps)?;
        Ok(Some(s))
    }
}

/// Drop non-finite points, then clip points more than [`OUTLIER_Z`] standard
/// deviations from the mean of the preceding [`OUTLIER_WINDOW`] cleaned
/// points. Series shorter than `min_len` afterwards are flagged excluded.
/// Idempotent: every window is built from already-cleaned values.
pub fn clean(series: &RawSeries, min_len: usize) -> Cleaned {
    let mut report = CleanReport::default();
    let mut values = Vec::with_capacity(series.values.len());
    let mut timestamps = Vec::with_capacity(series.values.len());
    let mut run: Option<(usize, usize)> = None;
    for (i, &v) in series.values.iter().enumerate() {
        if v.is_finite() {
            if let Some(r) = run.take() {
                report.gaps.push(r);
            }
            values.push(v);
            if let Some(&t) = series.timestamps.get(i) {
                timestamps.push(t);
            }
        } else {
            report.dropped_non_finite += 1;
            run = Some(run.map_or((i, 1), |(s, n)| (s, n + 1)));
        }
    }
    if let Some(r) = run {
        report.gaps.push(r);
    }

    for i in MIN_HISTORY..values.len() {
        let w = &values[i.saturating_sub(OUTLIER_WINDOW)..i];
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            continue;
        }
        let (lo, hi) = (mean - OUTLIER_Z * std, mean + OUTLIER_Z * std);
        if values[i] > hi || values[i] < lo {
            values[i] = values[i].clamp(lo, hi);
            report.clipped.push(i);
        }
    }
    report.excluded = values.len() < min_len;
    Cleaned {
        series: RawSeries {
            name: series.name.clone(),
            timestamps,
            values,
            freq_index: series.freq_index,
        },
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(values: Vec<f64>) -> RawSeries {
        RawSeries {
            name: "x".into(),
            timestamps: (0..values.len() as i64).collect(),
            values,
            freq_index: 3,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn nan_dropped() {
        let mut v = noise(50, 1);
        v[10] = f64::NAN;
        let c = clean(&raw(v), 0);
        assert_eq!(c.report.dropped_non_finite, 1);
        assert_eq!(c.report.gaps, vec![(10, 1)]);
        assert_eq!(c.series.values.len(), 49);
        assert_eq!(c.series.timestamps.len(), 49);
        assert!(!c.series.timestamps.contains(&10));
    }

    #[test]
    fn spike_clipped() {
        let mut v = noise(400, 2);
        v[300] = 1e6;
        let c = clean(&raw(v), 0);
        assert_eq!(c.report.clipped, vec![300]);
        assert!(c.series.values[300] < 12.0);
    }

    #[test]
    fn clean_series_untouched() {
        let v = noise(500, 3);
        let c = clean(&raw(v.clone()), 0);
        assert_eq!(c.series.values, v);
        assert!(c.report.is_empty());
    }

    #[test]
    fn short_series_excluded() {
        let c = clean(&raw(noise(20, 4)), 100);
        assert!(c.report.excluded);
        assert!(c.into_series().unwrap().is_none());
    }

    proptest! {
        #[test]
        fn idempotent(
            base in proptest::collection::vec(-5.0f64..5.0, 0..400),
            spikes in proptest::collection::vec((0usize..400, -1e9f64..1e9), 0..6),
            nans in proptest::collection::vec(0usize..400, 0..4),
        ) {
            let mut v = base;
            for (i, s) in spikes {
                if i < v.len() { v[i] = s; }
            }
            for i in nans {
                if i < v.len() { v[i] = f64::NAN; }
            }
            let once = clean(&raw(v), 0);
            let twice = clean(&once.series, 0);
            prop_assert_eq!(&twice.series, &once.series);
            prop_assert!(twice.report.is_empty());
        }
    }
}
