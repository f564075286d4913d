//! Sliding-window evaluation on per-window standardized values.
//!
//! Every window's ground truth and forecasts are z-scored with the mean and
//! standard deviation of that window's context, so reports are comparable
//! across series of different scale and invariant to positive affine maps.

use std::io::Write;
use std::path::Path;

use super::windows::{make_windows, Window};
use super::worker_count;
use crate::error::{invalid, Result};
use crate::inference::forecast;
use crate::input::{Series, SIGMA_EPS};
use crate::loss::pinball_term;
use crate::model::FinCast;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub point: Vec<f64>,
    /// One path per level in [`Forecaster::quantile_levels`].
    pub quantiles: Vec<Vec<f64>>,
}

pub trait Forecaster: Sync {
    fn name(&self) -> String;

    fn quantile_levels(&self) -> Vec<f64> {
        Vec::new()
    }

    fn predict(&self, context: &[f64], freq_index: usize, horizon: usize) -> Result<Prediction>;
}

impl Forecaster for FinCast {
    fn name(&self) -> String {
        "fincast".into()
    }

    fn quantile_levels(&self) -> Vec<f64> {
        self.config().quantiles.clone()
    }

    fn predict(&self, context: &[f64], freq_index: usize, horizon: usize) -> Result<Prediction> {
        let f = forecast(self, context, freq_index, horizon)?;
        Ok(Prediction {
            point: f.point,
            quantiles: f.quantiles,
        })
    }
}

/// Repeats the last observed value.
pub struct NaiveLast;

impl Forecaster for NaiveLast {
    fn name(&self) -> String {
        "naive_last".into()
    }

    fn predict(&self, context: &[f64], _: usize, horizon: usize) -> Result<Prediction> {
        let Some(&last) = context.last() else {
            return invalid("empty context");
        };
        Ok(Prediction {
            point: vec![last; horizon],
            quantiles: Vec::new(),
        })
    }
}

/// Repeats the context mean.
pub struct ContextMean;

impl Forecaster for ContextMean {
    fn name(&self) -> String {
        "context_mean".into()
    }

    fn predict(&self, context: &[f64], _: usize, horizon: usize) -> Result<Prediction> {
        if context.is_empty() {
            return invalid("empty context");
        }
        let m = context.iter().sum::<f64>() / context.len() as f64;
        Ok(Prediction {
            point: vec![m; horizon],
            quantiles: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub context_len: usize,
    pub horizons: Vec<usize>,
    pub stride: usize,
    /// Also score the naive last-value and context-mean baselines.
    pub baselines: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub horizon: usize,
    pub model: String,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    /// Mean pinball loss over quantile levels and steps.
    pub pinball: Option<f64>,
    /// `(level, fraction of targets at or below the level's path)`.
    pub coverage: Vec<(f64, f64)>,
    pub crossing_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, Default)]
struct Sums {
    n: usize,
    se: f64,
    ae: f64,
    pinball: f64,
    below: Vec<usize>,
    crossings: usize,
    pairs: usize,
}

impl Sums {
    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.se += o.se;
        self.ae += o.ae;
        self.pinball += o.pinball;
        if self.below.len() < o.below.len() {
            self.below.resize(o.below.len(), 0);
        }
        for (a, b) in self.below.iter_mut().zip(&o.below) {
            *a += b;
        }
        self.crossings += o.crossings;
        self.pairs += o.pairs;
    }
}

/// Population mean and std of `x`, std floored at the normalization epsilon.
pub fn window_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n;
    (m, v.sqrt().max(SIGMA_EPS))
}

fn score_window(f: &dyn Forecaster, levels: &[f64], w: &Window<'_>, freq: usize) -> Result<Sums> {
    let h = w.target.len();
    let pred = f.predict(w.context, freq, h)?;
    if pred.point.len() != h || pred.quantiles.len() != levels.len() {
        return invalid(format!("{} returned a malformed forecast", f.name()));
    }
    let (m, s) = window_stats(w.context);
    let z = |x: f64| (x - m) / s;
    let mut out = Sums {
        n: h,
        below: vec![0; levels.len()],
        ..Sums::default()
    };
    for (p, y) in pred.point.iter().zip(w.target) {
        let e = z(*p) - z(*y);
        out.se += e * e;
        out.ae += e.abs();
    }
    for (qi, (&q, path)) in levels.iter().zip(&pred.quantiles).enumerate() {
        for (p, y) in path.iter().zip(w.target) {
            out.pinball += pinball_term(z(*p), z(*y), q);
            out.below[qi] += usize::from(y <= p);
        }
    }
    for pair in pred.quantiles.windows(2) {
        for (lo, hi) in pair[0].iter().zip(&pair[1]) {
            out.pairs += 1;
            out.crossings += usize::from(hi < lo);
        }
    }
    Ok(out)
}

fn score_all(f: &dyn Forecaster, levels: &[f64], windows: &[(Window<'_>, usize)]) -> Result<Sums> {
    let threads = worker_count().min(windows.len()).max(1);
    let chunk = windows.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Sums>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    c.iter()
                        .map(|(w, freq)| score_window(f, levels, w, *freq))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    // reduce in window order so the result does not depend on thread count
    let mut total = Sums {
        below: vec![0; levels.len()],
        ..Sums::default()
    };
    for part in parts {
        for s in part? {
            total.merge(&s);
        }
    }
    Ok(total)
}

/// Score `model` (and optionally the baselines) on every dataset and
/// horizon.
pub fn evaluate(
    model: &dyn Forecaster,
    datasets: &[(String, Vec<Series>)],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.horizons.is_empty() {
        return invalid("no horizons to evaluate");
    }
    let baselines: [&dyn Forecaster; 2] = [&NaiveLast, &ContextMean];
    let mut models: Vec<&dyn Forecaster> = vec![model];
    if opts.baselines {
        models.extend(baselines);
    }
    let mut report = EvalReport::default();
    for (name, series) in datasets {
        for &h in &opts.horizons {
            let mut windows = Vec::new();
            for s in series {
                let set = make_windows(&s.values, opts.context_len, h, opts.stride)?;
                windows.extend(set.windows.into_iter().map(|w| (w, s.freq_index)));
            }
            for f in &models {
                let levels = f.quantile_levels();
                let sums = score_all(*f, &levels, &windows)?;
                let n = sums.n.max(1) as f64;
                let has_q = !levels.is_empty();
                report.rows.push(EvalRow {
                    dataset: name.clone(),
                    horizon: h,
                    model: f.name(),
                    windows: windows.len(),
                    mse: sums.se / n,
                    mae: sums.ae / n,
                    pinball: has_q.then(|| sums.pinball / (n * levels.len() as f64)),
                    coverage: levels
                        .iter()
                        .zip(&sums.below)
                        .map(|(&q, &b)| (q, b as f64 / n))
                        .collect(),
                    crossing_rate: (levels.len() > 1)
                        .then(|| sums.crossings as f64 / sums.pairs.max(1) as f64),
                });
            }
        }
    }
    Ok(report)
}

impl EvalReport {
    pub fn find(&self, dataset: &str, horizon: usize, model: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.horizon == horizon && r.model == model)
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            r.mse.is_finite()
                && r.mae.is_finite()
                && r.pinball.is_none_or(f64::is_finite)
                && r.coverage.iter().all(|c| c.1.is_finite())
        })
    }

    /// CSV with one row per (dataset, horizon, model). Coverage columns cover
    /// the union of quantile levels; baselines leave them empty.
    pub fn to_csv(&self) -> String {
        let mut levels: Vec<f64> = self
            .rows
            .iter()
            .flat_map(|r| r.coverage.iter().map(|c| c.0))
            .collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut s = String::from("dataset,horizon,model,windows,mse,mae,pinball,crossing_rate");
        for q in &levels {
            s.push_str(&format!(",coverage_q{q}"));
        }
        s.push('\n');
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                r.dataset,
                r.horizon,
                r.model,
                r.windows,
                r.mse,
                r.mae,
                opt(r.pinball),
                opt(r.crossing_rate)
            ));
            for q in &levels {
                let c = r.coverage.iter().find(|c| c.0 == *q).map(|c| c.1);
                s.push(',');
                s.push_str(&opt(c));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Knows the future exactly.
    struct Oracle(Vec<f64>);

    impl Forecaster for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn quantile_levels(&self) -> Vec<f64> {
            vec![0.5]
        }
        fn predict(&self, context: &[f64], _: usize, h: usize) -> Result<Prediction> {
            // contexts are unique prefixes here, so the end index locates them
            let end = self
                .0
                .windows(context.len())
                .position(|w| w == context)
                .expect("known context")
                + context.len();
            let p = self.0[end..end + h].to_vec();
            Ok(Prediction {
                point: p.clone(),
                quantiles: vec![p],
            })
        }
    }

    fn opts(h: usize) -> EvalOptions {
        EvalOptions {
            context_len: 16,
            horizons: vec![h],
            stride: 1,
            baselines: true,
        }
    }

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let v: Vec<f64> = (0..80)
            .map(|i| (i as f64 * 0.37).sin() + i as f64 * 0.01)
            .collect();
        let s = Series::new("s", v.clone(), 3).unwrap();
        let r = evaluate(&Oracle(v), &[("d".into(), vec![s])], &opts(4)).unwrap();
        let row = r.find("d", 4, "oracle").unwrap();
        assert_eq!((row.mse, row.mae), (0.0, 0.0));
        assert_eq!(row.windows, 80 - 20 + 1);
        assert_eq!(r.rows.len(), 3);
    }

    #[test]
    fn context_mean_on_white_noise() {
        // z-scored MSE of the mean forecast is about 1 + 1/L for unit noise
        let s = Series::new("w", white(3000, 1), 3).unwrap();
        let mut o = opts(1);
        o.context_len = 200;
        let r = evaluate(&ContextMean, &[("w".into(), vec![s])], &o).unwrap();
        let row = r.find("w", 1, "context_mean").unwrap();
        assert!(row.windows >= 1000);
        assert!((row.mse - 1.0).abs() < 0.05 * 1.0 + 0.01, "{}", row.mse);
    }

    #[test]
    fn median_coverage_on_symmetric_target() {
        // target symmetric around a known center; the median is the center
        struct Center;
        impl Forecaster for Center {
            fn name(&self) -> String {
                "center".into()
            }
            fn quantile_levels(&self) -> Vec<f64> {
                vec![0.5]
            }
            fn predict(&self, _: &[f64], _: usize, h: usize) -> Result<Prediction> {
                Ok(Prediction {
                    point: vec![0.0; h],
                    quantiles: vec![vec![0.0; h]],
                })
            }
        }
        let s = Series::new("w", white(2100, 2), 3).unwrap();
        let mut o = opts(1);
        o.baselines = false;
        let r = evaluate(&Center, &[("w".into(), vec![s])], &o).unwrap();
        let cov = r.rows[0].coverage[0].1;
        assert!((cov - 0.5).abs() < 0.03, "{cov}");
    }

    #[test]
    fn affine_invariance_of_baselines() {
        let v = white(300, 3);
        let a = Series::new("a", v.clone(), 3).unwrap();
        let b = Series::new("a", v.iter().map(|x| 37.0 * x - 5.0).collect(), 3).unwrap();
        let ra = evaluate(&NaiveLast, &[("d".into(), vec![a])], &opts(5)).unwrap();
        let rb = evaluate(&NaiveLast, &[("d".into(), vec![b])], &opts(5)).unwrap();
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert!((x.mse - y.mse).abs() < 1e-8 && (x.mae - y.mae).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = Series::new("s", white(60, 4), 3).unwrap();
        let r = evaluate(&NaiveLast, &[("d".into(), vec![s])], &opts(3)).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("dataset,horizon,model,windows,mse,mae,pinball,crossing_rate\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
