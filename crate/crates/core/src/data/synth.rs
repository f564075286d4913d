//! Deterministic synthetic series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, FincastError, Result};
use crate::input::Series;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    SinusoidMix,
    TrendNoise,
    RegimeAr,
    RandomWalk,
}

impl SynthKind {
    pub const NAMES: [&'static str; 4] = ["sinusoid", "trend", "regime_ar", "random_walk"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sinusoid" => Ok(Self::SinusoidMix),
            "trend" => Ok(Self::TrendNoise),
            "regime_ar" => Ok(Self::RegimeAr),
            "random_walk" => Ok(Self::RandomWalk),
            other => Err(FincastError::InvalidArgument(format!(
                "unknown synthetic kind {other:?} (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Generator knobs. Each kind reads only the fields it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub len: usize,
    pub freq_index: usize,
    pub amplitudes: Vec<f64>,
    pub periods: Vec<f64>,
    pub phases: Vec<f64>,
    pub noise_std: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Per-regime AR(1) coefficient, mean and innovation std.
    pub ar_phi: Vec<f64>,
    pub ar_mean: Vec<f64>,
    pub ar_noise: Vec<f64>,
    /// Per-step probability of jumping to a different regime.
    pub switch_prob: f64,
    pub step_std: f64,
    pub drift: f64,
    pub start: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            len: 1024,
            freq_index: 3,
            amplitudes: vec![1.0],
            periods: vec![64.0],
            phases: vec![0.0],
            noise_std: 0.0,
            slope: 0.01,
            intercept: 0.0,
            ar_phi: vec![0.95, 0.5, -0.5],
            ar_mean: vec![0.0, 2.0, -2.0],
            ar_noise: vec![0.1, 0.3, 0.6],
            switch_prob: 0.01,
            step_std: 1.0,
            drift: 0.0,
            start: 0.0,
        }
    }
}

fn list(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| FincastError::InvalidArgument(format!("bad number {s:?}")))
        })
        .collect()
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| FincastError::InvalidArgument(format!("bad value {v:?} for {k}")))
}

impl SynthParams {
    /// Set one field from `key=value` text (lists are comma separated).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "len" => self.len = num(key, value)?,
            "freq_index" => self.freq_index = num(key, value)?,
            "amplitudes" => self.amplitudes = list(value)?,
            "periods" => self.periods = list(value)?,
            "phases" => self.phases = list(value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "slope" => self.slope = num(key, value)?,
            "intercept" => self.intercept = num(key, value)?,
            "ar_phi" => self.ar_phi = list(value)?,
            "ar_mean" => self.ar_mean = list(value)?,
            "ar_noise" => self.ar_noise = list(value)?,
            "switch_prob" => self.switch_prob = num(key, value)?,
            "step_std" => self.step_std = num(key, value)?,
            "drift" => self.drift = num(key, value)?,
            "start" => self.start = num(key, value)?,
            other => return invalid(format!("unknown synth parameter {other:?}")),
        }
        Ok(())
    }
}

/// Generate one series. Same `(kind, params, seed)` gives the same output.
pub fn synth_generate(kind: SynthKind, p: &SynthParams, seed: u64) -> Result<Series> {
    if p.len == 0 {
        return invalid("synthetic length must be >= 1");
    }
    if p.noise_std < 0.0 || p.step_std < 0.0 {
        return invalid("noise scales must be nonnegative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut regimes = None;
    let values: Vec<f64> = match kind {
        SynthKind::SinusoidMix => {
            if p.amplitudes.len() != p.periods.len() || p.phases.len() != p.periods.len() {
                return invalid("amplitudes, periods and phases must have equal length");
            }
            if p.periods.iter().any(|&t| !(t > 0.0)) {
                return invalid("periods must be > 0");
            }
            (0..p.len)
                .map(|t| {
                    let clean: f64 = p
                        .amplitudes
                        .iter()
                        .zip(&p.periods)
                        .zip(&p.phases)
                        .map(|((a, per), ph)| {
                            a * (std::f64::consts::TAU * t as f64 / per + ph).sin()
                        })
                        .sum();
                    let e = if p.noise_std > 0.0 {
                        p.noise_std * gauss(&mut rng)
                    } else {
                        0.0
                    };
                    clean + e
                })
                .collect()
        }
        SynthKind::TrendNoise => (0..p.len)
            .map(|t| p.intercept + p.slope * t as f64 + p.noise_std * gauss(&mut rng))
            .collect(),
        SynthKind::RegimeAr => {
            let k = p.ar_phi.len();
            if k == 0 || p.ar_mean.len() != k || p.ar_noise.len() != k {
                return invalid("ar_phi, ar_mean and ar_noise must be equally long and non-empty");
            }
            if !(0.0..=1.0).contains(&p.switch_prob) {
                return invalid("switch_prob must lie in [0, 1]");
            }
            let mut r = rng.gen_range(0..k);
            let mut x = p.ar_mean[r];
            let mut labels = Vec::with_capacity(p.len);
            let mut out = Vec::with_capacity(p.len);
            for _ in 0..p.len {
                if k > 1 && rng.gen::<f64>() < p.switch_prob {
                    let jump = rng.gen_range(1..k);
                    r = (r + jump) % k;
                }
                x = p.ar_mean[r]
                    + p.ar_phi[r] * (x - p.ar_mean[r])
                    + p.ar_noise[r] * gauss(&mut rng);
                labels.push(r);
                out.push(x);
            }
            regimes = Some(labels);
            out
        }
        SynthKind::RandomWalk => {
            let mut x = p.start;
            (0..p.len)
                .map(|_| {
                    x += p.drift + p.step_std * gauss(&mut rng);
                    x
                })
                .collect()
        }
    };
    let name = format!("{}_{seed}", SynthKind::NAMES[kind as usize]);
    let mut s = Series::new(name, values, p.freq_index)?;
    s.regimes = regimes;
    Ok(s)
}

/// Three structurally different regimes, one series each per draw, each
/// regime tagged with its own sampling-frequency index:
///
/// * regime 0 (`daily`): sum of two sinusoids with light noise,
/// * regime 1 (`hourly`): triangle wave with light noise,
/// * regime 2 (`weekly`): oscillating AR(1) around a slow sinusoid.
pub fn regime_mixture(series_per_regime: usize, len: usize, seed: u64) -> Result<Vec<Series>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(3 * series_per_regime);
    for i in 0..series_per_regime {
        for regime in 0..3usize {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let scale = rng.gen_range(0.5..2.0);
            let level = rng.gen_range(-3.0..3.0);
            let values: Vec<f64> = match regime {
                0 => (0..len)
                    .map(|t| {
                        let t = t as f64;
                        level
                            + scale
                                * ((std::f64::consts::TAU * t / 24.0 + phase).sin()
                                    + 0.5 * (std::f64::consts::TAU * t / 9.0 + 2.0 * phase).sin()
                                    + 0.05 * unit.sample(&mut rng))
                    })
                    .collect(),
                1 => (0..len)
                    .map(|t| {
                        let u = (t as f64 / 16.0 + phase / std::f64::consts::TAU).fract();
                        let tri = 4.0 * (u - 0.5).abs() - 1.0;
                        level + scale * (tri + 0.05 * unit.sample(&mut rng))
                    })
                    .collect(),
                _ => {
                    let mut x = 0.0;
                    (0..len)
                        .map(|t| {
                            x = -0.7 * x + 0.4 * unit.sample(&mut rng);
                            let slow = (std::f64::consts::TAU * t as f64 / 48.0 + phase).sin();
                            level + scale * (slow + x)
                        })
                        .collect()
                }
            };
            let freq = [3, 2, 4][regime];
            let mut s = Series::new(format!("regime{regime}_{i}"), values, freq)?;
            s.regimes = Some(vec![regime; len]);
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sinusoid_bounded() {
        let p = SynthParams {
            len: 64 * 20,
            ..SynthParams::default()
        };
        let s = synth_generate(SynthKind::SinusoidMix, &p, 0).unwrap();
        let max = s.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max <= 1.0 && max > 0.999, "{max}");
    }

    #[test]
    fn random_walk_increment_std() {
        let p = SynthParams {
            len: 10_000,
            ..SynthParams::default()
        };
        let s = synth_generate(SynthKind::RandomWalk, &p, 9).unwrap();
        let inc: Vec<f64> = s.values.windows(2).map(|w| w[1] - w[0]).collect();
        let n = inc.len() as f64;
        let m = inc.iter().sum::<f64>() / n;
        let sd = (inc.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn seeded_determinism() {
        let p = SynthParams::default();
        for kind in [
            SynthKind::SinusoidMix,
            SynthKind::TrendNoise,
            SynthKind::RegimeAr,
            SynthKind::RandomWalk,
        ] {
            assert_eq!(
                synth_generate(kind, &p, 5).unwrap(),
                synth_generate(kind, &p, 5).unwrap()
            );
        }
    }

    #[test]
    fn regime_labels_emitted() {
        let p = SynthParams {
            len: 5000,
            switch_prob: 0.02,
            ..SynthParams::default()
        };
        let s = synth_generate(SynthKind::RegimeAr, &p, 1).unwrap();
        let labels = s.regimes.unwrap();
        assert_eq!(labels.len(), 5000);
        for r in 0..3 {
            assert!(labels.contains(&r));
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(SynthKind::parse("chaos").is_err());
        assert_eq!(SynthKind::parse("regime_ar").unwrap(), SynthKind::RegimeAr);
    }

    #[test]
    fn mixture_layout() {
        let m = regime_mixture(2, 100, 0).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m[1].freq_index, 2);
        assert_eq!(m[5].regimes.as_ref().unwrap()[0], 2);
    }
}
