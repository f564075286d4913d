//! Autoregressive patch-wise decoding to arbitrary horizons.
//!
//! Each iteration forecasts `h_out` steps from the last token, appends the
//! point forecast (original units) to the context and goes again. When the
//! patch grid stays aligned the previous keys and values are reused.

use crate::backbone::KvCache;
use crate::error::{invalid, FincastError, Result};
use crate::input::{denormalize_value, PatchBatch};
use crate::model::FinCast;
use crate::tensor::Tape;

/// Forecast for one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPath {
    /// Exactly `horizon` points.
    pub point: Vec<f64>,
    /// One path per quantile level, each `horizon` long.
    pub quantiles: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Iterations that reused cached keys and values.
    pub cached_iterations: usize,
}

impl ForecastPath {
    /// Fraction of adjacent quantile pairs out of order.
    pub fn crossing_rate(&self) -> f64 {
        let (mut bad, mut pairs) = (0usize, 0usize);
        for w in self.quantiles.windows(2) {
            for (lo, hi) in w[0].iter().zip(&w[1]) {
                pairs += 1;
                bad += usize::from(hi < lo);
            }
        }
        bad as f64 / pairs.max(1) as f64
    }
}

/// Forecast `horizon` steps of a single series.
pub fn forecast(
    model: &FinCast,
    values: &[f64],
    freq_index: usize,
    horizon: usize,
) -> Result<ForecastPath> {
    let mut out = decode(model, &[values], freq_index, horizon, true)?;
    Ok(out.remove(0))
}

/// Forecast every channel of a `c × L` matrix with the shared weights.
pub fn forecast_multichannel(
    model: &FinCast,
    channels: &[&[f64]],
    freq_index: usize,
    horizon: usize,
) -> Result<Vec<ForecastPath>> {
    decode(model, channels, freq_index, horizon, true)
}

/// Decode equally long channels together. `use_cache = false` recomputes the
/// whole context every iteration.
pub fn decode(
    model: &FinCast,
    channels: &[&[f64]],
    freq_index: usize,
    horizon: usize,
    use_cache: bool,
) -> Result<Vec<ForecastPath>> {
    let cfg = model.config();
    if horizon == 0 {
        return invalid("horizon must be >= 1");
    }
    let Some(first) = channels.first() else {
        return invalid("no channels to forecast");
    };
    if first.is_empty() {
        return invalid("cannot forecast from an empty series");
    }
    if let Some(i) = channels.iter().position(|c| c.len() != first.len()) {
        return Err(FincastError::Data(format!(
            "ragged channels: channel 0 has {} points, channel {i} has {}",
            first.len(),
            channels[i].len()
        )));
    }
    for (i, c) in channels.iter().enumerate() {
        if let Some(j) = c.iter().position(|x| !x.is_finite()) {
            return Err(FincastError::NonFinite(format!(
                "channel {i} position {j} is {}",
                c[j]
            )));
        }
    }

    let (p, h_out, nq) = (cfg.patch_len, cfg.h_out, cfg.quantiles.len());
    let keep = first.len().min(cfg.max_context);
    let mut ctx: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| c[c.len() - keep..].to_vec())
        .collect();
    let c = channels.len();
    let iterations = horizon.div_ceil(h_out);
    let mut paths: Vec<ForecastPath> = (0..c)
        .map(|_| ForecastPath {
            point: Vec::with_capacity(iterations * h_out),
            quantiles: vec![Vec::with_capacity(iterations * h_out); nq],
            iterations,
            cached_iterations: 0,
        })
        .collect();
    let freqs = vec![freq_index; c];
    let mut cache: Option<KvCache> = None;
    let mut cached_patches = 0;

    for it in 0..iterations {
        let refs: Vec<&[f64]> = ctx.iter().map(Vec::as_slice).collect();
        let full = PatchBatch::from_contexts(&refs, &freqs, p)?;
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let reuse = cache.is_some();
        let (batch, fwd) = match (use_cache, cache.as_mut()) {
            (true, Some(kv)) => {
                let b = full.tail(cached_patches);
                let f = model.forward(&mut tape, &vars, &b, Some(kv))?;
                (b, f)
            }
            (true, None) => {
                let mut kv = KvCache::default();
                let f = model.forward(&mut tape, &vars, &full, Some(&mut kv))?;
                cache = Some(kv);
                (full.clone(), f)
            }
            (false, _) => {
                let f = model.forward(&mut tape, &vars, &full, None)?;
                (full.clone(), f)
            }
        };
        cached_patches = full.n_patches;

        let point = tape.value(fwd.projected.point).data();
        let quant = fwd.projected.quantiles.map(|q| tape.value(q).data());
        let n = batch.n_patches;
        for (b, path) in paths.iter_mut().enumerate() {
            let tok = b * n + n - 1;
            let (mu, sigma) = (batch.mu[tok], batch.sigma[tok]);
            let row = &point[tok * h_out..(tok + 1) * h_out];
            let restored: Vec<f64> = row
                .iter()
                .map(|&x| denormalize_value(x, mu, sigma))
                .collect();
            if let Some(j) = restored.iter().position(|x| !x.is_finite()) {
                return Err(FincastError::NonFinite(format!(
                    "channel {b}, iteration {}, step {j}: normalized {} with mu {mu} sigma {sigma}",
                    it + 1,
                    row[j]
                )));
            }
            if let Some(q) = quant {
                for (qi, qpath) in path.quantiles.iter_mut().enumerate() {
                    let base = (tok * nq + qi) * h_out;
                    qpath.extend(
                        q[base..base + h_out]
                            .iter()
                            .map(|&x| denormalize_value(x, mu, sigma)),
                    );
                }
            }
            path.point.extend_from_slice(&restored);
            if reuse {
                path.cached_iterations += 1;
            }
            if it + 1 < iterations {
                ctx[b].extend_from_slice(&restored);
            }
        }

        if it + 1 < iterations {
            let len = ctx[0].len();
            let truncated = len > cfg.max_context;
            if truncated {
                for s in &mut ctx {
                    s.drain(..len - cfg.max_context);
                }
            }
            // appended patches must line up with the cached grid
            if truncated || h_out % p != 0 {
                cache = None;
            }
        }
    }

    for path in &mut paths {
        path.point.truncate(horizon);
        for q in &mut path.quantiles {
            q.truncate(horizon);
        }
    }
    Ok(paths)
}
