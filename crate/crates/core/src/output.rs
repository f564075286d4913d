//! Residual output head and inverse normalization.

use crate::error::{invalid, Result};
use crate::input::residual_mlp;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub skip_w: Var,
    pub skip_b: Var,
}

/// Point and quantile forecasts on the tape, normalized scale.
pub struct ProjectedVars {
    /// `[tokens, h_out]`
    pub point: Var,
    /// `[tokens, n_quantiles * h_out]`, quantile-major; `None` when no
    /// quantiles are configured.
    pub quantiles: Option<Var>,
}

/// Map hidden states `[tokens, d]` through the residual head. The output row
/// layout is `[point | q_1 | ... | q_|Q|]`, each block `h_out` wide.
pub fn project_outputs(
    tape: &mut Tape,
    hidden: Var,
    vars: &OutputVars,
    h_out: usize,
    n_quantiles: usize,
) -> Result<ProjectedVars> {
    let y = residual_mlp(
        tape,
        hidden,
        vars.hidden_w,
        vars.hidden_b,
        vars.out_w,
        vars.out_b,
        vars.skip_w,
        vars.skip_b,
    )?;
    let shape = tape.shape(y).to_vec();
    let (tokens, width) = (shape[0], shape[1]);
    if width != h_out * (1 + n_quantiles) {
        return invalid(format!(
            "output width {width} != h_out {h_out} x (1 + {n_quantiles})"
        ));
    }
    if n_quantiles == 0 {
        return Ok(ProjectedVars {
            point: y,
            quantiles: None,
        });
    }
    let point_idx: Vec<usize> = (0..tokens)
        .flat_map(|t| t * width..t * width + h_out)
        .collect();
    let point = tape.gather(y, point_idx, &[tokens, h_out])?;
    let q_idx: Vec<usize> = (0..tokens)
        .flat_map(|t| t * width + h_out..(t + 1) * width)
        .collect();
    let quantiles = tape.gather(y, q_idx, &[tokens, n_quantiles * h_out])?;
    Ok(ProjectedVars {
        point,
        quantiles: Some(quantiles),
    })
}

/// Per-token forecasts copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub batch: usize,
    pub n_tokens: usize,
    pub h_out: usize,
    pub n_quantiles: usize,
    /// `batch * n_tokens * h_out`
    pub point: Vec<f64>,
    /// `batch * n_tokens * n_quantiles * h_out`
    pub quantiles: Vec<f64>,
    /// Values are in the source series' units.
    pub restored: bool,
}

impl ForecastOutput {
    pub fn from_tape(
        tape: &Tape,
        proj: &ProjectedVars,
        batch: usize,
        n_tokens: usize,
        h_out: usize,
        n_quantiles: usize,
    ) -> Self {
        Self {
            batch,
            n_tokens,
            h_out,
            n_quantiles,
            point: tape.value(proj.point).data().to_vec(),
            quantiles: proj
                .quantiles
                .map(|q| tape.value(q).data().to_vec())
                .unwrap_or_default(),
            restored: false,
        }
    }

    pub fn point_row(&self, token: usize) -> &[f64] {
        &self.point[token * self.h_out..(token + 1) * self.h_out]
    }

    pub fn quantile_row(&self, token: usize, q: usize) -> &[f64] {
        let base = (token * self.n_quantiles + q) * self.h_out;
        &self.quantiles[base..base + self.h_out]
    }

    /// Fraction of adjacent quantile pairs that are out of order.
    pub fn crossing_rate(&self) -> f64 {
        crossing_rate(&self.quantiles, self.n_quantiles, self.h_out)
    }
}

/// `x ↦ x·σ_n + μ_n` for every point and quantile value of token `n`.
/// `mu`/`sigma` are indexed by global token (`batch * n_tokens`).
pub fn denormalize(out: &ForecastOutput, mu: &[f64], sigma: &[f64]) -> Result<ForecastOutput> {
    let tokens = out.batch * out.n_tokens;
    if mu.len() != tokens || sigma.len() != tokens {
        return invalid(format!(
            "missing patch statistics: {tokens} tokens, {} means, {} stds",
            mu.len(),
            sigma.len()
        ));
    }
    if out.restored {
        return invalid("forecast is already in original units");
    }
    let mut res = out.clone();
    for t in 0..tokens {
        let (m, s) = (mu[t], sigma[t]);
        for x in &mut res.point[t * out.h_out..(t + 1) * out.h_out] {
            *x = *x * s + m;
        }
        let w = out.n_quantiles * out.h_out;
        for x in &mut res.quantiles[t * w..(t + 1) * w] {
            *x = *x * s + m;
        }
    }
    res.restored = true;
    Ok(res)
}

/// Fraction of adjacent quantile pairs out of order, over rows laid out
/// `[.., n_quantiles, h]`.
pub fn crossing_rate(quantiles: &[f64], n_quantiles: usize, h: usize) -> f64 {
    if n_quantiles < 2 || quantiles.is_empty() {
        return 0.0;
    }
    let block = n_quantiles * h;
    let mut crossings = 0usize;
    let mut pairs = 0usize;
    for row in quantiles.chunks(block) {
        for qi in 1..n_quantiles {
            for t in 0..h {
                pairs += 1;
                if row[qi * h + t] < row[(qi - 1) * h + t] {
                    crossings += 1;
                }
            }
        }
    }
    crossings as f64 / pairs.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ForecastOutput {
        ForecastOutput {
            batch: 1,
            n_tokens: 1,
            h_out: 2,
            n_quantiles: 2,
            point: vec![1.5, 0.0],
            quantiles: vec![-1.0, -0.5, 1.0, 0.5],
            restored: false,
        }
    }

    #[test]
    fn denormalize_affine() {
        let out = denormalize(&sample(), &[10.0], &[2.0]).unwrap();
        assert_eq!(out.point, vec![13.0, 10.0]);
        assert_eq!(out.quantiles, vec![8.0, 9.0, 12.0, 11.0]);
        assert!(out.restored);
        // quantile order preserved
        assert!(out.quantile_row(0, 0)[0] < out.quantile_row(0, 1)[0]);
    }

    #[test]
    fn denormalize_needs_stats() {
        assert!(denormalize(&sample(), &[], &[]).is_err());
        let done = denormalize(&sample(), &[0.0], &[1.0]).unwrap();
        assert!(denormalize(&done, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn eps_sigma_gives_mean() {
        let mut s = sample();
        s.point = vec![0.0, 0.0];
        let out = denormalize(&s, &[7.0], &[crate::input::SIGMA_EPS]).unwrap();
        assert_eq!(out.point, vec![7.0, 7.0]);
    }

    #[test]
    fn crossings_counted() {
        assert_eq!(sample().crossing_rate(), 0.0);
        let mut s = sample();
        s.quantiles = vec![1.0, -0.5, 0.0, 0.5];
        assert_eq!(s.crossing_rate(), 0.5);
    }
}
