//! Point-quantile objective: Huber point loss, pinball quantile loss, trend
//! consistency on first differences, and the MoE balance / router-z terms.

use crate::backbone::{RouterTrace, RoutingStats};
use crate::config::LossWeights;
use crate::error::{invalid, FincastError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn huber_term(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber_term`] with respect to `e`.
pub fn huber_slope(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

pub fn pinball_term(pred: f64, y: f64, q: f64) -> f64 {
    if y >= pred {
        q * (y - pred)
    } else {
        (1.0 - q) * (pred - y)
    }
}

pub fn huber_point(yhat: &[f64], y: &[f64], delta: f64) -> f64 {
    let n = yhat.len().max(1) as f64;
    yhat.iter()
        .zip(y)
        .map(|(p, t)| huber_term(p - t, delta))
        .sum::<f64>()
        / n
}

/// `Σ_q mean_t pinball` with `yhat_q` laid out `[|Q|, H]`.
pub fn quantile_loss(yhat_q: &[f64], y: &[f64], quantiles: &[f64]) -> Result<f64> {
    let h = y.len();
    if yhat_q.len() != quantiles.len() * h {
        return Err(FincastError::Shape {
            op: "quantile_loss",
            left: vec![quantiles.len(), h],
            right: vec![yhat_q.len()],
        });
    }
    let mut total = 0.0;
    for (qi, &q) in quantiles.iter().enumerate() {
        let row = &yhat_q[qi * h..(qi + 1) * h];
        total += row
            .iter()
            .zip(y)
            .map(|(&p, &t)| pinball_term(p, t, q))
            .sum::<f64>()
            / h.max(1) as f64;
    }
    Ok(total)
}

/// Mean squared mismatch of first differences; 0 when `H < 2`.
pub fn trend_loss(yhat: &[f64], y: &[f64]) -> f64 {
    if yhat.len() < 2 {
        return 0.0;
    }
    let n = (yhat.len() - 1) as f64;
    yhat.windows(2)
        .zip(y.windows(2))
        .map(|(p, t)| {
            let d = (p[1] - p[0]) - (t[1] - t[0]);
            d * d
        })
        .sum::<f64>()
        / n
}

/// `(balance, router_z)` for one layer's routing counters.
pub fn moe_aux_loss(stats: &RoutingStats) -> Result<(f64, f64)> {
    if stats.tokens == 0 {
        return invalid("routing statistics cover zero tokens");
    }
    let f = stats.assignment_fraction();
    let p = stats.mean_prob();
    let balance = stats.n_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let router_z = stats.z_sum / stats.tokens as f64;
    Ok((balance, router_z))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub point: f64,
    pub quantile: f64,
    pub trend: f64,
    pub balance: f64,
    pub router_z: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.point
            + w.lambda_quantile * self.quantile
            + w.lambda_trend * self.trend
            + w.lambda_moe * (self.balance + self.router_z)
    }
}

/// Normalized targets for every token's next-`h_out` window.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub tokens: usize,
    pub h_out: usize,
    /// `tokens * h_out`
    pub values: Vec<f64>,
    /// Positions that contribute to the loss.
    pub valid: Vec<bool>,
}

impl LossTargets {
    pub fn all_valid(tokens: usize, h_out: usize, values: Vec<f64>) -> Self {
        let valid = vec![true; values.len()];
        Self {
            tokens,
            h_out,
            values,
            valid,
        }
    }
}

/// Build the weighted objective on the tape. Point and quantile terms are
/// averaged over valid target positions, the trend term over valid
/// consecutive pairs, and the MoE terms over layers.
pub fn total_loss(
    tape: &mut Tape,
    point: Var,
    quantiles: Option<Var>,
    quantile_levels: &[f64],
    targets: &LossTargets,
    traces: &[RouterTrace],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = targets.tokens * targets.h_out;
    let h = targets.h_out;
    if tape.value(point).numel() != n || targets.values.len() != n || targets.valid.len() != n {
        return Err(FincastError::Shape {
            op: "total_loss",
            left: tape.shape(point).to_vec(),
            right: vec![targets.tokens, targets.h_out],
        });
    }
    let count = targets.valid.iter().filter(|&&v| v).count();
    let w: Vec<f64> = targets
        .valid
        .iter()
        .map(|&v| {
            if v && count > 0 {
                1.0 / count as f64
            } else {
                0.0
            }
        })
        .collect();

    let point_term = if weights.mse_point {
        let y = tape.constant(Tensor::new(tape.shape(point), targets.values.clone())?);
        let e = tape.sub(point, y)?;
        let sq = tape.square(e);
        tape.weighted_sum(sq, w.clone())?
    } else {
        let terms = tape.huber(point, targets.values.clone(), weights.delta)?;
        tape.weighted_sum(terms, w.clone())?
    };

    let quantile_term = match quantiles {
        Some(qv) if !quantile_levels.is_empty() => {
            let nq = quantile_levels.len();
            if tape.value(qv).numel() != n * nq {
                return Err(FincastError::Shape {
                    op: "total_loss",
                    left: tape.shape(qv).to_vec(),
                    right: vec![targets.tokens, nq * h],
                });
            }
            let mut tgt = Vec::with_capacity(n * nq);
            let mut lv = Vec::with_capacity(n * nq);
            let mut qw = Vec::with_capacity(n * nq);
            for t in 0..targets.tokens {
                for &q in quantile_levels {
                    tgt.extend_from_slice(&targets.values[t * h..(t + 1) * h]);
                    lv.extend(std::iter::repeat_n(q, h));
                    qw.extend_from_slice(&w[t * h..(t + 1) * h]);
                }
            }
            let terms = tape.pinball(qv, tgt, lv)?;
            Some(tape.weighted_sum(terms, qw)?)
        }
        Some(_) => return invalid("quantile outputs given without quantile levels"),
        None => None,
    };

    let trend_term = if h >= 2 {
        let mut cur = Vec::new();
        let mut prev = Vec::new();
        let mut dy = Vec::new();
        for t in 0..targets.tokens {
            for s in 1..h {
                let (i, j) = (t * h + s, t * h + s - 1);
                if targets.valid[i] && targets.valid[j] {
                    cur.push(i);
                    prev.push(j);
                    dy.push(targets.values[i] - targets.values[j]);
                }
            }
        }
        if cur.is_empty() {
            None
        } else {
            let m = cur.len();
            let a = tape.gather(point, cur, &[m])?;
            let b = tape.gather(point, prev, &[m])?;
            let d = tape.sub(a, b)?;
            let dy = tape.constant(Tensor::from_vec(dy));
            let e = tape.sub(d, dy)?;
            let sq = tape.square(e);
            Some(tape.weighted_sum(sq, vec![1.0 / m as f64; m])?)
        }
    } else {
        None
    };

    let mut balance_terms = Vec::new();
    let mut z_terms = Vec::new();
    for tr in traces {
        let e = tr.stats.n_experts as f64;
        let pbar = tape.mean_rows(tr.probs);
        let fbar: Vec<f64> = tr
            .stats
            .assignment_fraction()
            .iter()
            .map(|f| e * f / traces.len() as f64)
            .collect();
        balance_terms.push(tape.weighted_sum(pbar, fbar)?);
        let lse = tape.logsumexp(tr.logits);
        let sq = tape.square(lse);
        let tokens = tape.value(sq).numel();
        let zw = vec![1.0 / (tokens.max(1) * traces.len()) as f64; tokens];
        z_terms.push(tape.weighted_sum(sq, zw)?);
    }
    let sum_all = |tape: &mut Tape, xs: &[Var]| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &x in xs {
            acc = Some(match acc {
                None => x,
                Some(a) => tape.add(a, x)?,
            });
        }
        Ok(acc)
    };
    let balance = sum_all(tape, &balance_terms)?;
    let router_z = sum_all(tape, &z_terms)?;

    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let breakdown_parts = (
        tape.value(point_term).item(),
        value(tape, quantile_term),
        value(tape, trend_term),
        value(tape, balance),
        value(tape, router_z),
    );

    let mut total = point_term;
    for (term, lambda) in [
        (quantile_term, weights.lambda_quantile),
        (trend_term, weights.lambda_trend),
        (balance, weights.lambda_moe),
        (router_z, weights.lambda_moe),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, lambda);
            total = tape.add(total, scaled)?;
        }
    }
    let breakdown = LossBreakdown {
        point: breakdown_parts.0,
        quantile: breakdown_parts.1,
        trend: breakdown_parts.2,
        balance: breakdown_parts.3,
        router_z: breakdown_parts.4,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber_point(&[0.5], &[0.0], 1.0), 0.125);
        assert_eq!(huber_point(&[2.0], &[0.0], 1.0), 1.5);
        assert_eq!(huber_point(&[1.0, 2.0], &[1.0, 2.0], 1.0), 0.0);
    }

    #[test]
    fn huber_c1_at_delta() {
        for delta in [0.3f64, 1.0, 2.5] {
            // both branch formulas evaluated exactly at |e| = δ
            let quad = 0.5 * delta * delta;
            let lin = delta * (delta - 0.5 * delta);
            assert!((quad - lin).abs() < 1e-12);
            // derivative: e from the quadratic side, δ·sign(e) from the linear side
            assert!((huber_slope(delta, delta) - delta * 1f64.signum()).abs() < 1e-12);
            let below = huber_slope(delta - 1e-13, delta);
            let above = huber_slope(delta + 1e-13, delta);
            assert!((below - above).abs() < 1e-12);
        }
    }

    #[test]
    fn pinball_branches() {
        assert!((quantile_loss(&[0.0], &[1.0], &[0.9]).unwrap() - 0.9).abs() < 1e-15);
        assert!((quantile_loss(&[1.0], &[0.0], &[0.9]).unwrap() - 0.1).abs() < 1e-15);
        assert!(quantile_loss(&[1.0], &[0.0, 1.0], &[0.9]).is_err());
    }

    #[test]
    fn trend_examples() {
        assert_eq!(trend_loss(&[0.0, 1.0], &[0.0, 0.0]), 1.0);
        assert_eq!(trend_loss(&[3.0], &[1.0]), 0.0);
        assert_eq!(trend_loss(&[1.0, 4.0, 2.0], &[1.0, 4.0, 2.0]), 0.0);
    }

    #[test]
    fn aux_uniform_and_zero_logits() {
        let mut s = RoutingStats::new(4, 2);
        s.tokens = 8;
        s.counts = vec![4, 4, 4, 4];
        s.prob_sum = vec![2.0; 4];
        s.z_sum = 8.0 * 4f64.ln().powi(2);
        let (b, z) = moe_aux_loss(&s).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        assert!((z - 1.921812).abs() < 1e-6);
        assert!(moe_aux_loss(&RoutingStats::new(4, 2)).is_err());
    }

    #[test]
    fn aux_collapse_approaches_e() {
        let mut s = RoutingStats::new(4, 1);
        s.tokens = 10;
        s.counts = vec![10, 0, 0, 0];
        s.prob_sum = vec![10.0 * (1.0 - 3e-9), 1e-8, 1e-8, 1e-8];
        let (b, _) = moe_aux_loss(&s).unwrap();
        assert!((b - 4.0).abs() < 1e-7);
    }

    #[test]
    fn balance_can_fall_below_one() {
        // Top-1 over two experts: two tokens barely prefer expert 0, one token
        // is certain of expert 1. f̄ = (2/3, 1/3), p̄ = (0.34, 0.66).
        let mut s = RoutingStats::new(2, 1);
        s.tokens = 3;
        s.counts = vec![2, 1];
        s.prob_sum = vec![0.51 + 0.51 + 0.0, 0.49 + 0.49 + 1.0];
        let (b, _) = moe_aux_loss(&s).unwrap();
        assert!(b < 1.0 && b > 0.0);
    }

    proptest! {
        #[test]
        fn pinball_median_is_half_mae(
            pred in proptest::collection::vec(-10f64..10.0, 1..20),
            seed in proptest::collection::vec(-10f64..10.0, 20),
        ) {
            let y = &seed[..pred.len()];
            let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
            let pin = quantile_loss(&pred, y, &[0.5]).unwrap();
            prop_assert!((pin - 0.5 * mae).abs() < 1e-12);
        }

        #[test]
        fn trend_translation_invariant(
            pred in proptest::collection::vec(-1_000_000i64..1_000_000, 2..20),
            c in -1_000_000i64..1_000_000,
        ) {
            // dyadic grid: every sum and difference below is exact
            let pred: Vec<f64> = pred.iter().map(|&x| x as f64 / 1024.0).collect();
            let y: Vec<f64> = pred.iter().rev().copied().collect();
            let c = c as f64 / 1024.0;
            let shifted: Vec<f64> = pred.iter().map(|x| x + c).collect();
            prop_assert_eq!(trend_loss(&pred, &y), trend_loss(&shifted, &y));
        }

        #[test]
        fn balance_upper_bound(
            counts in proptest::collection::vec(0usize..50, 4),
            probs in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let tokens: usize = counts.iter().sum::<usize>().max(1);
            let ps: f64 = probs.iter().sum::<f64>().max(1e-9);
            let mut s = RoutingStats::new(4, 1);
            s.tokens = tokens;
            s.counts = counts.clone();
            s.prob_sum = probs.iter().map(|p| p / ps * tokens as f64).collect();
            let (b, z) = moe_aux_loss(&s).unwrap();
            prop_assert!((0.0..=4.0 + 1e-12).contains(&b));
            prop_assert!(z >= 0.0);
        }
    }
}
