//! Model-level checks: gradient verification of the full training objective
//! and expert-routing breakdowns by label.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::input::PatchBatch;
use crate::loss::total_loss;
use crate::model::FinCast;
use crate::tensor::{grad_check_coords, GradCheckReport, Tape, Var};
use crate::trainer::build_training_batch;

/// Central-difference check of the composite loss (point, quantile, trend
/// and MoE terms) on a small random batch.
///
/// Coordinates whose finite-difference bracket flips a discrete decision
/// (loss branch or expert choice) are set aside and replaced by fresh draws
/// until `n_coords` smooth coordinates have been checked, or the draw budget
/// runs out.
pub fn composite_gradcheck(
    run: &RunConfig,
    n_coords: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let model = FinCast::new(run.effective_model(), seed)?;
    let cfg = model.config().clone();
    let weights = run.effective_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ctx = run.train.context_len;
    let len = ctx + cfg.h_out;
    let windows: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let phase = rng.gen_range(0.0..6.0);
            (0..len)
                .map(|t| (t as f64 * 0.21 + phase).sin() + 0.3 * rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let refs: Vec<(&[f64], usize)> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_slice(), (i + 1) % cfg.freq_table_size))
        .collect();
    let (batch, targets) = build_training_batch(
        &refs,
        ctx,
        cfg.patch_len,
        cfg.h_out,
        run.train.mask_ratio,
        &mut rng,
    )?;

    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = model.forward(tape, vars, &batch, None)?;
        let (loss, _) = total_loss(
            tape,
            out.projected.point,
            out.projected.quantiles,
            &cfg.quantiles,
            &targets,
            &out.traces,
            &weights,
        )?;
        Ok(loss)
    };

    let params = model.params().tensors();
    let total: usize = params.iter().map(|t| t.numel()).sum();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= params[p].numel() {
            flat -= params[p].numel();
            p += 1;
        }
        (p, flat)
    };
    let mut checked = Vec::new();
    let mut kinks = Vec::new();
    for _ in 0..20 {
        let need = n_coords - checked.len();
        if need == 0 {
            break;
        }
        let coords: Vec<(usize, usize)> = (0..need).map(|_| draw(&mut rng)).collect();
        let rep = grad_check_coords(f, params, &coords, h, tol)?;
        for c in rep.coords {
            if c.kink {
                kinks.push(c);
            } else {
                checked.push(c);
            }
        }
    }
    let max_rel_err = checked.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let passed = checked.len() == n_coords
        && checked.iter().all(|c| c.finite && c.rel_err < tol)
        && kinks.iter().all(|c| c.finite);
    let kinks_skipped = kinks.len();
    checked.extend(kinks);
    Ok(GradCheckReport {
        coords: checked,
        max_rel_err,
        tol,
        kinks_skipped,
        passed,
    })
}

/// Expert assignment fractions for one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub overall: Vec<f64>,
    /// Fractions per label.
    pub by_label: BTreeMap<usize, Vec<f64>>,
    /// Largest total-variation distance between two labels' distributions.
    pub max_tv: f64,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Route every patch of the given contexts and tabulate chosen experts by
/// label. A token takes the label of its patch's last point. Contexts must
/// share one length.
pub fn routing_by_label(
    model: &FinCast,
    contexts: &[(&[f64], usize, &[usize])],
    chunk: usize,
) -> Result<Vec<LayerRouting>> {
    let cfg = model.config();
    let Some(first) = contexts.first() else {
        return invalid("no contexts to route");
    };
    let len = first.0.len();
    if contexts
        .iter()
        .any(|c| c.0.len() != len || c.2.len() != len)
    {
        return invalid("contexts and labels must share one length");
    }
    let e = cfg.n_experts;
    let mut overall = vec![vec![0usize; e]; cfg.n_layers];
    let mut by_label: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); cfg.n_layers];
    for part in contexts.chunks(chunk.max(1)) {
        let values: Vec<&[f64]> = part.iter().map(|c| c.0).collect();
        let freqs: Vec<usize> = part.iter().map(|c| c.1).collect();
        let batch = PatchBatch::from_contexts(&values, &freqs, cfg.patch_len)?;
        let pad = batch.n_patches * cfg.patch_len - len;
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &batch, None)?;
        for (l, trace) in out.traces.iter().enumerate() {
            let k = trace.stats.top_k;
            for (b, c) in part.iter().enumerate() {
                for t in 0..batch.n_patches {
                    let last = (t + 1) * cfg.patch_len - 1 - pad;
                    let label = c.2[last];
                    let tok = b * batch.n_patches + t;
                    let row = by_label[l].entry(label).or_insert_with(|| vec![0; e]);
                    for &x in &trace.stats.chosen[tok * k..(tok + 1) * k] {
                        row[x] += 1;
                        overall[l][x] += 1;
                    }
                }
            }
        }
    }
    let norm = |c: &[usize]| {
        let s = c.iter().sum::<usize>().max(1) as f64;
        c.iter().map(|&x| x as f64 / s).collect::<Vec<f64>>()
    };
    Ok(overall
        .iter()
        .zip(by_label)
        .map(|(o, groups)| {
            let by_label: BTreeMap<usize, Vec<f64>> =
                groups.iter().map(|(&g, c)| (g, norm(c))).collect();
            let dists: Vec<&Vec<f64>> = by_label.values().collect();
            let mut max_tv = 0.0f64;
            for i in 0..dists.len() {
                for j in i + 1..dists.len() {
                    max_tv = max_tv.max(total_variation(dists[i], dists[j]));
                }
            }
            LayerRouting {
                overall: norm(o),
                by_label,
                max_tv,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_run() -> RunConfig {
        let mut r = RunConfig::default();
        r.model = ModelConfig {
            patch_len: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            expert_hidden: 6,
            input_hidden: 6,
            output_hidden: 6,
            h_out: 4,
            quantiles: vec![0.1, 0.5, 0.9],
            ..ModelConfig::default()
        };
        r.train.context_len = 12;
        r
    }

    #[test]
    fn tiny_composite_gradcheck_passes() {
        let rep = composite_gradcheck(&tiny_run(), 60, 5, 1e-3, 1e-4).unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn tv_distance() {
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn routing_counts_every_token() {
        let run = tiny_run();
        let m = FinCast::new(run.effective_model(), 1).unwrap();
        let a: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let la = vec![0; 10];
        let lb = vec![1; 10];
        let r = routing_by_label(&m, &[(&a, 3, &la), (&a, 2, &lb)], 1).unwrap();
        assert_eq!(r.len(), 2);
        for layer in &r {
            assert!((layer.overall.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(layer.by_label.len(), 2);
        }
    }
}
