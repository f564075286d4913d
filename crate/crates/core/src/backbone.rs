//! Pre-norm decoder blocks: RMSNorm, causal self-attention with learned
//! per-dimension query scaling, and a token-level top-k mixture of experts.

use std::f64::consts::LOG2_E;

use crate::error::{invalid, Result};
use crate::tensor::{softmax_row, Tape, Tensor, Var};

/// Additive value for forbidden attention entries.
pub const MASK_VALUE: f64 = -1e9;

/// `γ ⊙ h / sqrt(mean(h²) + eps)` over the last axis.
pub fn rmsnorm(tape: &mut Tape, h: Var, gamma: Var, eps: f64) -> Result<Var> {
    let sq = tape.square(h);
    let ms = tape.mean_last(sq);
    let ms = tape.add_scalar(ms, eps);
    let rms = tape.sqrt(ms);
    let y = tape.div_col(h, rms)?;
    tape.mul_row(y, gamma)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_qkv: Var,
    pub alpha: Var,
    pub w_o: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub moe_norm: Var,
    pub gate: Var,
    pub experts: Vec<ExpertVars>,
}

/// Which key positions each query may attend to, per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub n_query: usize,
    pub n_key: usize,
    /// `batch * n_query * n_key` additive entries (0 or [`MASK_VALUE`]).
    pub additive: Vec<f64>,
}

impl AttentionMask {
    /// Causal mask for `n_new` queries following `n_past` cached keys.
    /// `padded[b * (n_past + n_new) + j]` marks key `j` of sequence `b` as a
    /// fully masked patch; such keys are hidden from every other query.
    pub fn causal(batch: usize, n_past: usize, n_new: usize, padded: &[bool]) -> Result<Self> {
        let n_key = n_past + n_new;
        if padded.len() != batch * n_key {
            return invalid(format!(
                "padding flags: expected {} entries, got {}",
                batch * n_key,
                padded.len()
            ));
        }
        let mut additive = vec![MASK_VALUE; batch * n_new * n_key];
        for b in 0..batch {
            for i in 0..n_new {
                let qpos = n_past + i;
                let row = &mut additive[(b * n_new + i) * n_key..(b * n_new + i + 1) * n_key];
                for (j, slot) in row.iter_mut().enumerate().take(qpos + 1) {
                    if j == qpos || !padded[b * n_key + j] {
                        *slot = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            batch,
            n_query: n_new,
            n_key,
            additive,
        })
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.additive[(b * self.n_query + i) * self.n_key + j] == 0.0
    }
}

/// Keys and values of already-processed tokens for one layer, laid out
/// `[batch * heads, n, head_dim]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub n: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Fully-masked flags of cached tokens, `batch * n`.
    pub padded: Vec<bool>,
    pub batch: usize,
}

impl KvCache {
    pub fn cached_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n)
    }
}

pub struct AttentionOutput {
    pub output: Var,
    pub new_keys: Vec<f64>,
    pub new_values: Vec<f64>,
}

/// Indices that pull head `h` out of a `[batch*n, 3*d]` projection into
/// `[batch*heads, n, head_dim]` for block `part` (0 = Q, 1 = K, 2 = V).
fn split_heads_index(batch: usize, n: usize, heads: usize, dh: usize, part: usize) -> Vec<usize> {
    let d = heads * dh;
    let mut idx = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..n {
                let base = (b * n + t) * 3 * d + part * d + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx
}

/// Causal multi-head attention over `h_norm: [batch*n_new, d]`.
///
/// With a non-empty `past`, the new queries also attend to the cached keys
/// and values; the returned `new_keys`/`new_values` cover the new tokens
/// only.
pub fn causal_attention(
    tape: &mut Tape,
    h_norm: Var,
    vars: &AttentionVars,
    heads: usize,
    mask: &AttentionMask,
    past: Option<&LayerCache>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(h_norm).to_vec();
    let d = shape[1];
    let dh = d / heads;
    let (batch, n_new) = (mask.batch, mask.n_query);
    let n_past = past.map_or(0, |p| p.n);
    if shape[0] != batch * n_new || mask.n_key != n_past + n_new {
        return invalid(format!(
            "attention: {} rows for batch {batch} x {n_new} tokens with {n_past} cached",
            shape[0]
        ));
    }
    let qkv = tape.matmul(h_norm, vars.w_qkv)?;
    let bh = batch * heads;
    let q = tape.gather(
        qkv,
        split_heads_index(batch, n_new, heads, dh, 0),
        &[bh, n_new, dh],
    )?;
    let k_new = tape.gather(
        qkv,
        split_heads_index(batch, n_new, heads, dh, 1),
        &[bh, n_new, dh],
    )?;
    let v_new = tape.gather(
        qkv,
        split_heads_index(batch, n_new, heads, dh, 2),
        &[bh, n_new, dh],
    )?;

    // Q' = Q ⊙ (log2(e)/sqrt(d_q) · softplus(α))
    let sp = tape.softplus(vars.alpha);
    let scale = tape.scale(sp, LOG2_E / (dh as f64).sqrt());
    let q = tape.mul_row(q, scale)?;

    let (k_all, v_all) = match past {
        Some(cache) if cache.n > 0 => {
            let n_key = n_past + n_new;
            let kp = tape.constant(Tensor::new(&[bh * n_past, dh], cache.keys.clone())?);
            let vp = tape.constant(Tensor::new(&[bh * n_past, dh], cache.values.clone())?);
            let kn = tape.reshape(k_new, &[bh * n_new, dh])?;
            let vn = tape.reshape(v_new, &[bh * n_new, dh])?;
            let mut idx = Vec::with_capacity(bh * n_key * dh);
            let past_total = bh * n_past * dh;
            for g in 0..bh {
                for j in 0..n_key {
                    let base = if j < n_past {
                        (g * n_past + j) * dh
                    } else {
                        past_total + (g * n_new + j - n_past) * dh
                    };
                    idx.extend(base..base + dh);
                }
            }
            let kc = tape.concat(&[kp, kn])?;
            let vc = tape.concat(&[vp, vn])?;
            let k_all = tape.gather(kc, idx.clone(), &[bh, n_key, dh])?;
            let v_all = tape.gather(vc, idx, &[bh, n_key, dh])?;
            (k_all, v_all)
        }
        _ => (k_new, v_new),
    };

    let logits = tape.bmm(q, k_all, true)?;
    let mut additive = Vec::with_capacity(bh * n_new * mask.n_key);
    for b in 0..batch {
        let rows = &mask.additive[b * n_new * mask.n_key..(b + 1) * n_new * mask.n_key];
        for _ in 0..heads {
            additive.extend_from_slice(rows);
        }
    }
    let m = tape.constant(Tensor::new(&[bh, n_new, mask.n_key], additive)?);
    let logits = tape.add(logits, m)?;
    let scores = tape.softmax(logits);
    let ctx = tape.bmm(scores, v_all, false)?;

    let mut merge = Vec::with_capacity(batch * n_new * d);
    for b in 0..batch {
        for t in 0..n_new {
            for h in 0..heads {
                let base = ((b * heads + h) * n_new + t) * dh;
                merge.extend(base..base + dh);
            }
        }
    }
    let merged = tape.gather(ctx, merge, &[batch * n_new, d])?;
    let output = tape.matmul(merged, vars.w_o)?;
    Ok(AttentionOutput {
        output,
        new_keys: tape.value(k_new).data().to_vec(),
        new_values: tape.value(v_new).data().to_vec(),
    })
}

/// Top-k gates for one token. Ties go to the lower expert index.
/// Returns `(gates, chosen)` where `gates` keeps the softmax value for the
/// chosen experts and zero elsewhere (no renormalization).
pub fn moe_gate(logits: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let e = logits.len();
    if k == 0 || k > e {
        return invalid(format!("need 1 <= k <= E, got k={k}, E={e}"));
    }
    let mut probs = vec![0.0; e];
    softmax_row(logits, &mut probs);
    let chosen = top_k(&probs, k);
    let mut gates = vec![0.0; e];
    for &i in &chosen {
        gates[i] = probs[i];
    }
    Ok((gates, chosen))
}

/// Indices of the `k` largest entries, descending, ties by lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Routing counters for one MoE layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    pub n_experts: usize,
    pub top_k: usize,
    pub tokens: usize,
    /// Assignments per expert; sums to `top_k * tokens`.
    pub counts: Vec<usize>,
    /// Sum of softmax probabilities per expert over all tokens.
    pub prob_sum: Vec<f64>,
    /// Sum over tokens of `(log Σ exp logits)²`.
    pub z_sum: f64,
    /// Chosen experts per token, `tokens * top_k`, descending gate order.
    pub chosen: Vec<usize>,
}

impl RoutingStats {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        Self {
            n_experts,
            top_k,
            counts: vec![0; n_experts],
            prob_sum: vec![0.0; n_experts],
            ..Default::default()
        }
    }

    /// Assignment fraction per expert, normalized by `top_k * tokens`.
    pub fn assignment_fraction(&self) -> Vec<f64> {
        let denom = (self.top_k * self.tokens).max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    pub fn mean_prob(&self) -> Vec<f64> {
        let denom = self.tokens.max(1) as f64;
        self.prob_sum.iter().map(|&p| p / denom).collect()
    }

    pub fn merge(&mut self, other: &RoutingStats) -> Result<()> {
        if self.n_experts != other.n_experts || self.top_k != other.top_k {
            return invalid("cannot merge routing stats of different layouts");
        }
        self.tokens += other.tokens;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sum.iter_mut().zip(&other.prob_sum) {
            *a += b;
        }
        self.z_sum += other.z_sum;
        self.chosen.extend_from_slice(&other.chosen);
        Ok(())
    }
}

/// Differentiable router outputs kept for the auxiliary losses.
#[derive(Clone, Debug)]
pub struct RouterTrace {
    pub logits: Var,
    pub probs: Var,
    pub stats: RoutingStats,
}

/// Expert MLP without an internal skip: `W2·silu(W1 x + b1) + b2`.
pub fn expert_mlp(tape: &mut Tape, x: Var, e: &ExpertVars) -> Result<Var> {
    let h = tape.matmul(x, e.w1)?;
    let h = tape.add_row(h, e.b1)?;
    let h = tape.silu(h);
    let o = tape.matmul(h, e.w2)?;
    tape.add_row(o, e.b2)
}

/// `Σ_i g_i · MLP_i(x)` over the retained experts, for `x: [tokens, d]`.
pub fn moe_layer(
    tape: &mut Tape,
    x: Var,
    gate_w: Var,
    experts: &[ExpertVars],
    k: usize,
) -> Result<(Var, RouterTrace)> {
    let shape = tape.shape(x).to_vec();
    let (tokens, d) = (shape[0], shape[1]);
    let e = experts.len();
    if k == 0 || k > e {
        return invalid(format!("need 1 <= k <= E, got k={k}, E={e}"));
    }
    let logits = tape.matmul(x, gate_w)?;
    let probs = tape.softmax(logits);

    let mut stats = RoutingStats::new(e, k);
    stats.tokens = tokens;
    let mut keep = vec![0.0; tokens * e];
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); e];
    {
        let pv = tape.value(probs).data();
        let lv = tape.value(logits).data();
        for t in 0..tokens {
            let row = &pv[t * e..(t + 1) * e];
            let chosen = top_k(row, k);
            for &i in &chosen {
                keep[t * e + i] = 1.0;
                routed[i].push(t);
                stats.counts[i] += 1;
            }
            for (s, &p) in stats.prob_sum.iter_mut().zip(row) {
                *s += p;
            }
            let lse = crate::tensor::logsumexp_row(&lv[t * e..(t + 1) * e]);
            stats.z_sum += lse * lse;
            stats.chosen.extend_from_slice(&chosen);
        }
    }
    tape.note_branch(stats.chosen.iter().map(|&c| c as u64));
    let keep = tape.constant(Tensor::new(&[tokens, e], keep)?);
    let gates = tape.mul(probs, keep)?;

    let mut out: Option<Var> = None;
    for (i, expert) in experts.iter().enumerate() {
        let rows = &routed[i];
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let gather: Vec<usize> = rows.iter().flat_map(|&t| t * d..(t + 1) * d).collect();
        let xi = tape.gather(x, gather.clone(), &[n, d])?;
        let yi = expert_mlp(tape, xi, expert)?;
        let gi = tape.gather(gates, rows.iter().map(|&t| t * e + i).collect(), &[n])?;
        let yi = tape.mul_col(yi, gi)?;
        let contrib = tape.scatter_add(yi, gather, &[tokens, d])?;
        out = Some(match out {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let out = match out {
        Some(o) => o,
        None => tape.constant(Tensor::zeros(&[tokens, d])),
    };
    Ok((
        out,
        RouterTrace {
            logits,
            probs,
            stats,
        },
    ))
}

pub struct BlockOutput {
    pub hidden: Var,
    pub trace: RouterTrace,
    pub new_keys: Vec<f64>,
    pub new_values: Vec<f64>,
}

/// One decoder block:
/// `h = h + Attn(RMSNorm(h)); h' = h + MoE(RMSNorm(h))`.
pub fn decoder_block(
    tape: &mut Tape,
    h: Var,
    vars: &BlockVars,
    heads: usize,
    k: usize,
    eps: f64,
    mask: &AttentionMask,
    past: Option<&LayerCache>,
) -> Result<BlockOutput> {
    let hn = rmsnorm(tape, h, vars.attn_norm, eps)?;
    let attn = causal_attention(tape, hn, &vars.attn, heads, mask, past)?;
    let h = tape.add(h, attn.output)?;
    let hn = rmsnorm(tape, h, vars.moe_norm, eps)?;
    let (moe, trace) = moe_layer(tape, hn, vars.gate, &vars.experts, k)?;
    let hidden = tape.add(h, moe)?;
    Ok(BlockOutput {
        hidden,
        trace,
        new_keys: attn.new_keys,
        new_values: attn.new_values,
    })
}

pub struct StackOutput {
    pub hidden: Var,
    pub traces: Vec<RouterTrace>,
}

impl StackOutput {
    /// Routing counters merged across layers.
    pub fn overall_stats(&self) -> Result<RoutingStats> {
        let mut it = self.traces.iter();
        let Some(first) = it.next() else {
            return invalid("no layers");
        };
        let mut total = first.stats.clone();
        for t in it {
            total.merge(&t.stats)?;
        }
        Ok(total)
    }
}

/// Apply blocks in order. When `cache` is given, `h_input` holds only the new
/// tokens, the cached keys/values are attended to and then extended.
pub fn decoder_stack(
    tape: &mut Tape,
    h_input: Var,
    blocks: &[BlockVars],
    heads: usize,
    k: usize,
    eps: f64,
    mask: &AttentionMask,
    mut cache: Option<&mut KvCache>,
) -> Result<StackOutput> {
    if blocks.is_empty() {
        return invalid("decoder stack needs at least one block");
    }
    let mut h = h_input;
    let mut traces = Vec::with_capacity(blocks.len());
    for (l, block) in blocks.iter().enumerate() {
        let past = cache.as_deref().and_then(|c| c.layers.get(l));
        let out = decoder_block(tape, h, block, heads, k, eps, mask, past)?;
        if let Some(c) = cache.as_deref_mut() {
            if c.layers.len() <= l {
                c.layers.resize(l + 1, LayerCache::default());
            }
            append_layer_cache(
                &mut c.layers[l],
                mask,
                heads,
                &out.new_keys,
                &out.new_values,
            );
        }
        h = out.hidden;
        traces.push(out.trace);
    }
    Ok(StackOutput { hidden: h, traces })
}

fn append_layer_cache(
    layer: &mut LayerCache,
    mask: &AttentionMask,
    heads: usize,
    new_keys: &[f64],
    new_values: &[f64],
) {
    let bh = mask.batch * heads;
    let n_new = mask.n_query;
    let n_old = layer.n;
    let dh = new_keys.len() / (bh * n_new).max(1);
    let merge = |old: &[f64], new: &[f64]| {
        let mut out = Vec::with_capacity(old.len() + new.len());
        for g in 0..bh {
            out.extend_from_slice(&old[g * n_old * dh..(g + 1) * n_old * dh]);
            out.extend_from_slice(&new[g * n_new * dh..(g + 1) * n_new * dh]);
        }
        out
    };
    layer.keys = merge(&layer.keys, new_keys);
    layer.values = merge(&layer.values, new_values);
    layer.n = n_old + n_new;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_worked_example() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let y = rmsnorm(&mut tape, h, g, 1e-300).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.848528).abs() < 1e-6);
        assert!((v[1] - 1.131371).abs() < 1e-6);

        let g2 = tape.constant(Tensor::from_vec(vec![2.0, 2.0]));
        let y2 = rmsnorm(&mut tape, h, g2, 1e-300).unwrap();
        let v2 = tape.value(y2).data().to_vec();
        let v = tape.value(y).data();
        assert_eq!(v2, vec![2.0 * v[0], 2.0 * v[1]]);

        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let y = rmsnorm(&mut tape, z, g, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gate_worked_example() {
        let (g, chosen) = moe_gate(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        let expect = [0.643914, 0.236883, 0.0, 0.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{g:?}");
        }
        assert_eq!(chosen, vec![0, 1]);
    }

    #[test]
    fn gate_full_k_is_softmax() {
        let (g, _) = moe_gate(&[0.3, -2.0, 1.1, 0.0], 4).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn gate_ties_prefer_lower_index() {
        let (g, chosen) = moe_gate(&[0.5; 4], 2).unwrap();
        assert_eq!(chosen, vec![0, 1]);
        assert_eq!(g, vec![0.25, 0.25, 0.0, 0.0]);
        assert!(moe_gate(&[0.0; 4], 0).is_err());
        assert!(moe_gate(&[0.0; 4], 5).is_err());
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(1, 0, 3, &[false, false, false]).unwrap();
        assert!(m.allowed(0, 0, 0) && !m.allowed(0, 0, 1));
        assert!(m.allowed(0, 2, 0) && m.allowed(0, 2, 2));
        // padded key 0 is hidden from later queries but attends to itself
        let m = AttentionMask::causal(1, 0, 3, &[true, false, false]).unwrap();
        assert!(m.allowed(0, 0, 0));
        assert!(!m.allowed(0, 1, 0) && m.allowed(0, 1, 1));
        let m = AttentionMask::causal(1, 2, 1, &[false; 3]).unwrap();
        assert_eq!(m.n_query, 1);
        assert!(m.allowed(0, 0, 0) && m.allowed(0, 0, 2));
    }

    #[test]
    fn routing_stats_merge() {
        let mut a = RoutingStats::new(2, 1);
        a.tokens = 2;
        a.counts = vec![2, 0];
        let mut b = RoutingStats::new(2, 1);
        b.tokens = 1;
        b.counts = vec![0, 1];
        a.merge(&b).unwrap();
        assert_eq!(a.counts, vec![2, 1]);
        assert_eq!(a.tokens, 3);
        assert!(a.merge(&RoutingStats::new(3, 1)).is_err());
    }
}
