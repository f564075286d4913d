//! Input tokenization: patching, prefix masking, per-patch instance
//! normalization, the input residual block and the frequency embedding.

use rand::Rng;

use crate::error::{invalid, FincastError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to per-patch standard deviations.
pub const SIGMA_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<i64>>,
    pub freq_index: usize,
    /// Ground-truth regime per point, emitted by the regime-switching generator.
    pub regimes: Option<Vec<usize>>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>, freq_index: usize) -> Result<Self> {
        let s = Self {
            name: name.into(),
            values,
            timestamps: None,
            freq_index,
            regimes: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<i64>) -> Result<Self> {
        self.timestamps = Some(timestamps);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return invalid(format!("series {:?} is empty", self.name));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FincastError::NonFinite(format!(
                "series {:?} value at index {i}",
                self.name
            )));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.values.len() {
                return invalid("timestamps and values differ in length");
            }
            if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return invalid(format!(
                    "timestamps not strictly increasing at index {}",
                    i + 1
                ));
            }
        }
        Ok(())
    }
}

/// A left-padded raw sequence cut into `n_patches` patches of `patch_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatches {
    pub patch_len: usize,
    pub n_patches: usize,
    /// `n_patches * patch_len` values; padding positions hold 0.
    pub values: Vec<f64>,
    /// `true` where a position is masked (padding or training prefix).
    pub mask: Vec<bool>,
    pub pad: usize,
}

impl RawPatches {
    /// Number of observed (non-padding) positions.
    pub fn observed_len(&self) -> usize {
        self.values.len() - self.pad
    }
}

/// Cut `values` into `ceil(L/P)` patches, left-padding the first one.
pub fn patchify(values: &[f64], patch_len: usize) -> Result<RawPatches> {
    if patch_len == 0 {
        return invalid("patch length must be >= 1");
    }
    if values.is_empty() {
        return invalid("cannot patchify an empty series");
    }
    let n_patches = values.len().div_ceil(patch_len);
    let pad = n_patches * patch_len - values.len();
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(values);
    let mut mask = vec![true; pad];
    mask.resize(padded.len(), false);
    Ok(RawPatches {
        patch_len,
        n_patches,
        values: padded,
        mask,
        pad,
    })
}

/// Draw the length of a masked prefix over `len` observed points so that the
/// expected masked fraction is `ratio`. Always leaves at least one point.
pub fn sample_prefix_len<R: Rng>(len: usize, ratio: f64, rng: &mut R) -> usize {
    if ratio <= 0.0 || len <= 1 {
        return 0;
    }
    let lf = len as f64;
    // Mixture of "no mask" and a uniform prefix length on {0, ..., len-1}.
    let p = 2.0 * ratio * lf / (lf - 1.0);
    if p <= 1.0 {
        if rng.gen::<f64>() < p {
            rng.gen_range(0..len)
        } else {
            0
        }
    } else {
        // Uniform on {lo, ..., len-1} with mean ratio * len.
        let lo = (2.0 * ratio * lf - (lf - 1.0)).round().clamp(0.0, lf - 1.0) as usize;
        rng.gen_range(lo..len)
    }
}

/// Mask a random-length prefix of the observed positions.
pub fn apply_training_mask<R: Rng>(patches: &mut RawPatches, ratio: f64, rng: &mut R) {
    let masked = sample_prefix_len(patches.observed_len(), ratio, rng);
    let start = patches.pad;
    for m in &mut patches.mask[start..start + masked] {
        *m = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPatch {
    pub values: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Every position was masked; `mu = 0`, `sigma = 1` were substituted.
    pub all_masked: bool,
}

/// Standardize the non-masked entries of one patch. Masked entries become 0.
pub fn instance_normalize(patch: &[f64], mask: &[bool]) -> NormalizedPatch {
    let observed: Vec<f64> = patch
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .collect();
    if observed.is_empty() {
        return NormalizedPatch {
            values: vec![0.0; patch.len()],
            mu: 0.0,
            sigma: 1.0,
            all_masked: true,
        };
    }
    let n = observed.len() as f64;
    let mu = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let sigma = var.sqrt().max(SIGMA_EPS);
    let values = patch
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { 0.0 } else { (x - mu) / sigma })
        .collect();
    NormalizedPatch {
        values,
        mu,
        sigma,
        all_masked: false,
    }
}

pub fn denormalize_value(x: f64, mu: f64, sigma: f64) -> f64 {
    x * sigma + mu
}

/// Normalized patches for a batch of equally long sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub batch: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    /// `batch * n_patches * patch_len`, masked entries zeroed.
    pub patches: Vec<f64>,
    pub mask: Vec<bool>,
    /// Per-patch statistics, `batch * n_patches`.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Patches with no observed position (fallback statistics in use).
    pub all_masked: Vec<bool>,
    pub freq_index: Vec<usize>,
}

impl PatchBatch {
    pub fn from_raw(raw: &[RawPatches], freq_index: &[usize]) -> Result<Self> {
        let Some(first) = raw.first() else {
            return invalid("empty patch batch");
        };
        if freq_index.len() != raw.len() {
            return invalid("one frequency index per sequence required");
        }
        let (n, p) = (first.n_patches, first.patch_len);
        let mut out = PatchBatch {
            batch: raw.len(),
            n_patches: n,
            patch_len: p,
            patches: Vec::with_capacity(raw.len() * n * p),
            mask: Vec::with_capacity(raw.len() * n * p),
            mu: Vec::with_capacity(raw.len() * n),
            sigma: Vec::with_capacity(raw.len() * n),
            all_masked: Vec::with_capacity(raw.len() * n),
            freq_index: freq_index.to_vec(),
        };
        for r in raw {
            if r.n_patches != n || r.patch_len != p {
                return Err(FincastError::Shape {
                    op: "patch_batch",
                    left: vec![n, p],
                    right: vec![r.n_patches, r.patch_len],
                });
            }
            for (vals, m) in r.values.chunks(p).zip(r.mask.chunks(p)) {
                let norm = instance_normalize(vals, m);
                out.patches.extend_from_slice(&norm.values);
                out.mask.extend_from_slice(m);
                out.mu.push(norm.mu);
                out.sigma.push(norm.sigma);
                out.all_masked.push(norm.all_masked);
            }
        }
        Ok(out)
    }

    /// Patch and normalize equally long contexts (no training mask).
    pub fn from_contexts(
        contexts: &[&[f64]],
        freq_index: &[usize],
        patch_len: usize,
    ) -> Result<Self> {
        let raw = contexts
            .iter()
            .map(|c| patchify(c, patch_len))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(&raw, freq_index)
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.n_patches
    }

    /// Keep only patches `from..` of every sequence.
    pub fn tail(&self, from: usize) -> Self {
        let n = self.n_patches - from;
        let p = self.patch_len;
        let mut out = PatchBatch {
            batch: self.batch,
            n_patches: n,
            patch_len: p,
            patches: Vec::new(),
            mask: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
            all_masked: Vec::new(),
            freq_index: self.freq_index.clone(),
        };
        for b in 0..self.batch {
            let t0 = b * self.n_patches + from;
            let t1 = (b + 1) * self.n_patches;
            out.patches.extend_from_slice(&self.patches[t0 * p..t1 * p]);
            out.mask.extend_from_slice(&self.mask[t0 * p..t1 * p]);
            out.mu.extend_from_slice(&self.mu[t0..t1]);
            out.sigma.extend_from_slice(&self.sigma[t0..t1]);
            out.all_masked.extend_from_slice(&self.all_masked[t0..t1]);
        }
        out
    }
}

/// Tape handles for the input residual block and frequency table.
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub skip_w: Var,
    pub skip_b: Var,
    /// `None` when the frequency embedding is ablated.
    pub freq_table: Option<Var>,
}

/// Residual block with one hidden layer and a linear skip:
/// `W_o·silu(W_h x + b_h) + b_o + W_s x + b_s`.
pub fn residual_mlp(
    tape: &mut Tape,
    x: Var,
    hidden_w: Var,
    hidden_b: Var,
    out_w: Var,
    out_b: Var,
    skip_w: Var,
    skip_b: Var,
) -> Result<Var> {
    let h = tape.matmul(x, hidden_w)?;
    let h = tape.add_row(h, hidden_b)?;
    let h = tape.silu(h);
    let o = tape.matmul(h, out_w)?;
    let o = tape.add_row(o, out_b)?;
    let s = tape.matmul(x, skip_w)?;
    let s = tape.add_row(s, skip_b)?;
    tape.add(o, s)
}

/// Token embeddings `[batch * n_patches, d_model]`.
pub fn embed_tokens(tape: &mut Tape, batch: &PatchBatch, vars: &InputVars) -> Result<Var> {
    let x = tape.constant(Tensor::new(
        &[batch.tokens(), batch.patch_len],
        batch.patches.clone(),
    )?);
    let h = residual_mlp(
        tape,
        x,
        vars.hidden_w,
        vars.hidden_b,
        vars.out_w,
        vars.out_b,
        vars.skip_w,
        vars.skip_b,
    )?;
    let Some(table) = vars.freq_table else {
        return Ok(h);
    };
    let shape = tape.shape(table).to_vec();
    let (rows, d) = (shape[0], shape[1]);
    let mut index = Vec::with_capacity(batch.tokens() * d);
    for &f in &batch.freq_index {
        if f >= rows {
            return Err(FincastError::FreqIndexOutOfRange { index: f, rows });
        }
        for _ in 0..batch.n_patches {
            index.extend((0..d).map(|j| f * d + j));
        }
    }
    let freq = tape.gather(table, index, &[batch.tokens(), d])?;
    tape.add(h, freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_exact_and_padded() {
        let p = patchify(&vec![1.0; 128], 32).unwrap();
        assert_eq!((p.n_patches, p.pad), (4, 0));
        let p = patchify(&vec![1.0; 100], 32).unwrap();
        assert_eq!((p.n_patches, p.pad), (4, 28));
        assert_eq!(p.mask.iter().filter(|&&m| m).count(), 28);
        assert!(p.mask[..28].iter().all(|&m| m));
        let p = patchify(&[1.0, 2.0, 3.0, 4.0, 5.0], 32).unwrap();
        assert_eq!((p.n_patches, p.pad), (1, 27));
        assert_eq!(&p.values[27..], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(patchify(&[], 32).is_err());
        assert!(patchify(&[1.0], 0).is_err());
    }

    #[test]
    fn normalize_worked_example() {
        let n = instance_normalize(&[1.0, 2.0, 3.0, 4.0], &[false; 4]);
        assert!((n.mu - 2.5).abs() < 1e-12);
        assert!((n.sigma - 1.118034).abs() < 1e-6);
        let expect = [-1.341641, -0.447214, 0.447214, 1.341641];
        for (a, b) in n.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_constant_and_all_masked() {
        let n = instance_normalize(&[5.0; 4], &[false; 4]);
        assert_eq!(n.sigma, SIGMA_EPS);
        assert_eq!(n.values, vec![0.0; 4]);
        let n = instance_normalize(&[5.0; 4], &[true; 4]);
        assert!(n.all_masked);
        assert_eq!((n.mu, n.sigma), (0.0, 1.0));
    }

    #[test]
    fn normalize_ignores_masked_entries() {
        let a = instance_normalize(&[100.0, 1.0, 2.0, 3.0], &[true, false, false, false]);
        let b = instance_normalize(&[-7.0, 1.0, 2.0, 3.0], &[true, false, false, false]);
        assert_eq!(a, b);
        assert!((a.mu - 2.0).abs() < 1e-15);
        assert_eq!(a.values[0], 0.0);
    }

    #[test]
    fn zero_ratio_mask_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = patchify(&vec![1.0; 100], 32).unwrap();
        let before = p.mask.clone();
        apply_training_mask(&mut p, 0.0, &mut rng);
        assert_eq!(before, p.mask);
    }

    #[test]
    fn prefix_mask_mean_fraction() {
        // Monte-Carlo check of the sampler: 10,000 sequences of length 128.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut total = 0.0;
        for _ in 0..10_000 {
            let mut p = patchify(&vec![0.0; 128], 32).unwrap();
            apply_training_mask(&mut p, 0.15, &mut rng);
            let masked = p.mask.iter().filter(|&&m| m).count();
            assert!(masked < 128);
            // prefix: no unmasked position before a masked one
            let first_open = p.mask.iter().position(|&m| !m).unwrap();
            assert!(p.mask[first_open..].iter().all(|&m| !m));
            total += masked as f64 / 128.0;
        }
        let mean = total / 10_000.0;
        assert!((mean - 0.15).abs() < 0.01, "mean masked fraction {mean}");
    }

    #[test]
    fn high_ratio_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| sample_prefix_len(100, 0.7, &mut rng) as f64 / 100.0)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.7).abs() < 0.01, "{mean}");
    }

    proptest! {
        #[test]
        fn normalization_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let mask = vec![false; vals.len()];
            let n = instance_normalize(&vals, &mask);
            for (x, z) in vals.iter().zip(&n.values) {
                let back = denormalize_value(*z, n.mu, n.sigma);
                prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(n.sigma).max(1.0));
            }
        }

        #[test]
        fn scale_equivariance(
            vals in proptest::collection::vec(-100f64..100.0, 2..40),
            a in 0.01f64..100.0,
            b in -1e3f64..1e3,
        ) {
            let mask = vec![false; vals.len()];
            let n0 = instance_normalize(&vals, &mask);
            prop_assume!(n0.sigma > 1e-3);
            let shifted: Vec<f64> = vals.iter().map(|x| a * x + b).collect();
            let n1 = instance_normalize(&shifted, &mask);
            for (x, y) in n0.values.iter().zip(&n1.values) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
