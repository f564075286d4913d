//! Parameter layout, initialization and the full forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{
    decoder_stack, AttentionMask, AttentionVars, BlockVars, ExpertVars, KvCache, RouterTrace,
};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::input::{embed_tokens, InputVars, PatchBatch};
use crate::output::{project_outputs, OutputVars, ProjectedVars};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor, Var};

/// Parameter indices of one decoder block.
#[derive(Clone, Debug)]
struct BlockIds {
    attn_norm: usize,
    w_qkv: usize,
    alpha: usize,
    w_o: usize,
    moe_norm: usize,
    gate: usize,
    experts: Vec<[usize; 4]>,
}

#[derive(Clone, Debug)]
struct Layout {
    input: [usize; 6],
    freq: usize,
    blocks: Vec<BlockIds>,
    output: [usize; 6],
}

/// A FinCast-style decoder-only forecaster: config plus learnable weights.
#[derive(Clone, Debug)]
pub struct FinCast {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Forward results on the tape.
pub struct ForwardOut {
    pub projected: ProjectedVars,
    pub traces: Vec<RouterTrace>,
    pub tokens: usize,
}

fn lookup(params: &ParamSet, name: &str) -> Result<usize> {
    params.id(name).ok_or_else(|| {
        crate::error::FincastError::InvalidArgument(format!("missing parameter {name}"))
    })
}

impl Layout {
    fn resolve(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let six = |prefix: &str| -> Result<[usize; 6]> {
            Ok([
                lookup(params, &format!("{prefix}.hidden.w"))?,
                lookup(params, &format!("{prefix}.hidden.b"))?,
                lookup(params, &format!("{prefix}.out.w"))?,
                lookup(params, &format!("{prefix}.out.b"))?,
                lookup(params, &format!("{prefix}.skip.w"))?,
                lookup(params, &format!("{prefix}.skip.b"))?,
            ])
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("block{l}");
            let experts = (0..config.n_experts)
                .map(|i| -> Result<[usize; 4]> {
                    Ok([
                        lookup(params, &format!("{p}.expert{i}.w1"))?,
                        lookup(params, &format!("{p}.expert{i}.b1"))?,
                        lookup(params, &format!("{p}.expert{i}.w2"))?,
                        lookup(params, &format!("{p}.expert{i}.b2"))?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockIds {
                attn_norm: lookup(params, &format!("{p}.attn_norm.gamma"))?,
                w_qkv: lookup(params, &format!("{p}.attn.w_qkv"))?,
                alpha: lookup(params, &format!("{p}.attn.alpha"))?,
                w_o: lookup(params, &format!("{p}.attn.w_o"))?,
                moe_norm: lookup(params, &format!("{p}.moe_norm.gamma"))?,
                gate: lookup(params, &format!("{p}.gate.w"))?,
                experts,
            });
        }
        Ok(Self {
            input: six("input")?,
            freq: lookup(params, "freq.table")?,
            blocks,
            output: six("output")?,
        })
    }
}

/// Expected `(name, shape)` of every parameter, in storage order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let p = config.patch_len;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("input.hidden.w".into(), vec![p, config.input_hidden]),
        ("input.hidden.b".into(), vec![config.input_hidden]),
        ("input.out.w".into(), vec![config.input_hidden, d]),
        ("input.out.b".into(), vec![d]),
        ("input.skip.w".into(), vec![p, d]),
        ("input.skip.b".into(), vec![d]),
        ("freq.table".into(), vec![config.freq_table_size, d]),
    ];
    for l in 0..config.n_layers {
        let b = format!("block{l}");
        v.push((format!("{b}.attn_norm.gamma"), vec![d]));
        v.push((format!("{b}.attn.w_qkv"), vec![d, 3 * d]));
        v.push((format!("{b}.attn.alpha"), vec![config.head_dim()]));
        v.push((format!("{b}.attn.w_o"), vec![d, d]));
        v.push((format!("{b}.moe_norm.gamma"), vec![d]));
        v.push((format!("{b}.gate.w"), vec![d, config.n_experts]));
        for i in 0..config.n_experts {
            v.push((format!("{b}.expert{i}.w1"), vec![d, config.expert_hidden]));
            v.push((format!("{b}.expert{i}.b1"), vec![config.expert_hidden]));
            v.push((format!("{b}.expert{i}.w2"), vec![config.expert_hidden, d]));
            v.push((format!("{b}.expert{i}.b2"), vec![d]));
        }
    }
    let w = config.output_width();
    v.push(("output.hidden.w".into(), vec![d, config.output_hidden]));
    v.push(("output.hidden.b".into(), vec![config.output_hidden]));
    v.push(("output.out.w".into(), vec![config.output_hidden, w]));
    v.push(("output.out.b".into(), vec![w]));
    v.push(("output.skip.w".into(), vec![d, w]));
    v.push(("output.skip.b".into(), vec![w]));
    v
}

impl FinCast {
    /// Random initialization: normal weights scaled by `1/sqrt(fan_in)`, zero
    /// biases and attention `α`, unit norm gains, small frequency rows.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with("alpha")
            {
                vec![0.0; n]
            } else {
                let std = if name == "freq.table" {
                    0.02
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(name, Tensor::new(&shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wrap existing weights; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return invalid(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            ));
        }
        for (name, shape) in &expected {
            match params.by_name(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return invalid(format!(
                        "parameter {name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    ))
                }
                None => return invalid(format!("missing parameter {name}")),
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        *self = Self::from_params(self.config.clone(), params)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Names of the frequency-embedding parameters.
    pub fn freq_param_ids(&self) -> Vec<usize> {
        vec![self.layout.freq]
    }

    /// Forward pass for `batch` with parameters bound at `vars`
    /// (from [`ParamSet::bind`]).
    ///
    /// Without a cache every patch of `batch` is a token. With a cache the
    /// batch holds only the new patches; `cache.padded` must already cover
    /// the cached tokens and is extended here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &PatchBatch,
        cache: Option<&mut KvCache>,
    ) -> Result<ForwardOut> {
        let c = &self.config;
        if vars.len() != self.params.len() {
            return invalid("parameter bindings do not match the model");
        }
        if batch.patch_len != c.patch_len {
            return invalid(format!(
                "batch patch length {} != model patch length {}",
                batch.patch_len, c.patch_len
            ));
        }
        let i = &self.layout.input;
        let input = InputVars {
            hidden_w: vars[i[0]],
            hidden_b: vars[i[1]],
            out_w: vars[i[2]],
            out_b: vars[i[3]],
            skip_w: vars[i[4]],
            skip_b: vars[i[5]],
            freq_table: c.use_freq_embedding.then(|| vars[self.layout.freq]),
        };
        if !c.use_freq_embedding {
            if let Some(&f) = batch.freq_index.iter().find(|&&f| f >= c.freq_table_size) {
                return Err(crate::error::FincastError::FreqIndexOutOfRange {
                    index: f,
                    rows: c.freq_table_size,
                });
            }
        }
        let h = embed_tokens(tape, batch, &input)?;

        let blocks: Vec<BlockVars> = self
            .layout
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: vars[b.attn_norm],
                attn: AttentionVars {
                    w_qkv: vars[b.w_qkv],
                    alpha: vars[b.alpha],
                    w_o: vars[b.w_o],
                },
                moe_norm: vars[b.moe_norm],
                gate: vars[b.gate],
                experts: b
                    .experts
                    .iter()
                    .map(|e| ExpertVars {
                        w1: vars[e[0]],
                        b1: vars[e[1]],
                        w2: vars[e[2]],
                        b2: vars[e[3]],
                    })
                    .collect(),
            })
            .collect();

        let n_new = batch.n_patches;
        let stack = match cache {
            None => {
                let mask = AttentionMask::causal(batch.batch, 0, n_new, &batch.all_masked)?;
                decoder_stack(tape, h, &blocks, c.n_heads, c.top_k, c.rms_eps, &mask, None)?
            }
            Some(cache) => {
                let n_past = cache.cached_tokens();
                if n_past > 0 && cache.batch != batch.batch {
                    return invalid("cache batch size differs from input batch");
                }
                cache.batch = batch.batch;
                let mut padded = Vec::with_capacity(batch.batch * (n_past + n_new));
                for b in 0..batch.batch {
                    padded.extend_from_slice(&cache.padded[b * n_past..(b + 1) * n_past]);
                    padded.extend_from_slice(&batch.all_masked[b * n_new..(b + 1) * n_new]);
                }
                let mask = AttentionMask::causal(batch.batch, n_past, n_new, &padded)?;
                let out = decoder_stack(
                    tape,
                    h,
                    &blocks,
                    c.n_heads,
                    c.top_k,
                    c.rms_eps,
                    &mask,
                    Some(&mut *cache),
                )?;
                cache.padded = padded;
                out
            }
        };

        let o = &self.layout.output;
        let out_vars = OutputVars {
            hidden_w: vars[o[0]],
            hidden_b: vars[o[1]],
            out_w: vars[o[2]],
            out_b: vars[o[3]],
            skip_w: vars[o[4]],
            skip_b: vars[o[5]],
        };
        let projected = project_outputs(tape, stack.hidden, &out_vars, c.h_out, c.quantiles.len())?;
        Ok(ForwardOut {
            projected,
            traces: stack.traces,
            tokens: batch.tokens(),
        })
    }
}
