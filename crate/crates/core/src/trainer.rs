//! Optimization loop: batch sampling, prefix masking, AdamW, learning-rate
//! schedule, checkpoints and the loss log.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, RunConfig, TrainConfig};
use crate::error::{invalid, FincastError, Result};
use crate::input::{apply_training_mask, patchify, PatchBatch, Series, SIGMA_EPS};
use crate::loss::{total_loss, LossBreakdown, LossTargets};
use crate::model::FinCast;
use crate::tensor::{Tape, Tensor};
use crate::weights::{load_weights, save_weights};

/// Learning rate after `step` of `cfg.total_steps`: linear warmup, flat
/// plateau, cosine decay to `final_lr_frac * lr_peak`.
pub fn lr_at(step: f64, cfg: &TrainConfig) -> f64 {
    let s = cfg.total_steps as f64;
    let peak = cfg.lr_peak;
    let warm = cfg.warmup_frac * s;
    let flat_end = (cfg.warmup_frac + cfg.plateau_frac) * s;
    let step = step.clamp(0.0, s);
    if step <= warm {
        if warm == 0.0 {
            return peak;
        }
        return peak * step / warm;
    }
    if step <= flat_end {
        return peak;
    }
    let span = s - flat_end;
    let t = if span > 0.0 {
        (step - flat_end) / span
    } else {
        1.0
    };
    let floor = cfg.final_lr_frac * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (PI * t).cos())
}

/// AdamW moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied updates (drives bias correction).
    pub step: u64,
    /// Updates dropped because a gradient was non-finite.
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            skipped: 0,
        }
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update. Returns `false` (and leaves
/// everything but the skip counter untouched) if any gradient is non-finite.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return invalid("parameter, gradient and state counts differ");
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(FincastError::Shape {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if !grads.iter().all(Tensor::is_finite) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *x = *x * decay - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(true)
}

/// Training series plus the window length each sample needs.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    series: Vec<Series>,
    window: usize,
    /// Cumulative window counts for length-proportional sampling.
    cumulative: Vec<usize>,
}

impl TrainingSet {
    pub fn new(series: Vec<Series>, context_len: usize, h_out: usize) -> Result<Self> {
        let window = context_len + h_out;
        let usable: Vec<Series> = series.into_iter().filter(|s| s.len() >= window).collect();
        if usable.is_empty() {
            return Err(FincastError::Data(format!(
                "empty dataset: no series with at least {window} points"
            )));
        }
        let mut cumulative = Vec::with_capacity(usable.len());
        let mut total = 0;
        for s in &usable {
            total += s.len() - window + 1;
            cumulative.push(total);
        }
        Ok(Self {
            series: usable,
            window,
            cumulative,
        })
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_windows(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    /// Uniformly drawn window: `(values, freq_index, series index, start)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (&[f64], usize, usize, usize) {
        let k = rng.gen_range(0..self.n_windows());
        let si = self.cumulative.partition_point(|&c| c <= k);
        let before = if si == 0 { 0 } else { self.cumulative[si - 1] };
        let start = k - before;
        let s = &self.series[si];
        (
            &s.values[start..start + self.window],
            s.freq_index,
            si,
            start,
        )
    }
}

/// Patch, mask and normalize `context_len + h_out` windows. Token `n`'s target
/// is the `h_out` points right after its patch, in that patch's normalized
/// units. Tokens with no observed point or a degenerate spread carry no loss.
pub fn build_training_batch<R: Rng>(
    windows: &[(&[f64], usize)],
    context_len: usize,
    patch_len: usize,
    h_out: usize,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<(PatchBatch, LossTargets)> {
    let mut raws = Vec::with_capacity(windows.len());
    let mut freqs = Vec::with_capacity(windows.len());
    for (w, f) in windows {
        if w.len() != context_len + h_out {
            return invalid(format!(
                "window of {} points, expected {}",
                w.len(),
                context_len + h_out
            ));
        }
        let mut raw = patchify(&w[..context_len], patch_len)?;
        apply_training_mask(&mut raw, mask_ratio, rng);
        raws.push(raw);
        freqs.push(*f);
    }
    let batch = PatchBatch::from_raw(&raws, &freqs)?;
    let n = batch.n_patches;
    let mut values = Vec::with_capacity(batch.tokens() * h_out);
    let mut valid = Vec::with_capacity(batch.tokens() * h_out);
    for (b, (w, _)) in windows.iter().enumerate() {
        let pad = raws[b].pad;
        for t in 0..n {
            let tok = b * n + t;
            let (mu, sigma) = (batch.mu[tok], batch.sigma[tok]);
            let usable = !batch.all_masked[tok] && sigma > SIGMA_EPS;
            let first = (t + 1) * patch_len - pad;
            for j in 0..h_out {
                values.push((w[first + j] - mu) / sigma);
                valid.push(usable);
            }
        }
    }
    let targets = LossTargets {
        tokens: batch.tokens(),
        h_out,
        values,
        valid,
    };
    Ok((batch, targets))
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,point,quantile,trend,balance,router_z,total,lr";

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.step, l.point, l.quantile, l.trend, l.balance, l.router_z, l.total, r.lr
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Stateful trainer over a fixed model and dataset.
pub struct Trainer {
    pub model: FinCast,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub state: OptimizerState,
    pub log: Vec<LogRow>,
    rng: ChaCha8Rng,
    checkpoint: Option<PathBuf>,
    run: Option<RunConfig>,
}

impl Trainer {
    pub fn new(model: FinCast, train: TrainConfig, loss: LossWeights) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let state = OptimizerState::new(model.params().tensors());
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        Ok(Self {
            model,
            train,
            loss,
            state,
            log: Vec::new(),
            rng,
            checkpoint: None,
            run: None,
        })
    }

    /// Build the model and trainer that `run` describes, ablations applied.
    pub fn from_run_config(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = FinCast::new(run.effective_model(), run.train.seed)?;
        let mut t = Self::new(model, run.train.clone(), run.effective_loss())?;
        t.run = Some(run.clone());
        Ok(t)
    }

    /// Write checkpoints to `path` every `checkpoint_every` steps and at the end.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    /// Forward and loss for one batch without updating anything.
    pub fn batch_loss(
        &self,
        batch: &PatchBatch,
        targets: &LossTargets,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.model.params().bind(&mut tape, true);
        let out = self.model.forward(&mut tape, &vars, batch, None)?;
        let (loss, breakdown) = total_loss(
            &mut tape,
            out.projected.point,
            out.projected.quantiles,
            &self.model.config().quantiles,
            targets,
            &out.traces,
            &self.loss,
        )?;
        if !breakdown.total.is_finite() {
            return Ok((breakdown, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = (0..self.model.params().len())
            .map(|i| grads.get_or_zeros(i, self.model.params().get(i).shape()))
            .collect();
        Ok((breakdown, g))
    }

    /// One optimizer update (1-based step index = updates so far + 1).
    pub fn step(&mut self, data: &TrainingSet) -> Result<LogRow> {
        let cfg = self.model.config();
        let windows: Vec<(&[f64], usize)> = (0..self.train.batch_size)
            .map(|_| {
                let (w, f, _, _) = data.sample(&mut self.rng);
                (w, f)
            })
            .collect();
        let (batch, targets) = build_training_batch(
            &windows,
            self.train.context_len,
            cfg.patch_len,
            cfg.h_out,
            self.train.mask_ratio,
            &mut self.rng,
        )?;
        let step = self.log.len() as u64 + 1;
        let (breakdown, mut grads) = self.batch_loss(&batch, &targets)?;
        if !breakdown.total.is_finite() {
            return Err(FincastError::NonFinite(format!(
                "loss at step {step}: {breakdown:?}"
            )));
        }
        clip_grad_norm(&mut grads, self.train.grad_clip);
        let lr = lr_at(step as f64, &self.train);
        let train = self.train.clone();
        adamw_step(
            self.model.params_mut().tensors_mut(),
            &grads,
            &mut self.state,
            lr,
            &train,
        )?;
        let row = LogRow {
            step,
            loss: breakdown,
            lr,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Run until `total_steps` updates have been attempted.
    pub fn train(&mut self, data: &TrainingSet) -> Result<()> {
        if data.window() != self.train.context_len + self.model.config().h_out {
            return invalid("training set window does not match context_len + h_out");
        }
        while self.log.len() < self.train.total_steps {
            self.step(data)?;
            let done = self.log.len();
            let every = self.train.checkpoint_every;
            if every > 0 && done.is_multiple_of(every) && done < self.train.total_steps {
                self.save_checkpoint_if_set()?;
            }
        }
        self.save_checkpoint_if_set()
    }

    fn save_checkpoint_if_set(&self) -> Result<()> {
        match &self.checkpoint {
            Some(p) => self.save_checkpoint(p),
            None => Ok(()),
        }
    }

    /// Weight file at `path`, plus `path.opt` (f64 weights, optimizer and
    /// sampler state), `path.cfg` (effective config) and `path.loss.csv`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_weights(&self.model, path)?;
        let mut opt = Vec::new();
        opt.extend_from_slice(OPT_MAGIC);
        opt.extend_from_slice(&self.state.step.to_le_bytes());
        opt.extend_from_slice(&self.state.skipped.to_le_bytes());
        opt.extend_from_slice(&(self.log.len() as u64).to_le_bytes());
        opt.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for group in [
            self.model.params().tensors(),
            &self.state.m[..],
            &self.state.v[..],
        ] {
            for t in group {
                for &x in t.data() {
                    opt.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        std::fs::write(sidecar(path, "opt"), opt)?;
        if let Some(run) = &self.run {
            std::fs::write(sidecar(path, "cfg"), run.dump())?;
        }
        write_loss_log(&self.log, &sidecar(path, "loss.csv"))
    }

    /// Restore weights, optimizer and sampler state written by
    /// [`Trainer::save_checkpoint`] so training continues exactly.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let loaded = load_weights(path, Some(self.model.config()))?;
        let bytes = std::fs::read(sidecar(path, "opt"))?;
        let n = loaded.num_params();
        let head = OPT_MAGIC.len() + 8 * 3 + 16;
        if bytes.len() != head + 3 * n * 8 || &bytes[..OPT_MAGIC.len()] != OPT_MAGIC {
            return Err(FincastError::Data("malformed optimizer state".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let mut o = OPT_MAGIC.len();
        let step = u64_at(o);
        let skipped = u64_at(o + 8);
        let logged = u64_at(o + 16);
        o += 24;
        let word_pos = u128::from_le_bytes(bytes[o..o + 16].try_into().expect("16 bytes"));
        o += 16;
        let mut read_group = |shapes: &[Tensor]| -> Result<Vec<Tensor>> {
            shapes
                .iter()
                .map(|t| {
                    let data = bytes[o..o + t.numel() * 8]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    o += t.numel() * 8;
                    Tensor::new(t.shape(), data)
                })
                .collect()
        };
        let shapes = loaded.params().tensors().to_vec();
        let master = read_group(&shapes)?;
        let m = read_group(&shapes)?;
        let v = read_group(&shapes)?;
        self.model
            .set_params(loaded.params().with_tensors(master)?)?;
        self.state = OptimizerState {
            m,
            v,
            step,
            skipped,
        };
        let log_path = sidecar(path, "loss.csv");
        self.log = if log_path.exists() {
            read_loss_log(&log_path)?
        } else {
            Vec::new()
        };
        if self.log.len() as u64 != logged {
            return Err(FincastError::Data(format!(
                "loss log has {} rows, optimizer state expects {logged}",
                self.log.len()
            )));
        }
        self.rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        self.rng.set_word_pos(word_pos);
        Ok(())
    }
}

const OPT_MAGIC: &[u8] = b"FNCTOPT1";

/// `path` with `.ext` appended to its file name.
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| FincastError::Data(format!("bad loss log field {i}")))
        };
        rows.push(LogRow {
            step: f(0)? as u64,
            loss: LossBreakdown {
                point: f(1)?,
                quantile: f(2)?,
                trend: f(3)?,
                balance: f(4)?,
                router_z: f(5)?,
                total: f(6)?,
            },
            lr: f(7)?,
        });
    }
    Ok(rows)
}
