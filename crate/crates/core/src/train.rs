//! Pre-training: AdamW with a linear warmup/decay schedule, fresh prompt and
//! mask sampling every step, periodic held-out evaluation, checkpointing,
//! and a divergence guard. Also fits the power law used to extrapolate loss
//! versus model size.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradStore;
use crate::model::checkpoint::{self, Checkpoint, OptState};
use crate::model::{self, LossReport, ModelParams};
use crate::tokenizer::{
    cell_rng, mask, resample_prompts, rng_purpose, BalanceTables, TokenizedCell, Variant,
    Vocabulary,
};
use crate::{Error, Result};

/// Optimization hyperparameters. Defaults target full-scale pre-training
/// (AdamW, peak rate 1e-4, 10k-step warmup, decoupled decay 0.1, batch 256,
/// one epoch); [`TrainConfig::desk`] shrinks them for laptop-scale runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub w_mlm: f64,
    pub w_cls: f64,
    /// Save a checkpoint every this many steps (and at the end).
    pub checkpoint_every: u64,
    /// Evaluate held-out loss and append a log row every this many steps.
    pub log_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 100_000,
            weight_decay: 0.1,
            mask_rate: 0.15,
            seed: 0,
            w_mlm: 1.0,
            w_cls: 1.0,
            checkpoint_every: 1_000,
            log_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Laptop-scale preset: batch 32, 100-step warmup, 2000 total steps.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            warmup_steps: 100,
            total_steps: 2_000,
            checkpoint_every: 500,
            log_every: 50,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("total_steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidConfig("mask_rate must be in (0, 1)".into()));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::InvalidConfig("max_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at a step: linear ramp from max_lr/warmup up to max_lr over
/// the warmup, then linear decay toward zero at total_steps.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange { step: step as usize, total: total_steps as usize });
    }
    if step < warmup_steps {
        Ok(max_lr * (step + 1) as f64 / warmup_steps as f64)
    } else {
        Ok(max_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}

/// One decoupled-weight-decay Adam update. Decay applies only to weight
/// matrices (see [`ModelParams::is_decayed`]). Tensors without a gradient
/// this step are left untouched.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &GradStore,
    opt: &mut OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    opt.t += 1;
    let t = opt.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = grads.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads.get(&name).unwrap();
        let p = params
            .tensor_mut(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("gradient for unknown tensor {name}")))?;
        let m = opt.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        let v = opt.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        let decay = if ModelParams::is_decayed(&name) { cfg.weight_decay } else { 0.0 };
        for ((pe, ge), (me, ve)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
            *me = cfg.beta1 * *me + (1.0 - cfg.beta1) * ge;
            *ve = cfg.beta2 * *ve + (1.0 - cfg.beta2) * ge * ge;
            let mhat = *me / bc1;
            let vhat = *ve / bc2;
            *pe -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *pe);
            if !pe.is_finite() {
                return Err(Error::NonFinite { tensor: name.clone() });
            }
        }
    }
    Ok(())
}

/// One row of the tab-separated loss log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Training artifacts on disk.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_loss: LossReport,
    pub log: Vec<LogRow>,
    pub checkpoint_path: PathBuf,
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step\ttrain_loss\tval_loss\tlr\n");
    for r in rows {
        out.push_str(&format!("{}\t{:?}\t{:?}\t{:?}\n", r.step, r.train_loss, r.val_loss, r.lr));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a loss log written by [`pretrain`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad {what} value {s:?}"),
            })
        };
        rows.push(LogRow {
            step: fields[0].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad step value {:?}", fields[0]),
            })?,
            train_loss: parse(fields[1], "train_loss")?,
            val_loss: parse(fields[2], "val_loss")?,
            lr: parse(fields[3], "lr")?,
        });
    }
    Ok(rows)
}

/// Deterministic shuffle of cell indices for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = cell_rng(seed, epoch, 0, rng_purpose::SHUFFLE);
    order.shuffle(&mut rng);
    order
}

/// Assemble one training batch: fresh prompt attachment and masks for the
/// given step, reproducible from (seed, step, ordinal) alone.
fn training_batch(
    cells: &[TokenizedCell],
    order: &[usize],
    start: usize,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    probs: &BalanceTables,
    variant: Variant,
    step: u64,
) -> crate::tokenizer::MaskedBatch {
    let end = (start + cfg.batch_size).min(order.len());
    let mut batch: Vec<TokenizedCell> = Vec::with_capacity(end - start);
    for (ordinal, &idx) in order[start..end].iter().enumerate() {
        let mut tc = cells[idx].clone();
        let mut rng = cell_rng(cfg.seed, step, ordinal as u64, rng_purpose::PROMPTS);
        resample_prompts(&mut tc, vocab, probs, &mut rng);
        batch.push(tc);
    }
    mask(&batch, variant, cfg.mask_rate, vocab, cfg.seed, step)
}

/// Mean held-out loss under a fixed evaluation seed: every known annotation
/// prompt is attached (no balancing subsampling) and masks are drawn from
/// `eval_seed` only, so repeated calls are identical.
pub fn eval_heldout_loss(
    params: &ModelParams,
    cells: &[TokenizedCell],
    vocab: &Vocabulary,
    mask_rate: f64,
    eval_seed: u64,
    batch_size: usize,
) -> Result<LossReport> {
    if cells.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let variant = params.config.variant;
    let always = BalanceTables::always();
    let mut total = LossReport { total: 0.0, mlm: 0.0, cls: 0.0 };
    let mut n_cells = 0usize;
    for (chunk_idx, chunk) in cells.chunks(batch_size).enumerate() {
        let mut batch: Vec<TokenizedCell> = Vec::with_capacity(chunk.len());
        for (ordinal, tc) in chunk.iter().enumerate() {
            let mut tc = tc.clone();
            let mut rng =
                cell_rng(eval_seed, chunk_idx as u64, ordinal as u64, rng_purpose::PROMPTS);
            resample_prompts(&mut tc, vocab, &always, &mut rng);
            batch.push(tc);
        }
        let masked = mask(&batch, variant, mask_rate, vocab, eval_seed, chunk_idx as u64);
        let out = model::forward(params, &masked, Default::default())?;
        let mlm = match variant {
            Variant::G => model::mlm_g_loss(&out, &masked),
            Variant::X => model::mlm_x_loss(&out, &masked),
        };
        let cls = model::cls_loss(&out, &masked);
        let w = chunk.len() as f64;
        total.mlm += mlm * w;
        total.cls += cls * w;
        total.total += (mlm + cls) * w;
        n_cells += chunk.len();
    }
    let n = n_cells as f64;
    Ok(LossReport { total: total.total / n, mlm: total.mlm / n, cls: total.cls / n })
}

/// How long a run may sit above 10x its initial loss before it is declared
/// divergent.
const DIVERGENCE_PATIENCE: u64 = 100;
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Run (or resume) pre-training. `resume` restarts from a checkpoint's step
/// and optimizer moments; with the same seed the continuation is bit-exact
/// with an uninterrupted run. Returns the final loss, the loss log, and the
/// path of the last checkpoint written.
pub fn pretrain(
    mut params: ModelParams,
    train_cells: &[TokenizedCell],
    val_cells: &[TokenizedCell],
    vocab: &Vocabulary,
    probs: &BalanceTables,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cells.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let variant = params.config.variant;
    let steps_per_epoch = train_cells.len().div_ceil(cfg.batch_size) as u64;

    let mut opt = OptState::default();
    let mut start_step = 0u64;
    if let Some(ckpt) = resume {
        if ckpt.params.config != params.config {
            return Err(Error::Checkpoint("checkpoint config differs from requested model".into()));
        }
        params = ckpt.params;
        opt = ckpt.opt.unwrap_or_default();
        start_step = ckpt.step;
    }

    let mut log: Vec<LogRow> = Vec::new();
    let log_path = out_dir.join("loss_log.tsv");
    let mut ckpt_path = out_dir.join(format!("checkpoint-{:08}.ckpt", cfg.total_steps));
    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0u64;
    let mut last_report = LossReport { total: f64::NAN, mlm: f64::NAN, cls: f64::NAN };

    for step in start_step..cfg.total_steps {
        let epoch = step / steps_per_epoch;
        let within = (step % steps_per_epoch) as usize;
        let order = epoch_order(train_cells.len(), cfg.seed, epoch);
        let batch = training_batch(
            train_cells,
            &order,
            within * cfg.batch_size,
            cfg,
            vocab,
            probs,
            variant,
            step,
        );
        let lr = lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr)?;
        let (report, grads) = model::backward(&params, &batch, cfg.w_mlm, cfg.w_cls)
            .map_err(|e| match e {
                Error::NonFinite { tensor } => Error::Diverged {
                    step: step as usize,
                    msg: format!("non-finite value in {tensor}"),
                },
                other => other,
            })?;
        adamw_step(&mut params, &grads, &mut opt, lr, cfg).map_err(|e| match e {
            Error::NonFinite { tensor } => {
                Error::Diverged { step: step as usize, msg: format!("non-finite update to {tensor}") }
            }
            other => other,
        })?;
        last_report = report;

        let init = *initial_loss.get_or_insert(report.total);
        if report.total > DIVERGENCE_FACTOR * init {
            high_loss_streak += 1;
            if high_loss_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: step as usize,
                    msg: format!(
                        "loss {:.4} above {DIVERGENCE_FACTOR}x initial {:.4} for {DIVERGENCE_PATIENCE} consecutive steps",
                        report.total, init
                    ),
                });
            }
        } else {
            high_loss_streak = 0;
        }

        let last = step + 1 == cfg.total_steps;
        if step % cfg.log_every == 0 || last {
            let val = if val_cells.is_empty() {
                f64::NAN
            } else {
                eval_heldout_loss(&params, val_cells, vocab, cfg.mask_rate, cfg.seed, cfg.batch_size)?
                    .total
            };
            log.push(LogRow { step, train_loss: report.total, val_loss: val, lr });
            write_log(&log_path, &log)?;
        }
        if (step + 1) % cfg.checkpoint_every == 0 || last {
            let ckpt = Checkpoint {
                params: params.clone(),
                seed: cfg.seed,
                step: step + 1,
                opt: Some(opt.clone()),
            };
            ckpt_path = out_dir.join(format!("checkpoint-{:08}.ckpt", step + 1));
            checkpoint::save(&ckpt, &ckpt_path)?;
        }
    }

    Ok(TrainOutcome { final_loss: last_report, log, checkpoint_path: ckpt_path })
}

/// Least-squares fit of loss = a * n^b on log-log axes. Points with
/// non-positive coordinates are rejected.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("power-law fit needs at least two points".into()));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(n, l) in points {
        if n <= 0.0 || l <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "power-law fit needs positive coordinates, got ({n}, {l})"
            )));
        }
        xs.push(n.ln());
        ys.push(l.ln());
    }
    let m = points.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    if var == 0.0 {
        return Err(Error::InvalidInput("power-law fit needs at least two distinct sizes".into()));
    }
    let b = cov / var;
    let a = (my - b * mx).exp();
    Ok((a, b))
}
