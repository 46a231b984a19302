//! Loss, gradients, AdamW, the OneCycle schedule and the training loop.
//!
//! Gradients are accumulated per sample in fixed-size chunks and the chunk
//! sums are reduced in index order, so a step gives bit-identical results for
//! any worker thread count.

mod checkpoint;
mod sampler;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use sampler::{balanced_batches, BatchSampler};

use crate::align::{AlignedLayout, TemplateInput};
use crate::error::{Error, Result};
use crate::model::{backward, forward_cached, ModelConfig, ModelParams, Real};

/// Samples per gradient chunk. Fixed so the reduction order never depends on
/// the thread pool.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub balanced_sampling: bool,
    pub seed: u64,
    /// Fraction of steps spent ramping up to `lr_max`.
    pub warmup_frac: f64,
    /// The schedule ends at `lr_init / final_div`.
    pub final_div: f64,
    /// Caps the number of optimizer steps; `None` runs every epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr_init: 2.5e-4,
            lr_max: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            balanced_sampling: true,
            seed: 0,
            warmup_frac: 0.3,
            final_div: 100.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr_init >= 0.0 && self.lr_init <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config("train.lr_init", "need 0 <= lr_init <= lr_max"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::config("train.eps_adam", "must be positive"));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config("train.warmup_frac", "must lie in (0, 1)"));
        }
        if !(self.final_div >= 1.0) {
            return Err(Error::config("train.final_div", "must be at least 1"));
        }
        Ok(())
    }

    /// Optimizer steps for `n` training trials.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |cap| cap.min(full))
    }
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    assert!(label < logits.len(), "label {label} out of range for {} classes", logits.len());
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let loss = z.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / z).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Mean cross-entropy over a batch and its exact gradient.
pub fn batch_gradient<T: Real, X: AsRef<[T]> + Sync>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    inputs: &[X],
    labels: &[usize],
) -> Result<(T, ModelParams<T>)> {
    assert_eq!(inputs.len(), labels.len());
    if inputs.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let partials: Vec<(T, ModelParams<T>)> = inputs
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .map(|(xs, ys)| {
            let mut grads = params.zeros_like();
            let mut loss = T::zero();
            for (x, &y) in xs.iter().zip(ys) {
                let cache = forward_cached(x.as_ref(), params, cfg)?;
                let (l, dl) = cross_entropy(&cache.logits, y);
                loss = loss + l;
                backward(params, cfg, &cache, &dl, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().unwrap();
    for (l, g) in parts {
        loss = loss + l;
        grads.add_assign(&g);
    }
    let inv = T::one() / T::cast(inputs.len() as f64);
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// First and second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor at 1-based step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    decay: bool,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for (((p, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g as f64;
        let m_new = b1 * *mi as f64 + (1.0 - b1) * g;
        let v_new = b2 * *vi as f64 + (1.0 - b2) * g * g;
        *mi = m_new as f32;
        *vi = v_new as f32;
        let m_hat = m_new / c1;
        let v_hat = v_new / c2;
        let th = *p as f64;
        *p = (th - lr * (m_hat / (v_hat.sqrt() + cfg.eps_adam) + wd * th)) as f32;
    }
}

/// AdamW with decoupled weight decay on weight matrices only.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let names = params.names();
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, p), g), m), v) in names.iter().zip(params.tensors_mut()).zip(grads).zip(ms).zip(vs) {
        adamw_update(
            &mut p.data,
            &g.data,
            &mut m.data,
            &mut v.data,
            state.step,
            lr,
            ModelParams::<f32>::decays(name),
            cfg,
        );
    }
}

/// OneCycle learning rate: cosine ramp `lr_init -> lr_max` over the warmup
/// steps, then cosine decay to `lr_init / final_div` at the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::arg(format!("step {step} outside schedule of {total_steps} steps")));
    }
    if total_steps == 1 {
        return Ok(cfg.lr_init);
    }
    let warm = ((cfg.warmup_frac * total_steps as f64).round() as usize).clamp(1, total_steps - 1);
    let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(if step <= warm {
        cos_interp(cfg.lr_init, cfg.lr_max, step as f64 / warm as f64)
    } else {
        let frac = (step - warm) as f64 / (total_steps - 1 - warm) as f64;
        cos_interp(cfg.lr_max, cfg.lr_init / cfg.final_div, frac)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, r.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final checkpoint, or the last finite one if training diverged.
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    /// Step at which the loss or gradient became non-finite.
    pub diverged_at: Option<usize>,
}

impl Checkpoint {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(model: ModelConfig, layout: AlignedLayout, class_names: Vec<String>, seed: u64) -> Result<Self> {
        model.validate()?;
        if model.n_channels != layout.n_channels() || model.template_len != layout.template_len() {
            return Err(Error::TemplateMismatch(format!(
                "model expects {}x{}, layout provides {}x{}",
                model.n_channels,
                model.template_len,
                layout.n_channels(),
                layout.template_len()
            )));
        }
        if class_names.len() != model.transformer.n_classes {
            return Err(Error::config(
                "model.transformer.n_classes",
                format!("{} classes configured, dataset has {}", model.transformer.n_classes, class_names.len()),
            ));
        }
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Checkpoint { model, layout, class_names, params, optimizer: None, train: None })
    }

    pub(crate) fn check_inputs(&self, inputs: &[TemplateInput]) -> Result<()> {
        for (i, x) in inputs.iter().enumerate() {
            if x.n_channels != self.model.n_channels || x.template_len != self.model.template_len {
                return Err(Error::TemplateMismatch(format!(
                    "trial {i} is {}x{}, model expects {}x{}",
                    x.n_channels, x.template_len, self.model.n_channels, self.model.template_len
                )));
            }
            if x.label >= self.class_names.len() {
                return Err(Error::data(format!("trials[{i}].label"), "label out of range"));
            }
        }
        Ok(())
    }
}

/// Trains `start` on the pooled `inputs`, continuing its optimizer state if present.
///
/// Each step samples a batch, computes the mean loss and gradient, and applies
/// AdamW at the OneCycle rate. A non-finite loss or gradient stops training and
/// returns the last finite parameters.
pub fn train(inputs: &[TemplateInput], start: Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    start.check_inputs(inputs)?;
    if inputs.is_empty() {
        return Err(Error::data("trials", "empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let labels: Vec<usize> = inputs.iter().map(|x| x.label).collect();
    let sampler = if cfg.balanced_sampling {
        BatchSampler::balanced(&labels, start.class_names.len(), cfg.batch_size, rng)?
    } else {
        BatchSampler::shuffled(inputs.len(), cfg.batch_size, rng)?
    };

    let total = cfg.total_steps(inputs.len());
    let steps_per_epoch = inputs.len().div_ceil(cfg.batch_size);
    let mut ck = start;
    let mut state = ck.optimizer.take().unwrap_or_else(|| OptimizerState::new(&ck.params));
    let mut history = Vec::with_capacity(total);
    let mut diverged_at = None;
    info!("training on {} trials for {total} steps", inputs.len());

    for (step, batch) in sampler.take(total).enumerate() {
        let xs: Vec<&[f32]> = batch.iter().map(|&i| inputs[i].data.as_slice()).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = match batch_gradient(&ck.params, &ck.model, &xs, &ys) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                warn!("step {step}: {msg}; stopping");
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.all_finite() {
            warn!("step {step}: non-finite loss or gradient; stopping");
            diverged_at = Some(step);
            break;
        }
        let lr = onecycle_lr(step, total, cfg)?;
        let epoch = step / steps_per_epoch;
        adamw_step(&mut ck.params, &grads, &mut state, lr, cfg);
        if step % steps_per_epoch.max(1) == 0 || step + 1 == total {
            info!("step {step:>6}  epoch {epoch:>3}  loss {loss:.5}  lr {lr:.3e}");
        }
        history.push(LossRecord { step, epoch, loss: loss as f64, lr });
    }
    ck.optimizer = Some(state);
    ck.train = Some(cfg.clone());
    Ok(TrainOutcome { checkpoint: ck, history, diverged_at })
}

/// Per-subject chronological split: the first `fraction` of each subject's
/// trials (in input order) go to tuning, the rest to evaluation.
pub fn chronological_split(trials: &[TemplateInput], fraction: f64) -> Result<(Vec<TemplateInput>, Vec<TemplateInput>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("fine-tuning fraction {fraction} must lie in (0, 1)")));
    }
    let mut by_subject: BTreeMap<&str, Vec<&TemplateInput>> = BTreeMap::new();
    for t in trials {
        by_subject.entry(t.domain_id.subject()).or_default().push(t);
    }
    let (mut tune, mut eval) = (Vec::new(), Vec::new());
    for (subject, ts) in by_subject {
        let n_tune = (fraction * ts.len() as f64).round() as usize;
        if n_tune == 0 || n_tune == ts.len() {
            return Err(Error::data(
                format!("subject {subject}"),
                format!("{} trials are too few to split at fraction {fraction}", ts.len()),
            ));
        }
        tune.extend(ts[..n_tune].iter().map(|&t| t.clone()));
        eval.extend(ts[n_tune..].iter().map(|&t| t.clone()));
    }
    Ok((tune, eval))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub tuned: TrainOutcome,
    /// Held-out trials of every subject, for evaluation.
    pub eval: Vec<TemplateInput>,
}

/// Continues training `ckpt` on the first `fraction` of each subject's trials.
pub fn finetune(ckpt: &Checkpoint, trials: &[TemplateInput], fraction: f64, cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    let (tune, eval) = chronological_split(trials, fraction)?;
    let tuned = if cfg.total_steps(tune.len()) == 0 {
        TrainOutcome { checkpoint: ckpt.clone(), history: Vec::new(), diverged_at: None }
    } else {
        train(&tune, ckpt.clone(), cfg)?
    };
    Ok(FinetuneOutcome { tuned, eval })
}

#[cfg(test)]
mod tests;
