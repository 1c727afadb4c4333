//! Loss, schedule, AdamW and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::costvol::{SegmentationMap, IGNORE_INDEX};
use crate::diagnostics::{self, DeltaStats};
use crate::encoders::{TextEmbedding, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameters;
use crate::rng::{self, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a log record every `log_every` steps.
    pub log_every: u64,
    /// Compute perturbation diagnostics every `diag_every` steps (0 = never).
    pub diag_every: u64,
    /// Noise draws averaged per diagnostic measurement.
    pub diag_draws: usize,
    /// Intermediate checkpoint cadence (0 = final checkpoint only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 40_000,
            batch_size: 8,
            base_lr: 2e-4,
            warmup_steps: 0,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_every: 1,
            diag_every: 100,
            diag_draws: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if self.diag_draws == 0 {
            return Err(Error::Config("diag_draws must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup then half-cosine decay to zero. Steps past the end clamp.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    (cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// Mean per-pixel cross-entropy over non-ignored pixels and its gradient.
pub fn cross_entropy(logits: ArrayView3<f64>, gt: &SegmentationMap, ignore_index: u8) -> Result<(f64, Array3<f64>)> {
    let (h, w, n) = logits.dim();
    if gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "logits {h}x{w} vs ground truth {:?}",
            gt.dim()
        )));
    }
    let mut grad = Array3::zeros((h, w, n));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; n];
    for ((y, x), &label) in gt.0.indexed_iter() {
        if label == ignore_index {
            continue;
        }
        let label = label as usize;
        if label >= n {
            return Err(Error::InvalidArgument(format!(
                "ground-truth class {label} at ({y}, {x}) but only {n} classes"
            )));
        }
        let row = logits.slice(ndarray::s![y, x, ..]);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(row.iter()) {
            *p = (v - max).exp();
            sum += *p;
        }
        total += sum.ln() + max - row[label];
        for (c, p) in probs.iter().enumerate() {
            grad[[y, x, c]] = p / sum;
        }
        grad[[y, x, label]] -= 1.0;
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok((total * scale, grad))
}

pub fn compute_loss(logits: &crate::costvol::Logits, gt: &SegmentationMap) -> Result<f64> {
    Ok(cross_entropy(logits.tensor.view(), gt, IGNORE_INDEX)?.0)
}

/// AdamW with decoupled weight decay; moments are flat in parameter visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64, cfg: &TrainConfig) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match the parameters");
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            for (i, pv) in p.iter_mut().enumerate() {
                let k = offset + i;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pv *= 1.0 - lr * cfg.weight_decay;
                *pv -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
            offset += p.len();
        });
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |_, _, d| sq += d.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grads.visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v *= scale));
    }
    norm
}

/// One training image: frozen encoder features plus its label map.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: VisualFeatureMap,
    pub mask: SegmentationMap,
}

/// Encoded training data: one class list shared by every sample.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub text: TextEmbedding,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub delta: Option<DeltaStats>,
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_in_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_gt_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align_ratio: Option<f64>,
}

impl From<&StepMetrics> for LogRecord {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            loss: m.loss,
            lr: m.lr,
            gt_in_mean: m.delta.map(|d| d.gt_in_mean),
            non_gt_mean: m.delta.map(|d| d.non_gt_mean),
            gap: m.delta.map(|d| d.gap),
            align_ratio: m.delta.map(|d| d.align_ratio),
        }
    }
}

/// Sample indices of the batch at `step`: consecutive slices of per-epoch
/// permutations, each permutation seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, num_samples: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch_size as u64 {
        let g = step * batch_size as u64 + b;
        let epoch = g / num_samples as u64;
        let pos = (g % num_samples as u64) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..num_samples).collect();
            perm.shuffle(&mut rng::stream(seed, &["shuffle".into(), epoch.into()]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos]);
    }
    out
}

/// Owns the parameters and optimizer state for one run.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub data: &'a TrainingSet,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a TrainingSet) -> Result<Self> {
        config.validate()?;
        if data.samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let model = Model::init_seeded(config.model, config.train.seed)?;
        let optimizer = AdamW::new(model.num_params());
        Ok(Self {
            config,
            data,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: &'a TrainingSet) -> Result<Self> {
        ckpt.config.validate()?;
        if data.samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        Ok(Self {
            config: ckpt.config,
            data,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: RngState {
                seed: self.config.train.seed,
                next_step: self.step,
            },
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.train.total_steps
    }

    /// Forward, backward and one AdamW update on the batch for the current step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let cfg = &self.config.train;
        let step = self.step;
        let lr = lr_at(step, cfg);
        let indices = batch_indices(cfg.seed, step, cfg.batch_size, self.data.samples.len());
        let model = &self.model;
        let noise_spec = self.config.noise;
        let text = &self.data.text;
        let results: Vec<Result<(f64, Model)>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let sample = &self.data.samples[i];
                let mut r = rng::stream(cfg.seed, &["noise".into(), step.into(), slot.into()]);
                let noise = model.draw_noise(&noise_spec, &sample.features, &mut r)?;
                let pass = model.forward(&sample.features, text, sample.mask.dim(), Some(&noise))?;
                let (loss, d_logits) = cross_entropy(pass.logits.view(), &sample.mask, IGNORE_INDEX)?;
                Ok((loss, model.backward(&pass, d_logits.view())))
            })
            .collect();

        let inv = 1.0 / indices.len() as f64;
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * inv;
            let flat = g.flatten();
            let mut offset = 0;
            grads.visit_mut("", &mut |_, d| {
                for (dst, src) in d.iter_mut().zip(&flat[offset..]) {
                    *dst += src * inv;
                }
                offset += d.len();
            });
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }

        let delta = if cfg.diag_every > 0 && step.is_multiple_of(cfg.diag_every) {
            self.batch_delta_stats(&indices, step)?
        } else {
            None
        };

        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let train_cfg = cfg.clone();
        self.optimizer.step(&mut self.model, &grads, lr, &train_cfg);
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            lr,
            grad_norm,
            delta,
        })
    }

    fn batch_delta_stats(&self, indices: &[usize], step: u64) -> Result<Option<DeltaStats>> {
        let cfg = &self.config.train;
        let mut per_image = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let sample = &self.data.samples[i];
            let labels: [Label<'_>; 3] = ["diag".into(), step.into(), slot.into()];
            let mut r = rng::stream(cfg.seed, &labels);
            let delta = diagnostics::delta_cost(
                &self.model,
                &sample.features,
                &self.data.text,
                &self.config.noise,
                cfg.diag_draws,
                &mut r,
            )?;
            let (gh, gw) = sample.features.grid();
            let gt = diagnostics::downsample_majority(&sample.mask, gh, gw)?;
            per_image.push(diagnostics::delta_stats(&delta, &gt, diagnostics::ALIGN_EPS)?);
        }
        Ok(diagnostics::mean_stats(&per_image, step))
    }
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub log_path: Option<PathBuf>,
}

/// Run to `total_steps`, optionally resuming, writing logs and checkpoints
/// under `run_dir` when given.
pub fn run_training(
    config: &RunConfig,
    data: &TrainingSet,
    run_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = Trainer::from_checkpoint(ckpt, data)?;
            // the schedule may be extended on resume; everything else must match
            t.config.train.total_steps = config.train.total_steps;
            t
        }
        None => Trainer::new(config.clone(), data)?,
    };
    let log_path = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(dir.join("metrics.jsonl"))
        }
        None => None,
    };
    let mut log = match &log_path {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut metrics = Vec::new();
    while !trainer.is_done() {
        let m = match trainer.train_step() {
            Ok(m) => m,
            Err(Error::NonFinite(reason)) => {
                let dump = run_dir
                    .map(|d| d.join("abort.safetensors"))
                    .unwrap_or_else(|| std::env::temp_dir().join("ovseg-abort.safetensors"));
                trainer.checkpoint().save(&dump)?;
                return Err(Error::TrainingAborted {
                    step: trainer.step,
                    reason,
                    dump,
                });
            }
            Err(e) => return Err(e),
        };
        let cfg = &trainer.config.train;
        if let Some(f) = log.as_mut() {
            if m.step % cfg.log_every == 0 || m.delta.is_some() {
                serde_json::to_writer(&mut *f, &LogRecord::from(&m))?;
                f.write_all(b"\n")?;
            }
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && !trainer.is_done() {
                trainer
                    .checkpoint()
                    .save(&dir.join(format!("checkpoint_{:06}.safetensors", trainer.step)))?;
            }
        }
        log::debug!("step {} loss {:.5} lr {:.3e}", m.step, m.loss, m.lr);
        metrics.push(m);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = run_dir {
        checkpoint.save(&dir.join("final.safetensors"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        log_path,
    })
}
