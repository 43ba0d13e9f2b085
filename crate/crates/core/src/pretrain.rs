//! Pre-training driver: optimizer settings, learning-rate schedule, epoch
//! loop, momentum bookkeeping and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::data::{sample_batch, worker_rng, Regime, ReplayDataset, SampleView};
use crate::model::{tau_at, Checkpoint, EncoderStack, ModelConfig, MomentumMirror};
use crate::nn::Binding;
use crate::objectives::{LossContext, Objective, ObjectiveConfig, ObjectiveKind};
use crate::optim::{AdamConfig, AdamW};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on epochs, below `epochs`.
    #[serde(default)]
    pub early_stop: Option<usize>,
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    /// Published settings for each objective.
    pub fn for_objective(kind: ObjectiveKind) -> Self {
        use ObjectiveKind::*;
        let (lr, wd, b2, batch, epochs, early_stop) = match kind {
            Curl => (3e-6, 1e-5, 0.999, 512, 100, Some(20)),
            Mae | SiamMae => (3e-4, 5e-2, 0.95, 512, 100, None),
            Atc | R3m | Bc => (3e-4, 1e-5, 0.999, 512, 100, None),
            Idm => (3e-4, 1e-5, 0.999, 512, 100, Some(30)),
            Spr => (3e-4, 1e-4, 0.999, 128, 25, None),
            SprIdm => (3e-5, 1e-5, 0.999, 128, 25, None),
            CqlM | CqlD => (1e-4, 1e-5, 0.95, 512, 100, None),
            Dt => (1e-4, 5e-2, 0.95, 64, 12, None),
        };
        Self { lr, betas: [0.9, b2], weight_decay: wd, eps: default_eps(), batch_size: batch, epochs, early_stop }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be ≥ 1"));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.betas[0], beta2: self.betas[1], eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Epochs actually run: the configured count, capped by early stop and
    /// by the data regime.
    pub fn effective_epochs(&self, regime: Option<Regime>) -> usize {
        let mut e = self.epochs;
        if let Some(cap) = self.early_stop {
            e = e.min(cap);
        }
        if let Some(cap) = regime.and_then(Regime::epoch_cap) {
            e = e.min(cap);
        }
        e
    }
}

/// True once `completed` epochs reach the cap.
pub fn early_stop(completed: usize, cap: usize) -> bool {
    completed >= cap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub warmup_ratio: f64,
    pub initial_lr_ratio: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { warmup_ratio: 0.1, initial_lr_ratio: 0.1 }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("warmup_ratio", self.warmup_ratio), ("initial_lr_ratio", self.initial_lr_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("schedule.{f}"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `initial_lr_ratio·base` to `base`, then cosine decay to 0.
pub fn lr_at(step: u64, total: u64, base: f64, s: &ScheduleSpec) -> f64 {
    if total == 0 {
        return base * s.initial_lr_ratio;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warmup = s.warmup_ratio * total;
    if step < warmup {
        return base * (s.initial_lr_ratio + (1.0 - s.initial_lr_ratio) * step / warmup);
    }
    let progress = if total > warmup { (step - warmup) / (total - warmup) } else { 1.0 };
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Loader threads; results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub regime: Option<Regime>,
    /// Shortens every epoch to at most this many steps.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

fn one() -> usize {
    1
}

impl PretrainConfig {
    pub fn new(objective: ObjectiveConfig, model: ModelConfig, seed: u64) -> Self {
        let optimizer = OptimizerSpec::for_objective(objective.kind);
        Self {
            objective,
            model,
            optimizer,
            schedule: ScheduleSpec::default(),
            augment: AugmentSpec::default(),
            seed,
            workers: 1,
            regime: None,
            max_steps_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.workers == 0 {
            return Err(Error::config("workers", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Optimizer steps per epoch; the partial final batch is dropped.
    pub fn steps_per_epoch(&self, transitions: usize) -> usize {
        let full = transitions / self.optimizer.batch_size;
        self.max_steps_per_epoch.map_or(full, |m| full.min(m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
    pub ema_updates: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.rpck";

fn checkpoint_meta(stack: &EncoderStack, cfg: &PretrainConfig, epoch: usize, step: u64) -> serde_json::Value {
    serde_json::json!({
        "stack": stack.meta(),
        "objective": cfg.objective,
        "epoch": epoch,
        "step": step,
    })
}

/// Fresh stack for `cfg` over `games`, with objective parameters declared.
pub fn initial_stack(cfg: &PretrainConfig, objective: &Objective, games: &[String]) -> Result<EncoderStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = EncoderStack::new(cfg.model.clone(), games, &mut rng)?;
    objective.declare(&mut stack, &mut rng)?;
    Ok(stack)
}

/// Randomness for one step: sampling, augmentation and masking each get
/// their own stream so changing one never shifts another.
fn step_streams(seed: u64, step: u64) -> [ChaCha8Rng; 3] {
    [0, 1, 2].map(|k| worker_rng(seed.wrapping_add(k), step))
}

fn sample_step(ds: &ReplayDataset, objective: &Objective, cfg: &PretrainConfig, step: u64) -> Result<Vec<SampleView>> {
    let [mut s, mut a, _] = step_streams(cfg.seed, step);
    let raw = sample_batch(ds, &objective.view_spec(), cfg.optimizer.batch_size, &mut s)?;
    Ok(objective.prepare(&raw, &cfg.augment, &mut a))
}

fn write_row(w: &mut impl Write, path: &Path, row: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *w, row)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Runs pre-training, writing `metrics.jsonl`, a checkpoint per epoch
/// and `final.rpck` under `out_dir`. Each step samples, augments, takes a
/// gradient step and then updates the momentum mirror.
pub fn pretrain(cfg: &PretrainConfig, dataset: &ReplayDataset, out_dir: &Path) -> Result<PretrainReport> {
    cfg.validate()?;
    let objective = Objective::new(cfg.objective.clone())?;
    let mut stack = initial_stack(cfg, &objective, dataset.games())?;
    let mut mirror = objective.kind().mirror_prefixes().map(|p| MomentumMirror::new(&stack.params, p));
    let mut opt = AdamW::new(cfg.optimizer.adam());

    let epochs = cfg.optimizer.effective_epochs(cfg.regime);
    let per_epoch = cfg.steps_per_epoch(dataset.transition_count());
    if epochs > 0 && per_epoch == 0 {
        return Err(Error::Sampling(format!(
            "{} transitions cannot fill one batch of {}",
            dataset.transition_count(),
            cfg.optimizer.batch_size
        )));
    }
    let total = (epochs * per_epoch) as u64;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&metrics).map_err(|e| Error::io(&metrics, e))?);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("loader pool: {e}")))?;

    let mut step = 0u64;
    let mut summaries = Vec::with_capacity(epochs);
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        let mut done = 0usize;
        while done < per_epoch {
            // Prefetch one batch per worker; each step owns its random streams.
            let chunk = cfg.workers.min(per_epoch - done) as u64;
            let batches: Vec<Vec<SampleView>> =
                pool.install(|| (step..step + chunk).into_par_iter().map(|s| sample_step(dataset, &objective, cfg, s)).collect::<Result<_>>())?;
            for views in batches {
                let [_, _, mut mask_rng] = step_streams(cfg.seed, step);
                let lr = lr_at(step, total, cfg.optimizer.lr, &cfg.schedule);
                let (out, grads) = {
                    let tape = autograd::Tape::new();
                    let online = Binding::new(&tape, &stack.params);
                    let target = mirror.as_ref().map(|m| Binding::frozen(&tape, &m.shadow));
                    let ctx = LossContext { stack: &stack, online: &online, target: target.as_ref() };
                    let terms = match objective.loss(&ctx, &views, &mut mask_rng) {
                        Ok(t) => t,
                        Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, last_good }),
                        Err(e) => return Err(e),
                    };
                    let out = terms.output();
                    let mut g = tape.backward(terms.loss);
                    (out, online.gradients(&mut g))
                };
                opt.step(&mut stack.params, &grads, lr)?;
                if !stack.params.all_finite() {
                    return Err(Error::Diverged { step, last_good });
                }
                let tau = match mirror.as_mut() {
                    Some(m) => {
                        let tau = tau_at(step, total, cfg.objective.tau_start, cfg.objective.tau_end);
                        m.update(&stack.params, tau)?;
                        Some(tau)
                    }
                    None => None,
                };
                let rec = StepRecord { step, epoch, loss: out.loss, lr, tau, diagnostics: out.diagnostics };
                write_row(&mut log, &metrics, &serde_json::json!({ "kind": "step", "record": rec }))?;
                sum += out.loss;
                step += 1;
                done += 1;
            }
        }
        let summary = EpochSummary { epoch, steps: done, mean_loss: sum / done as f64 };
        write_row(&mut log, &metrics, &serde_json::json!({ "kind": "epoch", "record": summary }))?;
        log::info!("epoch {epoch}/{epochs}: mean loss {:.6}", summary.mean_loss);
        summaries.push(summary);
        let path = ckpt_dir.join(format!("epoch_{epoch:03}.rpck"));
        Checkpoint { meta: checkpoint_meta(&stack, cfg, epoch, step), params: stack.params.clone(), mirror: mirror.as_ref().map(|m| m.shadow.clone()) }
            .save(&path)?;
        checkpoints.push(path.clone());
        last_good = Some(path);
        if early_stop(epoch, epochs) {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    Checkpoint {
        meta: checkpoint_meta(&stack, cfg, summaries.len(), step),
        params: stack.params.clone(),
        mirror: mirror.as_ref().map(|m| m.shadow.clone()),
    }
    .save(&final_checkpoint)?;
    Ok(PretrainReport {
        epochs: summaries,
        steps: step,
        ema_updates: mirror.map_or(0, |m| m.updates),
        checkpoints,
        final_checkpoint,
        metrics,
    })
}
