//! Downstream adaptation over a frozen backbone: offline behavior cloning
//! and online distributional RL.

mod bc;
mod env;
mod rainbow;
mod replay;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autograd::{Array, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::data::StackedObservation;
use crate::model::{Checkpoint, EncoderStack};
use crate::nn::Binding;
use crate::pretrain::ScheduleSpec;
use crate::{Error, Result};

pub use bc::{expert_agreement, finetune_offline_bc, greedy_bc_action, BcOutcome};
pub use env::{evaluate_policy, expert_dataset, ChainEnv, CHAIN_EXIT_REWARD, CHAIN_GOAL_REWARD, CHAIN_HORIZON, CHAIN_STATES, EnvStep, EnvironmentAdapter, StepInfo, TabularMdp, ValueIteration};
pub use rainbow::{evaluate_greedy, finetune_online_rl, greedy_action, RainbowOutcome};
pub use replay::{nstep_return, priority_weight, NStepAccumulator, NStepReturn, NStepStep, PrioritizedReplay, ReplayItem, SumTree};

/// Expected number of expert transitions per game.
pub const EXPERT_TRANSITIONS: usize = 50_000;

/// Observations per forward pass when computing backbone features.
const ENCODE_CHUNK: usize = 64;

/// Metrics rows file written by both protocols.
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineBcSpec {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "augment_on")]
    pub augment: AugmentSpec,
    pub expected_transitions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn augment_on() -> AugmentSpec {
    AugmentSpec::default()
}

impl Default for OfflineBcSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            batch_size: 512,
            schedule: ScheduleSpec::default(),
            augment: augment_on(),
            expected_transitions: EXPERT_TRANSITIONS,
            seed: 0,
        }
    }
}

impl OfflineBcSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("finetune.bc.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("finetune.bc.lr", "lr must be > 0 and weight_decay ≥ 0"));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainbowSpec {
    pub steps: u64,
    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub dueling: bool,
    pub gamma: f64,
    pub batch_size: usize,
    pub n_step: usize,
    pub capacity: usize,
    pub min_buffer: u64,
    pub priority_exponent: f64,
    pub priority_correction: [f64; 2],
    pub priority_floor: f64,
    pub updates_per_step: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_steps: u64,
    pub hidden: usize,
    pub max_grad_norm: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub target_update: u64,
    pub eval_episodes: usize,
    /// Greedy evaluation every this many env steps (0 disables).
    #[serde(default)]
    pub eval_every: u64,
    /// Stop once a periodic greedy evaluation reaches this mean return.
    #[serde(default)]
    pub stop_at_return: Option<f64>,
    /// Safety cap on the length of an evaluation episode.
    pub max_episode_steps: u64,
}

impl Default for RainbowSpec {
    fn default() -> Self {
        Self {
            steps: 50_000,
            atoms: 51,
            v_min: -10.0,
            v_max: 10.0,
            dueling: true,
            gamma: 0.99,
            batch_size: 32,
            n_step: 10,
            capacity: 50_000,
            min_buffer: 2_000,
            priority_exponent: 0.5,
            priority_correction: [0.4, 1.0],
            priority_floor: 1e-6,
            updates_per_step: 2,
            epsilon_start: 1.0,
            epsilon_end: 0.02,
            epsilon_steps: 50_000,
            hidden: 1024,
            max_grad_norm: 10.0,
            lr: 1e-4,
            adam_eps: 1.5e-5,
            target_update: 2_000,
            eval_episodes: 100,
            eval_every: 0,
            stop_at_return: None,
            max_episode_steps: 27_000,
        }
    }
}

impl RainbowSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("finetune.rainbow.{f}"), m));
        if self.atoms < 2 || !(self.v_max > self.v_min) {
            return bad("atoms", "need ≥ 2 atoms on a non-empty support");
        }
        if self.n_step == 0 {
            return bad("n_step", "must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.capacity == 0 || self.updates_per_step == 0 {
            return bad("batch_size", "batch, capacity and updates per step must be positive");
        }
        if self.target_update == 0 {
            return bad("target_update", "must be positive");
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0 && self.max_grad_norm > 0.0) {
            return bad("lr", "lr, adam_eps and max_grad_norm must be positive");
        }
        Ok(())
    }

    /// Gradient updates the loop performs for `steps` env steps.
    pub fn expected_updates(&self) -> u64 {
        self.steps.saturating_sub(self.min_buffer) * self.updates_per_step as u64
    }
}

/// Exploration rate: linear from start to end over `epsilon_steps`, then flat.
pub fn epsilon_at(step: u64, spec: &RainbowSpec) -> f64 {
    linear(step, spec.epsilon_steps, spec.epsilon_start, spec.epsilon_end)
}

/// Importance-sampling exponent, annealed over the run.
pub fn beta_at(step: u64, spec: &RainbowSpec) -> f64 {
    let [b0, b1] = spec.priority_correction;
    linear(step, spec.steps, b0, b1)
}

fn linear(step: u64, span: u64, from: f64, to: f64) -> f64 {
    if span == 0 || step >= span {
        return to;
    }
    from + (to - from) * step as f64 / span as f64
}

/// Loads a pre-trained stack for adaptation on `game`: neck and heads are
/// re-drawn, objective-specific parameters dropped, the backbone frozen.
pub fn prepare_stack(checkpoint: &Checkpoint, game: &str, rng: &mut ChaCha8Rng) -> Result<EncoderStack> {
    let mut stack = EncoderStack::from_checkpoint(checkpoint)?;
    stack.register_game(game, rng);
    stack.reinit_neck_head(rng);
    stack.freeze_backbone();
    Ok(stack)
}

/// Hash of every backbone tensor, for bit-identity checks.
pub fn backbone_fingerprint(stack: &EncoderStack) -> String {
    stack.params.fingerprint("backbone.")
}

/// Frozen backbone output `(N, D, H, W)` for a batch of stacks.
pub fn backbone_features(stack: &EncoderStack, obs: &[&StackedObservation]) -> Result<Array> {
    let mut parts = Vec::new();
    for chunk in obs.chunks(ENCODE_CHUNK) {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &stack.params);
        let z = stack.backbone(&b, EncoderStack::input(&tape, chunk)?);
        parts.push((*z.value()).clone());
    }
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Stacks per-sample arrays along a new leading axis.
fn stack_rows(rows: &[&Array]) -> Result<Array> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Append-only JSON-lines log.
struct MetricsLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl MetricsLog {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        Ok(Self { path, w })
    }

    fn row(&mut self, row: serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.w, &row)?;
        self.w.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

/// Randomly initialized Tiny stack saved as a checkpoint.
#[cfg(test)]
pub(crate) fn tiny_checkpoint(seed: u64) -> Checkpoint {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = crate::model::ModelConfig::preset(crate::model::BackbonePreset::Tiny);
    let stack = EncoderStack::new(config, &["Pong".to_string()], &mut rng).unwrap();
    Checkpoint { meta: serde_json::json!({ "stack": stack.meta() }), params: stack.params.clone(), mirror: None }
}
