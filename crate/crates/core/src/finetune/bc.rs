//! Behavior cloning on expert transitions over a frozen backbone.

use std::path::{Path, PathBuf};

use autograd::{Array, Tape};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backbone_features, backbone_fingerprint, prepare_stack, MetricsLog, OfflineBcSpec};
use crate::augment::augment;
use crate::data::{ReplayDataset, StackedObservation, ACTION_COUNT};
use crate::model::{Checkpoint, EncoderStack};
use crate::nn::Binding;
use crate::optim::{AdamConfig, AdamW};
use crate::pretrain::lr_at;
use crate::{Error, Result};

/// Head trained by behavior cloning.
pub const BC_HEAD: &str = "policy";

#[derive(Debug)]
pub struct BcOutcome {
    pub stack: EncoderStack,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub metrics: PathBuf,
}

impl BcOutcome {
    /// Greedy action of the adapted policy.
    pub fn act(&self, obs: &StackedObservation, game: &str) -> Result<usize> {
        greedy_bc_action(&self.stack, obs, game)
    }
}

/// Re-initializes neck and heads, freezes the backbone and minimizes
/// cross-entropy to the expert's actions on `game`'s transitions.
/// `epochs == 0` returns the freshly initialized stack.
pub fn finetune_offline_bc(checkpoint: &Checkpoint, game: &str, dataset: &ReplayDataset, spec: &OfflineBcSpec, out_dir: &Path) -> Result<BcOutcome> {
    spec.validate()?;
    spec.augment.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stack = prepare_stack(checkpoint, game, &mut rng)?;
    let latent = stack.latent_dim();
    stack.add_head(BC_HEAD, latent, ACTION_COUNT, &mut rng)?;
    let frozen_print = backbone_fingerprint(&stack);

    let mut index = Vec::new();
    for (e, ep) in dataset.episodes().iter().enumerate() {
        if ep.game == game {
            index.extend((0..ep.len()).map(|t| (e, t)));
        }
    }
    if index.is_empty() {
        return Err(Error::Sampling(format!("no expert transitions for `{game}`")));
    }
    if index.len() != spec.expected_transitions {
        log::warn!("expert dataset for {game} holds {} transitions, expected {}", index.len(), spec.expected_transitions);
    }
    let obs_of = |&(e, t): &(usize, usize)| dataset.episodes()[e].stack(t);
    let action_of = |&(e, t): &(usize, usize)| dataset.episodes()[e].actions[t] as usize;

    let augmenting = spec.augment.shift || spec.augment.intensity;
    let cache = if augmenting {
        None
    } else {
        let all: Vec<StackedObservation> = index.iter().map(obs_of).collect();
        let refs: Vec<&StackedObservation> = all.iter().collect();
        Some(backbone_features(&stack, &refs)?)
    };

    let per_epoch = index.len().div_ceil(spec.batch_size) as u64;
    let total = per_epoch * spec.epochs as u64;
    let mut opt = AdamW::new(AdamConfig { beta1: spec.betas[0], beta2: spec.betas[1], eps: 1e-8, weight_decay: spec.weight_decay });
    opt.config.validate()?;
    let mut log = MetricsLog::create(out_dir)?;
    let mut order: Vec<usize> = (0..index.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let mut step = 0u64;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for rows in order.chunks(spec.batch_size) {
            let feats = match &cache {
                Some(c) => c.select(Axis(0), rows),
                None => {
                    let aug: Vec<StackedObservation> = rows.iter().map(|&r| augment(&obs_of(&index[r]), &spec.augment, &mut rng).0).collect();
                    let refs: Vec<&StackedObservation> = aug.iter().collect();
                    backbone_features(&stack, &refs)?
                }
            };
            let actions: Vec<usize> = rows.iter().map(|&r| action_of(&index[r])).collect();
            let lr = lr_at(step, total, spec.lr, &spec.schedule);
            let grads = {
                let tape = Tape::new();
                let b = Binding::new(&tape, &stack.params);
                let loss = bc_loss(&stack, &b, feats, &actions, game);
                let value = loss.value()[[]];
                if !value.is_finite() {
                    return Err(Error::Diverged { step, last_good: None });
                }
                sum += value;
                log.row(serde_json::json!({ "kind": "step", "step": step, "epoch": epoch, "loss": value, "lr": lr }))?;
                b.gradients(&mut tape.backward(loss))
            };
            opt.step(&mut stack.params, &grads, lr)?;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        log.row(serde_json::json!({ "kind": "epoch", "epoch": epoch, "mean_loss": mean }))?;
        epoch_losses.push(mean);
    }
    if backbone_fingerprint(&stack) != frozen_print {
        return Err(Error::InvalidArgument("backbone changed during behavior cloning".into()));
    }
    log.row(serde_json::json!({ "kind": "done", "steps": step, "backbone": frozen_print }))?;
    Ok(BcOutcome { stack, steps: step, epoch_losses, metrics: log.finish()? })
}

fn bc_loss<'t>(stack: &EncoderStack, b: &Binding<'t, '_>, feats: Array, actions: &[usize], game: &str) -> autograd::Var<'t> {
    let n = actions.len();
    let games = vec![game; n];
    let tape = b.tape();
    let logits = policy_logits(stack, b, tape.constant(feats), &games);
    let mask = Array::from_shape_fn(vec![n, ACTION_COUNT], |d| (d[1] == actions[d[0]]) as u8 as f64);
    (logits.log_softmax(1) * tape.constant(mask)).sum().scale(-1.0 / n as f64)
}

fn policy_logits<'t>(stack: &EncoderStack, b: &Binding<'t, '_>, z: autograd::Var<'t>, games: &[&str]) -> autograd::Var<'t> {
    stack.head(b, BC_HEAD, stack.neck(b, z, games), games)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in row.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

pub fn greedy_bc_action(stack: &EncoderStack, obs: &StackedObservation, game: &str) -> Result<usize> {
    stack.check_games(&[game])?;
    let feats = backbone_features(stack, &[obs])?;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &stack.params);
    let logits = policy_logits(stack, &b, tape.constant(feats), &[game]).value();
    Ok(argmax(logits.iter().copied()))
}

/// Fraction of `game`'s transitions on which the greedy policy picks the
/// recorded action.
pub fn expert_agreement(stack: &EncoderStack, dataset: &ReplayDataset, game: &str) -> Result<f64> {
    stack.check_games(&[game])?;
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    for ep in dataset.episodes().iter().filter(|e| e.game == game) {
        for t in 0..ep.len() {
            obs.push(ep.stack(t));
            actions.push(ep.actions[t] as usize);
        }
    }
    if obs.is_empty() {
        return Err(Error::Sampling(format!("no transitions for `{game}`")));
    }
    let refs: Vec<&StackedObservation> = obs.iter().collect();
    let feats = backbone_features(stack, &refs)?;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &stack.params);
    let games = vec![game; obs.len()];
    let logits = policy_logits(stack, &b, tape.constant(feats), &games).value();
    let hits = logits.outer_iter().zip(&actions).filter(|(row, &a)| argmax(row.iter().copied()) == a).count();
    Ok(hits as f64 / actions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentSpec;
    use crate::finetune::{backbone_fingerprint, expert_dataset, tiny_checkpoint, CHAIN_HORIZON};

    fn toy_spec(epochs: usize) -> OfflineBcSpec {
        OfflineBcSpec { epochs, batch_size: 32, augment: AugmentSpec::disabled(), expected_transitions: 400, ..OfflineBcSpec::default() }
    }

    #[test]
    fn zero_epochs_returns_reinitialized_stack() {
        let ckpt = tiny_checkpoint(1);
        let ds = expert_dataset(CHAIN_HORIZON, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = finetune_offline_bc(&ckpt, "Chain", &ds, &toy_spec(0), dir.path()).unwrap();
        assert_eq!(out.steps, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = prepare_stack(&ckpt, "Chain", &mut rng).unwrap();
        fresh.add_head(BC_HEAD, fresh.latent_dim(), ACTION_COUNT, &mut rng).unwrap();
        assert_eq!(out.stack.params.fingerprint(""), fresh.params.fingerprint(""));
        assert!(out.stack.backbone_frozen());
        assert_eq!(backbone_fingerprint(&out.stack), ckpt.params.fingerprint("backbone."));
    }

    #[test]
    fn toy_expert_is_recovered_with_backbone_untouched() {
        let ckpt = tiny_checkpoint(2);
        let ds = expert_dataset(CHAIN_HORIZON, 400).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = finetune_offline_bc(&ckpt, "Chain", &ds, &toy_spec(100), dir.path()).unwrap();
        assert_eq!(backbone_fingerprint(&out.stack), ckpt.params.fingerprint("backbone."));
        let agree = expert_agreement(&out.stack, &ds, "Chain").unwrap();
        assert!(agree >= 0.95, "agreement {agree}, losses {:?}", out.epoch_losses);
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
    }

    #[test]
    fn augmented_path_runs() {
        let ckpt = tiny_checkpoint(3);
        let ds = expert_dataset(CHAIN_HORIZON, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let spec = OfflineBcSpec { epochs: 1, batch_size: 8, expected_transitions: 12, ..OfflineBcSpec::default() };
        let out = finetune_offline_bc(&ckpt, "Chain", &ds, &spec, dir.path()).unwrap();
        assert_eq!(out.steps, 2);
        let rows = std::fs::read_to_string(&out.metrics).unwrap();
        assert_eq!(rows.lines().count(), 4);
    }

    #[test]
    fn unknown_game_has_no_data() {
        let ds = expert_dataset(CHAIN_HORIZON, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = finetune_offline_bc(&tiny_checkpoint(1), "Pong", &ds, &toy_spec(1), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }
}
