//! Distributional, dueling, double-Q learning with prioritized n-step replay
//! on cached features of a frozen backbone.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use autograd::{Array, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::env::evaluate_policy;
use super::replay::{NStepAccumulator, PrioritizedReplay, ReplayItem};
use super::{backbone_features, backbone_fingerprint, beta_at, epsilon_at, prepare_stack, stack_rows, EnvironmentAdapter, MetricsLog, RainbowSpec};
use crate::data::{clip_reward, StackedObservation, ACTION_COUNT};
use crate::model::{Checkpoint, EncoderStack};
use crate::nn::{mlp2, mlp2_params, Binding, ParamStore};
use crate::objectives::value::{categorical_projection, support};
use crate::optim::{clip_grad_norm, AdamConfig, AdamW};
use crate::{Error, Result};

/// Parameter prefix of the Q head.
const Q_HEAD: &str = "head.rainbow";

/// Metrics rows are written every this many updates.
const LOG_EVERY: u64 = 100;

type Features = Rc<Array>;

#[derive(Debug)]
pub struct RainbowOutcome {
    pub stack: EncoderStack,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    /// `(env step, mean greedy return)` of periodic evaluations.
    pub evaluations: Vec<(u64, f64)>,
    /// Per-episode returns of the final greedy evaluation.
    pub eval_returns: Vec<f64>,
    pub mean_return: f64,
    pub metrics: PathBuf,
}

/// Q network pieces on top of the stack's neck.
struct QNet<'a> {
    stack: &'a EncoderStack,
    game: &'a str,
    actions: usize,
    atoms: usize,
    dueling: bool,
}

impl QNet<'_> {
    fn declare(stack: &mut EncoderStack, spec: &RainbowSpec, actions: usize, rng: &mut ChaCha8Rng) {
        let d = stack.latent_dim();
        if spec.dueling {
            mlp2_params(&mut stack.params, &format!("{Q_HEAD}.value"), d, spec.hidden, spec.atoms, rng);
            mlp2_params(&mut stack.params, &format!("{Q_HEAD}.advantage"), d, spec.hidden, actions * spec.atoms, rng);
        } else {
            mlp2_params(&mut stack.params, &format!("{Q_HEAD}.q"), d, spec.hidden, actions * spec.atoms, rng);
        }
    }

    /// Log-probabilities over atoms, `(N, actions, atoms)`. The dueling
    /// form adds the state value to mean-centred advantages per atom.
    fn log_probs<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>) -> Var<'t> {
        let n = z.shape()[0];
        let games = vec![self.game; n];
        let q = self.stack.neck(b, z, &games);
        let logits = if self.dueling {
            let v = mlp2(b, &format!("{Q_HEAD}.value"), q).reshape(&[n, 1, self.atoms]);
            let a = mlp2(b, &format!("{Q_HEAD}.advantage"), q).reshape(&[n, self.actions, self.atoms]);
            v + a - a.mean_axis(1, true)
        } else {
            mlp2(b, &format!("{Q_HEAD}.q"), q).reshape(&[n, self.actions, self.atoms])
        };
        logits.log_softmax(2)
    }

    /// Atom probabilities with `params` as constants.
    fn probs(&self, params: &ParamStore, z: &Array) -> Array {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, params);
        let lp = self.log_probs(&b, tape.constant(z.clone())).value();
        lp.mapv(f64::exp)
    }
}

/// Expected value of each action's distribution, `(N, actions)`.
fn expected_q(probs: &Array, z: &[f64]) -> Vec<Vec<f64>> {
    let s = probs.shape();
    (0..s[0]).map(|i| (0..s[1]).map(|a| (0..s[2]).map(|j| probs[[i, a, j]] * z[j]).sum()).collect()).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &v) in xs.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

fn greedy_from_features(net: &QNet, params: &ParamStore, feats: &Array, z: &[f64]) -> usize {
    argmax(&expected_q(&net.probs(params, feats), z)[0])
}

/// Greedy action of a Rainbow-adapted stack for a single observation.
pub fn greedy_action(stack: &EncoderStack, spec: &RainbowSpec, game: &str, actions: usize, obs: &StackedObservation) -> Result<usize> {
    let net = QNet { stack, game, actions, atoms: spec.atoms, dueling: spec.dueling };
    let feats = backbone_features(stack, &[obs])?;
    Ok(greedy_from_features(&net, &stack.params, &feats, &support(spec.v_min, spec.v_max, spec.atoms)))
}

/// Mean undiscounted return of fully greedy episodes.
pub fn evaluate_greedy(stack: &EncoderStack, spec: &RainbowSpec, env: &mut dyn EnvironmentAdapter, episodes: usize) -> Result<Vec<f64>> {
    let game = env.game().to_string();
    let actions = env.action_count();
    evaluate_policy(env, episodes, spec.max_episode_steps, |obs| greedy_action(stack, spec, &game, actions, obs))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 }
}

struct Learner<'a> {
    spec: &'a RainbowSpec,
    z: Vec<f64>,
    target: ParamStore,
    opt: AdamW,
    replay: PrioritizedReplay<ReplayItem<Features>>,
    rng: ChaCha8Rng,
    updates: u64,
}

impl Learner<'_> {
    /// One prioritized, importance-weighted distributional update.
    /// Returns `(loss, gradient norm before clipping)`.
    fn update(&mut self, stack: &mut EncoderStack, game: &str, actions: usize, step: u64) -> Result<(f64, f64)> {
        let spec = self.spec;
        let picks = self.replay.sample(spec.batch_size, beta_at(step, spec), &mut self.rng)?;
        let items: Vec<&ReplayItem<Features>> = picks.iter().map(|&(s, _)| self.replay.get(s)).collect();
        let obs = stack_rows(&items.iter().map(|i| i.obs.as_ref()).collect::<Vec<_>>())?;
        let next = stack_rows(&items.iter().map(|i| i.next.as_ref()).collect::<Vec<_>>())?;
        let n = items.len();

        let (grads, loss, ce, norm) = {
            let net = QNet { stack, game, actions, atoms: spec.atoms, dueling: spec.dueling };
            // Double Q: online network picks, target network evaluates.
            let online_next = expected_q(&net.probs(&stack.params, &next), &self.z);
            let target_next = net.probs(&self.target, &next);
            let mut target_dist = Array::zeros(vec![n, spec.atoms]);
            for (i, item) in items.iter().enumerate() {
                let a_star = argmax(&online_next[i]);
                let p: Vec<f64> = (0..spec.atoms).map(|j| target_next[[i, a_star, j]]).collect();
                let m = categorical_projection(&p, item.ret, item.discount, &self.z);
                for (j, v) in m.into_iter().enumerate() {
                    target_dist[[i, j]] = v;
                }
            }
            let tape = Tape::new();
            let b = Binding::new(&tape, &stack.params);
            let lp = net.log_probs(&b, tape.constant(obs));
            let mask = Array::from_shape_fn(vec![n, actions, 1], |d| (d[1] == items[d[0]].action) as u8 as f64);
            let chosen = (lp * tape.constant(mask)).sum_axis(1, false);
            let ce = (chosen * tape.constant(target_dist)).sum_axis(1, false).scale(-1.0);
            let weights = Array::from_shape_vec(vec![n], picks.iter().map(|&(_, w)| w).collect()).expect("batch length");
            let loss = (ce * tape.constant(weights)).mean();
            let value = loss.value()[[]];
            let ce_values: Vec<f64> = ce.value().iter().copied().collect();
            let mut grads = b.gradients(&mut tape.backward(loss));
            let norm = clip_grad_norm(&mut grads, spec.max_grad_norm);
            (grads, value, ce_values, norm)
        };
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step, last_good: None });
        }
        self.opt.step(&mut stack.params, &grads, spec.lr)?;
        for (&(slot, _), td) in picks.iter().zip(ce) {
            self.replay.update(slot, td);
        }
        self.updates += 1;
        if self.updates % spec.target_update == 0 {
            self.target = trainable_copy(stack);
        }
        Ok((loss, norm))
    }
}

fn trainable_copy(stack: &EncoderStack) -> ParamStore {
    stack.params.subset(&["neck.", Q_HEAD])
}

/// Online fine-tuning: ε-greedy interaction, one replayed transition per
/// env step and `updates_per_step` updates per step once `min_buffer` steps
/// have been taken. Ends with a greedy evaluation over `eval_episodes`.
pub fn finetune_online_rl(
    checkpoint: &Checkpoint,
    env: &mut dyn EnvironmentAdapter,
    spec: &RainbowSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<RainbowOutcome> {
    spec.validate()?;
    let actions = env.action_count();
    if actions == 0 || actions > ACTION_COUNT {
        return Err(Error::InvalidArgument(format!("environment exposes {actions} actions; expected 1..={ACTION_COUNT}")));
    }
    if spec.eval_every > 0 && env.try_clone().is_none() {
        return Err(Error::config("finetune.rainbow.eval_every", "periodic evaluation needs a cloneable environment"));
    }
    let game = env.game().to_string();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = prepare_stack(checkpoint, &game, &mut init_rng)?;
    QNet::declare(&mut stack, spec, actions, &mut init_rng);
    let frozen_print = backbone_fingerprint(&stack);

    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    act_rng.set_stream(1);
    let mut replay_rng = ChaCha8Rng::seed_from_u64(seed);
    replay_rng.set_stream(2);
    let mut learner = Learner {
        spec,
        z: support(spec.v_min, spec.v_max, spec.atoms),
        target: trainable_copy(&stack),
        opt: AdamW::new(AdamConfig { beta1: 0.9, beta2: 0.999, eps: spec.adam_eps, weight_decay: 0.0 }),
        replay: PrioritizedReplay::new(spec.capacity, spec.priority_exponent, spec.priority_floor),
        rng: replay_rng,
        updates: 0,
    };
    let mut nstep: NStepAccumulator<Features> = NStepAccumulator::new(spec.n_step, spec.gamma);
    let mut log = MetricsLog::create(out_dir)?;
    let fault = |step: u64| move |e: Error| Error::Environment { step, message: e.to_string() };
    let encode = |stack: &EncoderStack, o: &StackedObservation| backbone_features(stack, &[o]).map(|f| Rc::new(f.index_axis_move(ndarray::Axis(0), 0)));

    let mut feats = encode(&stack, &env.reset().map_err(fault(0))?)?;
    let (mut ep_return, mut ep_len, mut episodes) = (0.0, 0u64, 0u64);
    let mut evaluations = Vec::new();
    let mut step = 0;
    while step < spec.steps {
        let eps = epsilon_at(step, spec);
        let action = if act_rng.random::<f64>() < eps {
            act_rng.random_range(0..actions)
        } else {
            let net = QNet { stack: &stack, game: &game, actions, atoms: spec.atoms, dueling: spec.dueling };
            greedy_from_features(&net, &stack.params, &feats.view().insert_axis(ndarray::Axis(0)).to_owned(), &learner.z)
        };
        let out = env.step(action).map_err(fault(step))?;
        ep_return += out.reward;
        ep_len += 1;
        let truncated = out.info.truncated || ep_len >= spec.max_episode_steps;
        let next = encode(&stack, &out.obs)?;
        for item in nstep.push(feats.clone(), action, clip_reward(out.reward), out.terminal, truncated, &next) {
            learner.replay.push(item);
        }
        if out.terminal || truncated {
            log.row(serde_json::json!({ "kind": "episode", "step": step, "return": ep_return, "length": ep_len }))?;
            episodes += 1;
            ep_return = 0.0;
            ep_len = 0;
            feats = encode(&stack, &env.reset().map_err(fault(step + 1))?)?;
        } else {
            feats = next;
        }
        if step >= spec.min_buffer {
            for _ in 0..spec.updates_per_step {
                let (loss, norm) = learner.update(&mut stack, &game, actions, step)?;
                if learner.updates % LOG_EVERY == 0 {
                    log.row(serde_json::json!({ "kind": "update", "update": learner.updates, "step": step, "loss": loss, "grad_norm": norm, "epsilon": eps }))?;
                }
            }
        }
        step += 1;
        if spec.eval_every > 0 && step % spec.eval_every == 0 {
            let mut eval_env = env.try_clone().expect("checked above");
            let score = mean(&evaluate_greedy(&stack, spec, eval_env.as_mut(), spec.eval_episodes)?);
            log.row(serde_json::json!({ "kind": "eval", "step": step, "mean_return": score }))?;
            evaluations.push((step, score));
            if spec.stop_at_return.is_some_and(|t| score >= t) {
                break;
            }
        }
    }
    if backbone_fingerprint(&stack) != frozen_print {
        return Err(Error::InvalidArgument("backbone changed during online fine-tuning".into()));
    }
    let eval_returns = evaluate_greedy(&stack, spec, env, spec.eval_episodes)?;
    let mean_return = mean(&eval_returns);
    log.row(serde_json::json!({
        "kind": "done", "steps": step, "updates": learner.updates, "episodes": episodes,
        "mean_return": mean_return, "backbone": frozen_print,
    }))?;
    Ok(RainbowOutcome { stack, env_steps: step, updates: learner.updates, episodes, evaluations, eval_returns, mean_return, metrics: log.finish()? })
}
