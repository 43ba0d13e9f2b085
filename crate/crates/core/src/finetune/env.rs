//! Environment interface, a small deterministic chain task and its exact
//! finite-horizon solution.

use std::collections::VecDeque;

use crate::data::{Episode, ReplayDataset, StackedObservation, FRAME_LEN, FRAME_SIDE, STACK_DEPTH};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// The episode was cut by a time limit rather than ended by the task.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct EnvStep {
    pub obs: StackedObservation,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

/// What the fine-tuning loops need from an environment. A real emulator
/// adapter is expected to apply frame-skip 4, sticky actions with
/// probability 0.25 and expose the full 18-action set.
pub trait EnvironmentAdapter {
    fn game(&self) -> &str;

    fn action_count(&self) -> usize;

    fn reset(&mut self) -> Result<StackedObservation>;

    fn step(&mut self, action: usize) -> Result<EnvStep>;

    /// Identical action sequences yield identical trajectories.
    fn deterministic(&self) -> bool {
        false
    }

    /// An independent copy for evaluation, when the adapter supports it.
    fn try_clone(&self) -> Option<Box<dyn EnvironmentAdapter>> {
        None
    }
}

/// Explicit finite MDP: `transitions[s][a] = (next, reward, terminal)`.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub transitions: Vec<Vec<(usize, f64, bool)>>,
}

/// Finite-horizon optimal values and a time-indexed greedy policy.
#[derive(Clone, Debug)]
pub struct ValueIteration {
    /// `values[t][s]`: optimal return with `horizon − t` steps left.
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<usize>>,
}

impl ValueIteration {
    pub fn optimal_return(&self, start: usize) -> f64 {
        self.values[0][start]
    }

    /// Optimal action at time `t`; ties go to the lower index.
    pub fn action(&self, t: usize, state: usize) -> usize {
        self.policy[t.min(self.policy.len() - 1)][state]
    }
}

impl TabularMdp {
    /// Backward induction over `horizon` steps with discount `gamma`.
    pub fn solve(&self, horizon: usize, gamma: f64) -> ValueIteration {
        let n = self.transitions.len();
        let mut values = vec![vec![0.0; n]; horizon + 1];
        let mut policy = vec![vec![0; n]; horizon];
        for t in (0..horizon).rev() {
            for s in 0..n {
                let mut best = (f64::NEG_INFINITY, 0);
                for (a, &(next, r, terminal)) in self.transitions[s].iter().enumerate() {
                    let q = r + if terminal { 0.0 } else { gamma * values[t + 1][next] };
                    if q > best.0 {
                        best = (q, a);
                    }
                }
                values[t][s] = best.0;
                policy[t][s] = best.1;
            }
        }
        ValueIteration { values, policy }
    }
}

/// Five-state corridor. From a non-goal state `s`, action
/// [`ChainEnv::forward_action`]`(s)` moves right and the other moves left;
/// stepping into the last state pays 1 and ends the episode, stepping left
/// out of state 0 pays a small exit reward and ends it too. Each state
/// renders as a distinct frame; episodes are cut after `horizon` steps.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    state: usize,
    start: usize,
    t: usize,
    horizon: usize,
    frames: VecDeque<Vec<u8>>,
    done: bool,
}

pub const CHAIN_STATES: usize = 5;
pub const CHAIN_GOAL_REWARD: f64 = 1.0;
pub const CHAIN_EXIT_REWARD: f64 = 0.05;
pub const CHAIN_HORIZON: usize = 20;
const EXPERT_DISCOUNT: f64 = 0.99;

impl Default for ChainEnv {
    fn default() -> Self {
        Self::new(0, CHAIN_HORIZON)
    }
}

impl ChainEnv {
    pub const GAME: &'static str = "Chain";

    pub fn new(start: usize, horizon: usize) -> Self {
        assert!(start + 1 < CHAIN_STATES, "start must be a non-goal state");
        Self { state: start, start, t: 0, horizon: horizon.max(1), frames: VecDeque::new(), done: true }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The action that moves right from `state`.
    pub fn forward_action(state: usize) -> usize {
        1 - state % 2
    }

    fn transition(state: usize, action: usize) -> (usize, f64, bool) {
        let goal = CHAIN_STATES - 1;
        if action == Self::forward_action(state) {
            let next = state + 1;
            if next == goal { (next, CHAIN_GOAL_REWARD, true) } else { (next, 0.0, false) }
        } else if state == 0 {
            (0, CHAIN_EXIT_REWARD, true)
        } else {
            (state - 1, 0.0, false)
        }
    }

    pub fn mdp() -> TabularMdp {
        let transitions = (0..CHAIN_STATES)
            .map(|s| {
                if s == CHAIN_STATES - 1 {
                    vec![(s, 0.0, true); 2]
                } else {
                    (0..2).map(|a| Self::transition(s, a)).collect()
                }
            })
            .collect();
        TabularMdp { transitions }
    }

    /// Exact optimum of the episodic task (undiscounted, time-limited).
    /// Undiscounted values tie between shortest and detouring paths; use
    /// [`ChainEnv::expert`] for a policy.
    pub fn solve(&self) -> ValueIteration {
        Self::mdp().solve(self.horizon, 1.0)
    }

    /// Shortest-path optimal policy: the discount breaks detour ties.
    pub fn expert(horizon: usize) -> ValueIteration {
        Self::mdp().solve(horizon, EXPERT_DISCOUNT)
    }

    /// A bright block whose width grows with the state, over a dim band
    /// whose row depends on the state's parity.
    pub fn render(state: usize) -> Vec<u8> {
        let mut f = vec![16u8; FRAME_LEN];
        let width = 16 * (state + 1);
        let band = if state % 2 == 0 { 8..20 } else { 64..76 };
        for r in 0..FRAME_SIDE {
            for c in 0..FRAME_SIDE {
                let v = if (28..56).contains(&r) && c < width.min(FRAME_SIDE) {
                    224
                } else if band.contains(&r) {
                    96
                } else {
                    16
                };
                f[r * FRAME_SIDE + c] = v;
            }
        }
        f
    }

    fn observation(&self) -> StackedObservation {
        let refs: Vec<&[u8]> = self.frames.iter().map(Vec::as_slice).collect();
        StackedObservation::from_frames([refs[0], refs[1], refs[2], refs[3]])
    }

    fn push_frame(&mut self) {
        if self.frames.len() == STACK_DEPTH {
            self.frames.pop_front();
        }
        self.frames.push_back(Self::render(self.state));
    }
}

impl EnvironmentAdapter for ChainEnv {
    fn game(&self) -> &str {
        Self::GAME
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Result<StackedObservation> {
        self.state = self.start;
        self.t = 0;
        self.done = false;
        self.frames.clear();
        for _ in 0..STACK_DEPTH {
            self.push_frame();
        }
        Ok(self.observation())
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::InvalidArgument("step called on a finished episode; reset first".into()));
        }
        if action >= self.action_count() {
            return Err(Error::InvalidArgument(format!("action {action} outside [0, 2)")));
        }
        let (next, reward, terminal) = Self::transition(self.state, action);
        self.state = next;
        self.t += 1;
        self.push_frame();
        let truncated = !terminal && self.t >= self.horizon;
        self.done = terminal || truncated;
        Ok(EnvStep { obs: self.observation(), reward, terminal, info: StepInfo { truncated } })
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn try_clone(&self) -> Option<Box<dyn EnvironmentAdapter>> {
        Some(Box::new(self.clone()))
    }
}

/// Expert demonstrations on the chain: optimal rollouts from every
/// non-goal start state, cycled until `transitions` steps are recorded.
pub fn expert_dataset(horizon: usize, transitions: usize) -> Result<ReplayDataset> {
    let vi = ChainEnv::expert(horizon);
    let mut episodes = Vec::new();
    let mut total = 0;
    'outer: loop {
        for start in 0..CHAIN_STATES - 1 {
            if total >= transitions {
                break 'outer;
            }
            let mut env = ChainEnv::new(start, horizon);
            env.reset()?;
            let (mut frames, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
            let mut terminal = false;
            for t in 0..horizon {
                if total >= transitions {
                    break;
                }
                frames.extend_from_slice(&ChainEnv::render(env.state()));
                let a = vi.action(t, env.state());
                let out = env.step(a)?;
                actions.push(a as u8);
                rewards.push(out.reward as f32);
                total += 1;
                if out.terminal || out.info.truncated {
                    terminal = out.terminal;
                    break;
                }
            }
            episodes.push(Episode::new(ChainEnv::GAME, frames, actions, rewards, terminal)?);
        }
    }
    Ok(ReplayDataset::from_episodes(episodes))
}

/// Runs `episodes` episodes with `policy`, each capped at `max_steps`, and
/// returns the undiscounted return of each.
pub fn evaluate_policy(
    env: &mut dyn EnvironmentAdapter,
    episodes: usize,
    max_steps: u64,
    mut policy: impl FnMut(&StackedObservation) -> Result<usize>,
) -> Result<Vec<f64>> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        let mut total = 0.0;
        for _ in 0..max_steps {
            let out = env.step(policy(&obs)?)?;
            total += out.reward;
            if out.terminal || out.info.truncated {
                break;
            }
            obs = out.obs;
        }
        returns.push(total);
    }
    Ok(returns)
}
