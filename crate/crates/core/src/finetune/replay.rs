//! Multi-step returns and proportional prioritized replay.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// One environment step as seen by the n-step accumulator. `terminal`
/// means the observation reached by this step is terminal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NStepStep {
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NStepReturn {
    /// `Σ_{i<m} γ^i r_{t+i}`.
    pub value: f64,
    /// Rewards summed; the bootstrap observation is `o_{t+m}`.
    pub steps: usize,
    /// A terminal was reached inside the window, so nothing is bootstrapped.
    pub done: bool,
}

impl NStepReturn {
    /// Multiplier of the bootstrap value: `γ^m`, or 0 after a terminal.
    pub fn bootstrap_discount(&self, gamma: f64) -> f64 {
        if self.done { 0.0 } else { gamma.powi(self.steps as i32) }
    }
}

/// Discounted sum of up to `n` rewards from the start of `window`, cut
/// after the first terminal step.
pub fn nstep_return(window: &[NStepStep], n: usize, gamma: f64) -> Result<NStepReturn> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-step length must be ≥ 1".into()));
    }
    let mut value = 0.0;
    let mut scale = 1.0;
    for (i, s) in window.iter().take(n).enumerate() {
        value += scale * s.reward;
        scale *= gamma;
        if s.terminal {
            return Ok(NStepReturn { value, steps: i + 1, done: true });
        }
    }
    Ok(NStepReturn { value, steps: window.len().min(n), done: false })
}

/// A transition ready for replay: `(o_t, a_t, G, γ^m or 0, o_{t+m})`.
#[derive(Clone, Debug)]
pub struct ReplayItem<F> {
    pub obs: F,
    pub action: usize,
    pub ret: f64,
    pub discount: f64,
    pub next: F,
}

/// Turns a stream of single steps into n-step items. A window is emitted
/// once it holds `n` steps; episode ends flush every pending window.
#[derive(Clone, Debug)]
pub struct NStepAccumulator<F> {
    n: usize,
    gamma: f64,
    pending: VecDeque<(F, usize, NStepStep)>,
}

impl<F: Clone> NStepAccumulator<F> {
    pub fn new(n: usize, gamma: f64) -> Self {
        Self { n: n.max(1), gamma, pending: VecDeque::new() }
    }

    /// Records `(obs, action) → (reward, next)`. `truncated` ends the episode
    /// without a terminal, so flushed windows still bootstrap from `next`.
    pub fn push(&mut self, obs: F, action: usize, reward: f64, terminal: bool, truncated: bool, next: &F) -> Vec<ReplayItem<F>> {
        self.pending.push_back((obs, action, NStepStep { reward, terminal }));
        let mut out = Vec::new();
        if terminal || truncated {
            while !self.pending.is_empty() {
                out.push(self.emit(next));
                self.pending.pop_front();
            }
        } else if self.pending.len() == self.n {
            out.push(self.emit(next));
            self.pending.pop_front();
        }
        out
    }

    fn emit(&self, next: &F) -> ReplayItem<F> {
        let window: Vec<NStepStep> = self.pending.iter().map(|p| p.2).collect();
        let r = nstep_return(&window, self.n, self.gamma).expect("n ≥ 1");
        let (obs, action, _) = &self.pending[0];
        ReplayItem { obs: obs.clone(), action: *action, ret: r.value, discount: r.bootstrap_discount(self.gamma), next: next.clone() }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

/// Binary sum tree with a parallel min tree over `capacity` leaves.
#[derive(Clone, Debug)]
pub struct SumTree {
    leaves: usize,
    sum: Vec<f64>,
    min: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self { leaves, sum: vec![0.0; 2 * leaves], min: vec![f64::INFINITY; 2 * leaves] }
    }

    pub fn set(&mut self, slot: usize, priority: f64) {
        let mut i = slot + self.leaves;
        self.sum[i] = priority;
        self.min[i] = priority;
        while i > 1 {
            i /= 2;
            self.sum[i] = self.sum[2 * i] + self.sum[2 * i + 1];
            self.min[i] = self.min[2 * i].min(self.min[2 * i + 1]);
        }
    }

    pub fn get(&self, slot: usize) -> f64 {
        self.sum[slot + self.leaves]
    }

    pub fn total(&self) -> f64 {
        self.sum[1]
    }

    /// Smallest priority among set leaves.
    pub fn min(&self) -> f64 {
        self.min[1]
    }

    /// Leaf whose cumulative-priority interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.sum[2 * i];
            if mass < left || self.sum[2 * i + 1] == 0.0 {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Returns the stored priority `(|td| + floor)^α` for a TD error, and the
/// importance weight of `slot` under the tree's current priorities:
/// `(N·P(i))^{−β}` divided by the largest such weight in the buffer.
pub fn priority_weight(td_error: f64, alpha: f64, floor: f64, beta: f64, tree: &SumTree, slot: usize, len: usize) -> (f64, f64) {
    let priority = (td_error.abs() + floor).powf(alpha);
    (priority, importance(tree.get(slot), tree, len, beta))
}

fn importance(p: f64, tree: &SumTree, len: usize, beta: f64) -> f64 {
    let total = tree.total();
    let n = len as f64;
    let w = (n * p / total).powf(-beta);
    let w_max = (n * tree.min() / total).powf(-beta);
    w / w_max
}

/// Fixed-capacity FIFO replay with proportional prioritized sampling.
#[derive(Clone, Debug)]
pub struct PrioritizedReplay<T> {
    items: Vec<T>,
    capacity: usize,
    cursor: usize,
    tree: SumTree,
    alpha: f64,
    floor: f64,
    max_priority: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, alpha: f64, floor: f64) -> Self {
        Self { items: Vec::new(), capacity: capacity.max(1), cursor: 0, tree: SumTree::new(capacity), alpha, floor, max_priority: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, slot: usize) -> &T {
        &self.items[slot]
    }

    /// Inserts at the highest priority seen so far, overwriting the oldest
    /// item once full. Returns the slot.
    pub fn push(&mut self, item: T) -> usize {
        let slot = self.cursor;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.tree.set(slot, self.max_priority);
        self.cursor = (self.cursor + 1) % self.capacity;
        slot
    }

    /// Stratified proportional sample: one draw per equal-mass segment.
    /// Returns `(slot, importance weight)` pairs.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, f64)>> {
        if self.items.is_empty() {
            return Err(Error::Sampling("replay buffer is empty".into()));
        }
        let total = self.tree.total();
        let seg = total / batch as f64;
        let mut out = Vec::with_capacity(batch);
        for i in 0..batch {
            let u = seg * (i as f64 + rng.random::<f64>());
            let slot = self.tree.find(u.min(total * (1.0 - 1e-12))).min(self.items.len() - 1);
            out.push((slot, importance(self.tree.get(slot), &self.tree, self.items.len(), beta)));
        }
        Ok(out)
    }

    /// Re-prioritizes `slot` from its latest TD error.
    pub fn update(&mut self, slot: usize, td_error: f64) {
        let (p, _) = priority_weight(td_error, self.alpha, self.floor, 0.0, &self.tree, slot, self.items.len());
        self.max_priority = self.max_priority.max(p);
        self.tree.set(slot, p);
    }
}
