use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::curate::DatasetManifest;
use super::log::{log_path, ReplayLog};
use super::{returns_to_go, stack_with, StackedObservation, FRAME_LEN};
use crate::{Error, Result};

/// A maximal run of steps that does not cross a terminal flag. The last step
/// is terminal when `ends_in_terminal`; otherwise the episode was cut by the
/// end of its selection.
#[derive(Clone, Debug)]
pub struct Episode {
    pub game: String,
    pub run: u16,
    pub checkpoint: u16,
    frames: Vec<u8>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub ends_in_terminal: bool,
}

impl Episode {
    pub fn new(game: impl Into<String>, frames: Vec<u8>, actions: Vec<u8>, rewards: Vec<f32>, ends_in_terminal: bool) -> Result<Self> {
        if frames.len() != actions.len() * FRAME_LEN || rewards.len() != actions.len() || actions.is_empty() {
            return Err(Error::Shape("episode arrays disagree in length".into()));
        }
        Ok(Self { game: game.into(), run: 0, checkpoint: 0, frames, actions, rewards, ends_in_terminal })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        &self.frames[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    /// Stack ending at `t`; `t == len()` is the virtual step after a terminal
    /// and repeats the final frame.
    pub fn stack(&self, t: usize) -> StackedObservation {
        let last = self.len() - 1;
        stack_with(|i| self.frame(i.min(last)), t)
    }

    pub fn is_terminal(&self, t: usize) -> bool {
        self.ends_in_terminal && t + 1 == self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Image,
    Video,
    Demo,
    Trajectory,
}

/// What a sampler must carve out around each anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub kind: ViewKind,
    /// Video: future offset (upper end of the range when `k_min` is set).
    pub k: usize,
    /// Video: when set, `k` is drawn uniformly from `k_min..=k` per view.
    pub k_min: Option<usize>,
    /// Video: offset of the additional far frame.
    pub k_prime: Option<usize>,
    /// Demo / Trajectory: number of steps in the window.
    pub horizon: usize,
    /// Trajectory: allow the window to reach one step past a terminal.
    pub terminal_next: bool,
    /// Trajectory: windows may start before the episode and are returned
    /// shorter than `horizon` (callers left-pad).
    pub pad_short: bool,
    /// Trajectory: attach returns-to-go with this discount.
    pub rtg_gamma: Option<f64>,
}

impl ViewSpec {
    pub fn image() -> Self {
        Self { kind: ViewKind::Image, k: 0, k_min: None, k_prime: None, horizon: 1, terminal_next: false, pad_short: false, rtg_gamma: None }
    }

    pub fn video(k: usize) -> Self {
        Self { kind: ViewKind::Video, k, ..Self::image() }
    }

    pub fn demo(horizon: usize) -> Self {
        Self { kind: ViewKind::Demo, horizon, ..Self::image() }
    }

    pub fn trajectory(horizon: usize) -> Self {
        Self { kind: ViewKind::Trajectory, horizon, ..Self::image() }
    }

    fn validate(&self) -> Result<()> {
        if let Some(kp) = self.k_prime {
            if kp <= self.k {
                return Err(Error::InvalidArgument(format!("k' = {kp} must exceed k = {}", self.k)));
            }
        }
        if let Some(lo) = self.k_min {
            if lo > self.k {
                return Err(Error::InvalidArgument(format!("k range {lo}..={} is empty", self.k)));
            }
        }
        if matches!(self.kind, ViewKind::Demo | ViewKind::Trajectory) && self.horizon == 0 {
            return Err(Error::InvalidArgument("window horizon must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of valid anchors in an episode for future offset `k`.
    fn anchors_in(&self, ep: &Episode, k: usize) -> usize {
        let n = ep.len();
        match self.kind {
            ViewKind::Image => n,
            ViewKind::Video => n.saturating_sub(self.k_prime.unwrap_or(k).max(k)),
            ViewKind::Demo => (n + 1).saturating_sub(self.horizon),
            ViewKind::Trajectory => {
                if self.pad_short {
                    n
                } else {
                    let virtual_step = (self.terminal_next && ep.ends_in_terminal) as usize;
                    (n + 1 + virtual_step).saturating_sub(self.horizon)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViewPayload {
    Image {
        obs: StackedObservation,
    },
    Video {
        anchor: StackedObservation,
        future: StackedObservation,
        k: usize,
        far: Option<StackedObservation>,
    },
    Demo {
        obs: Vec<StackedObservation>,
        actions: Vec<u8>,
    },
    /// `obs[i]` for the virtual step past a terminal repeats the terminal
    /// frame; its action is 0 and reward 0.
    Trajectory {
        obs: Vec<StackedObservation>,
        actions: Vec<u8>,
        rewards: Vec<f32>,
        terminals: Vec<bool>,
        returns_to_go: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleView {
    pub kind: ViewKind,
    pub game: String,
    /// Episode index and anchor step, for provenance checks.
    pub episode: usize,
    pub anchor: usize,
    pub payload: ViewPayload,
}

/// Episodes of a curated manifest held in memory.
#[derive(Clone, Debug, Default)]
pub struct ReplayDataset {
    episodes: Vec<Episode>,
    games: Vec<String>,
}

impl ReplayDataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut episodes = Vec::new();
        for sel in &manifest.selections {
            let path = log_path(&manifest.replay_root, &sel.game, sel.run, sel.checkpoint);
            let log = ReplayLog::read_prefix(&path, Some(sel.first_n))?;
            episodes.extend(split_episodes(&log));
        }
        Ok(Self::from_episodes(episodes))
    }

    /// Episodes of in-memory logs, split at terminal flags.
    pub fn from_logs(logs: &[ReplayLog]) -> Self {
        Self::from_episodes(logs.iter().flat_map(split_episodes).collect())
    }

    pub fn from_episodes(episodes: Vec<Episode>) -> Self {
        let mut games: Vec<String> = episodes.iter().map(|e| e.game.clone()).collect();
        games.sort();
        games.dedup();
        Self { episodes, games }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn games(&self) -> &[String] {
        &self.games
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

/// Splits a log into episodes at terminal flags.
pub(crate) fn split_episodes(log: &ReplayLog) -> Vec<Episode> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..log.len() {
        let end_here = log.terminals[i] || i + 1 == log.len();
        if end_here {
            out.push(Episode {
                game: log.game.clone(),
                run: log.run,
                checkpoint: log.checkpoint,
                frames: log.frames[start * FRAME_LEN..(i + 1) * FRAME_LEN].to_vec(),
                actions: log.actions[start..=i].to_vec(),
                rewards: log.rewards[start..=i].to_vec(),
                ends_in_terminal: log.terminals[i],
            });
            start = i + 1;
        }
    }
    out
}

/// Random stream owned by loader worker `worker`.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

fn pick_anchor(ds: &ReplayDataset, spec: &ViewSpec, k: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let mut prefix = Vec::with_capacity(ds.episodes.len());
    let mut total = 0usize;
    for ep in &ds.episodes {
        total += spec.anchors_in(ep, k);
        prefix.push(total);
    }
    if total == 0 {
        return Err(Error::Sampling(format!("no valid anchor positions for {:?} view (k = {k}, horizon = {})", spec.kind, spec.horizon)));
    }
    let u = rng.random_range(0..total);
    let e = prefix.partition_point(|&p| p <= u);
    let before = if e == 0 { 0 } else { prefix[e - 1] };
    Ok((e, u - before))
}

fn carve(ep: &Episode, spec: &ViewSpec, t: usize, k: usize) -> ViewPayload {
    match spec.kind {
        ViewKind::Image => ViewPayload::Image { obs: ep.stack(t) },
        ViewKind::Video => ViewPayload::Video {
            anchor: ep.stack(t),
            future: ep.stack(t + k),
            k,
            far: spec.k_prime.map(|kp| ep.stack(t + kp)),
        },
        ViewKind::Demo => ViewPayload::Demo {
            obs: (t..t + spec.horizon).map(|i| ep.stack(i)).collect(),
            actions: ep.actions[t..t + spec.horizon].to_vec(),
        },
        ViewKind::Trajectory => {
            let (start, end) = if spec.pad_short {
                ((t + 1).saturating_sub(spec.horizon), t + 1)
            } else {
                (t, t + spec.horizon)
            };
            let n = ep.len();
            let real = |i: usize| i < n;
            let rtg = spec.rtg_gamma.map(|g| {
                let rewards: Vec<f64> = ep.rewards[start.min(n)..].iter().map(|&r| r as f64).collect();
                let full = returns_to_go(&rewards, g);
                (start..end).map(|i| if real(i) { full[i - start] } else { 0.0 }).collect()
            });
            ViewPayload::Trajectory {
                obs: (start..end).map(|i| ep.stack(i)).collect(),
                actions: (start..end).map(|i| if real(i) { ep.actions[i] } else { 0 }).collect(),
                rewards: (start..end).map(|i| if real(i) { ep.rewards[i] } else { 0.0 }).collect(),
                terminals: (start..end).map(|i| ep.is_terminal(i)).collect(),
                returns_to_go: rtg,
            }
        }
    }
}

/// Draws `batch_size` views with anchors uniform over valid positions.
pub fn sample_batch(ds: &ReplayDataset, spec: &ViewSpec, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SampleView>> {
    spec.validate()?;
    if ds.episodes.is_empty() {
        return Err(Error::Sampling("dataset is empty".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let k = match (spec.kind, spec.k_min) {
            (ViewKind::Video, Some(lo)) => rng.random_range(lo..=spec.k),
            _ => spec.k,
        };
        let (e, t) = pick_anchor(ds, spec, k, rng)?;
        let ep = &ds.episodes[e];
        out.push(SampleView { kind: spec.kind, game: ep.game.clone(), episode: e, anchor: t, payload: carve(ep, spec, t, k) });
    }
    Ok(out)
}

/// One batch per worker, each from its own stream; output order is by worker.
pub fn sample_batches_parallel(
    ds: &ReplayDataset,
    spec: &ViewSpec,
    batch_size: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<SampleView>>> {
    (0..workers as u64)
        .into_par_iter()
        .map(|w| sample_batch(ds, spec, batch_size, &mut worker_rng(seed, w)))
        .collect()
}
