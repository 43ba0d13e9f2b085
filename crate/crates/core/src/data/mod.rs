//! Replay-log ingestion, dataset curation and batched view sampling.

mod curate;
mod dataset;
mod log;
mod registry;
pub mod synth;

pub use curate::{curate, curate_with_pattern, DatasetManifest, Regime, Selection, SelectionPattern};
pub use dataset::{sample_batch, sample_batches_parallel, worker_rng, Episode, ReplayDataset, SampleView, ViewKind, ViewPayload, ViewSpec};
pub use log::{log_path, ReplayLog, ReplayLogHeader, REPLAY_MAGIC, REPLAY_VERSION};
pub use registry::{Distribution, GameRegistry};

/// Side length of a preprocessed frame.
pub const FRAME_SIDE: usize = 84;
/// Pixels in one frame.
pub const FRAME_LEN: usize = FRAME_SIDE * FRAME_SIDE;
/// Frames per stacked observation.
pub const STACK_DEPTH: usize = 4;
/// Full Atari action set.
pub const ACTION_COUNT: usize = 18;

/// One grayscale 84×84 frame.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame(Box<[u8]>);

impl Frame {
    pub fn new(pixels: Vec<u8>) -> crate::Result<Self> {
        if pixels.len() != FRAME_LEN {
            return Err(crate::Error::Shape(format!("frame must hold {FRAME_LEN} pixels, got {}", pixels.len())));
        }
        Ok(Self(pixels.into_boxed_slice()))
    }

    pub fn filled(value: u8) -> Self {
        Self(vec![value; FRAME_LEN].into_boxed_slice())
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame(mean={:.2})", self.0.iter().map(|&p| p as f64).sum::<f64>() / FRAME_LEN as f64)
    }
}

/// A single replay step.
#[derive(Clone, Debug)]
pub struct Transition {
    pub observation: Frame,
    pub action: u8,
    pub reward: f32,
    pub terminal: bool,
    pub game_id: String,
    pub run_id: u16,
    pub checkpoint_id: u16,
    pub step_index: u64,
}

/// Four consecutive frames, oldest first, as intensities in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedObservation {
    data: Vec<f32>,
}

impl StackedObservation {
    pub fn from_frames(frames: [&[u8]; STACK_DEPTH]) -> Self {
        let mut data = Vec::with_capacity(STACK_DEPTH * FRAME_LEN);
        for f in frames {
            debug_assert_eq!(f.len(), FRAME_LEN);
            data.extend(f.iter().map(|&p| p as f32));
        }
        Self { data }
    }

    pub fn from_values(data: Vec<f32>) -> crate::Result<Self> {
        if data.len() != STACK_DEPTH * FRAME_LEN {
            return Err(crate::Error::Shape(format!("stack must hold {} values, got {}", STACK_DEPTH * FRAME_LEN, data.len())));
        }
        Ok(Self { data })
    }

    pub fn constant(value: f32) -> Self {
        Self { data: vec![value; STACK_DEPTH * FRAME_LEN] }
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    /// Pixel `(row, col)` of frame `i`.
    pub fn at(&self, i: usize, row: usize, col: usize) -> f32 {
        self.data[i * FRAME_LEN + row * FRAME_SIDE + col]
    }

    /// Bytes of the newest frame, rounded back to integers.
    pub fn newest_frame_bytes(&self) -> Vec<u8> {
        self.frame(STACK_DEPTH - 1).iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Builds the stack ending at `t` from a per-step frame accessor; indices
/// before the episode start repeat the first frame.
pub fn stack_with<'a>(frame_at: impl Fn(usize) -> &'a [u8], t: usize) -> StackedObservation {
    let idx = |back: usize| t.saturating_sub(back);
    StackedObservation::from_frames([frame_at(idx(3)), frame_at(idx(2)), frame_at(idx(1)), frame_at(t)])
}

/// Stacked observation for step `t` of `episode`.
pub fn stack_frames(episode: &[Transition], t: usize) -> StackedObservation {
    assert!(t < episode.len(), "step {t} outside episode of length {}", episode.len());
    stack_with(|i| episode[i].observation.pixels(), t)
}

/// Discounted suffix sums `R̂_t = Σ_{i≥t} γ^{i−t} r_i`, accumulated right to left.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Sign-preserving clamp to `[-1, 1]`.
pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}
