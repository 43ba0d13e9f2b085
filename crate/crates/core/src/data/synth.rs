//! Procedural replay corpora for tests and smoke runs.
//!
//! Each game renders a bright square agent moving on an 8×8 grid toward a goal
//! marker over a game-specific background. Later checkpoints follow the
//! goal-seeking policy more often, so the regimes differ in optimality the same
//! way real checkpoints do.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::{log_path, ReplayLog};
use super::{FRAME_LEN, FRAME_SIDE};
use crate::Result;

/// Grid cells per side.
const GRID: usize = 8;
const CELL: usize = FRAME_SIDE / GRID;
/// Actions used by the synthetic behaviour policy: noop, up, down, left, right.
pub const SYNTH_ACTIONS: [u8; 5] = [0, 2, 5, 4, 3];

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub runs: Vec<u16>,
    pub checkpoints: Vec<u16>,
    pub per_checkpoint: u64,
    /// Inclusive episode-length range.
    pub episode_len: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { runs: vec![1], checkpoints: vec![1], per_checkpoint: 100, episode_len: (20, 60), seed: 0 }
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn game_hash(game: &str) -> u64 {
    game.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn render(game_key: u64, agent: (usize, usize), goal: (usize, usize), frame: &mut [u8]) {
    let bg = 20 + (game_key % 60) as u8;
    let stripe = 1 + (game_key >> 8) as usize % 5;
    for r in 0..FRAME_SIDE {
        for c in 0..FRAME_SIDE {
            frame[r * FRAME_SIDE + c] = if (r / stripe + c / stripe) % 7 == 0 { bg + 25 } else { bg };
        }
    }
    let mut paint = |(gy, gx): (usize, usize), value: u8, inset: usize| {
        for r in gy * CELL + inset..(gy + 1) * CELL - inset {
            for c in gx * CELL + inset..(gx + 1) * CELL - inset {
                frame[r * FRAME_SIDE + c] = value;
            }
        }
    };
    paint(goal, 140, 3);
    paint(agent, 240, 1);
}

fn step_toward(agent: (usize, usize), goal: (usize, usize)) -> usize {
    if agent.0 > goal.0 {
        1
    } else if agent.0 < goal.0 {
        2
    } else if agent.1 > goal.1 {
        3
    } else if agent.1 < goal.1 {
        4
    } else {
        0
    }
}

fn apply(agent: (usize, usize), a: usize) -> (usize, usize) {
    let (y, x) = agent;
    match a {
        1 => (y.saturating_sub(1), x),
        2 => ((y + 1).min(GRID - 1), x),
        3 => (y, x.saturating_sub(1)),
        4 => (y, (x + 1).min(GRID - 1)),
        _ => agent,
    }
}

/// Generates one checkpoint's worth of transitions.
pub fn synthetic_log(game: &str, run: u16, checkpoint: u16, count: usize, spec: &SynthSpec) -> ReplayLog {
    let key = game_hash(game);
    let seed = mix(mix(mix(spec.seed, key), run as u64), checkpoint as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skill = (0.3 + 0.07 * checkpoint as f64).min(0.95);
    let (lo, hi) = spec.episode_len;
    let cell = |rng: &mut ChaCha8Rng| (rng.random_range(0..GRID), rng.random_range(0..GRID));

    let mut log = ReplayLog {
        game: game.to_string(),
        run,
        checkpoint,
        frames: vec![0u8; count * FRAME_LEN],
        actions: Vec::with_capacity(count),
        rewards: Vec::with_capacity(count),
        terminals: Vec::with_capacity(count),
    };
    let (mut agent, mut goal) = (cell(&mut rng), cell(&mut rng));
    let mut remaining = rng.random_range(lo..=hi);
    for i in 0..count {
        render(key, agent, goal, &mut log.frames[i * FRAME_LEN..(i + 1) * FRAME_LEN]);
        let a = if rng.random_bool(skill) { step_toward(agent, goal) } else { rng.random_range(0..SYNTH_ACTIONS.len()) };
        agent = apply(agent, a);
        let reward = if agent == goal {
            goal = cell(&mut rng);
            1.0
        } else {
            0.0
        };
        remaining -= 1;
        let terminal = remaining == 0;
        log.actions.push(SYNTH_ACTIONS[a]);
        log.rewards.push(reward);
        log.terminals.push(terminal);
        if terminal {
            agent = cell(&mut rng);
            goal = cell(&mut rng);
            remaining = rng.random_range(lo..=hi);
        }
    }
    log
}

/// Writes logs for every (game, run, checkpoint) in `spec` under `root`.
pub fn write_synthetic_corpus(root: &Path, games: &[String], spec: &SynthSpec) -> Result<()> {
    for game in games {
        for &run in &spec.runs {
            for &ckpt in &spec.checkpoints {
                let log = synthetic_log(game, run, ckpt, spec.per_checkpoint as usize, spec);
                log.write_to(&log_path(root, game, run, ckpt))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let spec = SynthSpec::default();
        let a = synthetic_log("Pong", 1, 3, 200, &spec);
        let b = synthetic_log("Pong", 1, 3, 200, &spec);
        assert_eq!(a, b);
        assert_ne!(a.frames, synthetic_log("Pong", 2, 3, 200, &spec).frames);
        assert!(a.terminals.iter().any(|&t| t));
        assert!(a.actions.iter().all(|&x| SYNTH_ACTIONS.contains(&x)));
    }
}
