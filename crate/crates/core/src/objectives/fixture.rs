//! Small deterministic setups on the Tiny preset and synthetic replay, for
//! checking objectives end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Objective, ObjectiveConfig, ObjectiveKind};
use crate::augment::AugmentSpec;
use crate::data::synth::{synthetic_log, SynthSpec};
use crate::data::{sample_batch, ReplayDataset, SampleView};
use crate::model::{BackbonePreset, EncoderStack, ModelConfig, MomentumMirror};
use crate::nn::ParamStore;
use crate::Result;

pub const FIXTURE_GAMES: [&str; 2] = ["Breakout", "Pong"];

pub struct Fixture {
    pub objective: Objective,
    pub stack: EncoderStack,
    pub mirror: Option<ParamStore>,
    pub views: Vec<SampleView>,
}

/// A small synthetic dataset over [`FIXTURE_GAMES`].
pub fn fixture_dataset(transitions_per_game: usize, seed: u64) -> ReplayDataset {
    let spec = SynthSpec { seed, ..SynthSpec::default() };
    let logs: Vec<_> = FIXTURE_GAMES.iter().map(|g| synthetic_log(g, 1, 1, transitions_per_game, &spec)).collect();
    ReplayDataset::from_logs(&logs)
}

/// Tiny stack with `config`'s parameters declared, a momentum mirror when
/// the objective uses one, and a prepared batch drawn without augmentation.
pub fn tiny_fixture_with(config: ObjectiveConfig, batch: usize, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = Objective::new(config)?;
    let games: Vec<String> = FIXTURE_GAMES.iter().map(|g| g.to_string()).collect();
    let mut stack = EncoderStack::new(ModelConfig::preset(BackbonePreset::Tiny), &games, &mut rng)?;
    objective.declare(&mut stack, &mut rng)?;
    let mirror = objective.kind().mirror_prefixes().map(|p| MomentumMirror::new(&stack.params, p).shadow);
    let ds = fixture_dataset(120, seed);
    let raw = sample_batch(&ds, &objective.view_spec(), batch, &mut rng)?;
    let views = objective.prepare(&raw, &AugmentSpec::disabled(), &mut rng);
    Ok(Fixture { objective, stack, mirror, views })
}

pub fn tiny_fixture(kind: ObjectiveKind, batch: usize, seed: u64) -> Result<Fixture> {
    tiny_fixture_with(ObjectiveConfig::defaults(kind), batch, seed)
}
