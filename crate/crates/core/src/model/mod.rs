//! Backbone / neck / head encoder stack.

mod checkpoint;
mod mirror;

use std::collections::BTreeMap;

use autograd::{conv_output_size, Array, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StackedObservation, FRAME_LEN, FRAME_SIDE, STACK_DEPTH};
use crate::nn::{affine_norm_params, conv, conv_params, group_norm, instance_norm, mlp2_params, mlp2_with, Activation, per_game_embedding, per_game_linear, per_game_linear_params, Binding, ParamStore};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mirror::{ema_update, tau_at, MomentumMirror};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    R50like,
    R18like,
    Cnn3,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
    /// Plain conv + bias + ReLU, no normalization.
    Plain,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: (usize, usize, usize, usize), // kernel, stride, pad, width
    block: BlockKind,
    /// (blocks, width, stride) per stage; for `Plain`, (kernel, width, stride).
    stages: Vec<(usize, usize, usize)>,
}

impl BackbonePreset {
    fn layout(self, m: f64) -> Layout {
        let w = |c: usize| ((c as f64 * m).round() as usize).max(1);
        match self {
            BackbonePreset::R50like => Layout {
                stem: (7, 2, 3, w(64)),
                block: BlockKind::Bottleneck,
                stages: vec![(3, w(64), 1), (4, w(128), 2), (6, w(256), 2), (3, w(512), 2)],
            },
            BackbonePreset::R18like => Layout {
                stem: (7, 2, 3, w(32)),
                block: BlockKind::Basic,
                stages: vec![(2, w(32), 1), (2, w(64), 2), (2, w(128), 2), (2, w(256), 2)],
            },
            BackbonePreset::Tiny => Layout {
                stem: (4, 4, 0, w(8)),
                block: BlockKind::Basic,
                stages: vec![(1, w(8), 2), (1, w(16), 2)],
            },
            BackbonePreset::Cnn3 => Layout {
                stem: (8, 4, 0, w(32)),
                block: BlockKind::Plain,
                stages: vec![(4, w(64), 2), (3, w(64), 1)],
            },
        }
    }
}

fn expansion(kind: BlockKind) -> usize {
    if kind == BlockKind::Bottleneck { 4 } else { 1 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackbonePreset,
    #[serde(default = "one")]
    pub width_multiplier: f64,
    pub neck_hidden: usize,
    pub latent_dim: usize,
    /// Nonlinearity in backbone and neck. The Tiny preset is smooth so
    /// finite-difference checks do not straddle ReLU kinks.
    #[serde(default)]
    pub activation: Activation,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn preset(backbone: BackbonePreset) -> Self {
        let (neck_hidden, latent_dim, activation) = match backbone {
            BackbonePreset::Tiny => (32, 16, Activation::Gelu),
            _ => (1024, 512, Activation::Relu),
        };
        Self { backbone, width_multiplier: 1.0, neck_hidden, latent_dim, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) {
            return Err(Error::config("model.width_multiplier", "must be positive"));
        }
        if self.latent_dim == 0 || self.neck_hidden == 0 {
            return Err(Error::config("model", "neck widths must be positive"));
        }
        Ok(())
    }

    /// `(channels, height, width)` of the backbone output for 84×84 input.
    pub fn feature_shape(&self) -> [usize; 3] {
        *self.stage_shapes().last().expect("at least one stage")
    }

    /// Output shape after the stem and after each stage.
    pub fn stage_shapes(&self) -> Vec<[usize; 3]> {
        let l = self.backbone.layout(self.width_multiplier);
        let (k, s, p, c) = l.stem;
        let mut side = conv_output_size(FRAME_SIDE, k, s, p);
        let mut out = vec![[c, side, side]];
        for &(a, width, stride) in &l.stages {
            side = match l.block {
                BlockKind::Plain => conv_output_size(side, a, stride, 0),
                _ => conv_output_size(side, 3, stride, 1),
            };
            out.push([width * expansion(l.block), side, side]);
        }
        out
    }
}

/// The encoder stack: config, registered games, and every parameter
/// (objective-specific ones included, under `aux.`).
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub config: ModelConfig,
    games: Vec<String>,
    /// Head name → (input width, output width).
    heads: BTreeMap<String, (usize, usize)>,
    pub params: ParamStore,
}

impl EncoderStack {
    pub fn new(config: ModelConfig, games: &[String], rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        declare_backbone(&config, &mut params, rng);
        let mut stack = Self { config, games: Vec::new(), heads: BTreeMap::new(), params };
        stack.declare_neck_mlp(rng);
        for g in games {
            stack.register_game(g, rng);
        }
        Ok(stack)
    }

    fn declare_neck_mlp(&mut self, rng: &mut ChaCha8Rng) {
        let [d, _, _] = self.config.feature_shape();
        mlp2_params(&mut self.params, "neck.mlp", d, self.config.neck_hidden, self.config.latent_dim, rng);
    }

    pub fn games(&self) -> &[String] {
        &self.games
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn heads(&self) -> &BTreeMap<String, (usize, usize)> {
        &self.heads
    }

    /// Adds a game's spatial embedding and an entry in every head.
    pub fn register_game(&mut self, game: &str, rng: &mut ChaCha8Rng) {
        if self.games.iter().any(|g| g == game) {
            return;
        }
        let [_, h, w] = self.config.feature_shape();
        self.params.insert(format!("neck.spatial.{game}"), Array::ones(vec![1, h * w]));
        let g = vec![game.to_string()];
        for (name, &(i, o)) in &self.heads {
            per_game_linear_params(&mut self.params, &format!("head.{name}"), &g, i, o, rng);
        }
        self.games.push(game.to_string());
        self.games.sort();
    }

    /// Declares a per-game linear head; a no-op if it exists with the same shape.
    pub fn add_head(&mut self, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        match self.heads.get(name) {
            Some(&shape) if shape == (input, output) => return Ok(()),
            Some(&shape) => return Err(Error::Shape(format!("head `{name}` exists with shape {shape:?}"))),
            None => {}
        }
        per_game_linear_params(&mut self.params, &format!("head.{name}"), &self.games, input, output, rng);
        self.heads.insert(name.to_string(), (input, output));
        Ok(())
    }

    pub fn check_games(&self, games: &[&str]) -> Result<()> {
        match games.iter().find(|g| !self.games.iter().any(|k| k == *g)) {
            Some(g) => Err(Error::UnknownGame(g.to_string())),
            None => Ok(()),
        }
    }

    /// Scales a batch of stacks to `[0, 1]` and places it on the tape.
    pub fn input<'t>(tape: &'t Tape, obs: &[&StackedObservation]) -> Result<Var<'t>> {
        let mut data = Vec::with_capacity(obs.len() * STACK_DEPTH * FRAME_LEN);
        for o in obs {
            if let Some(v) = o.values().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observation pixel {v}")));
            }
            data.extend(o.values().iter().map(|&v| v as f64 / 255.0));
        }
        let arr = Array::from_shape_vec(vec![obs.len(), STACK_DEPTH, FRAME_SIDE, FRAME_SIDE], data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(tape.constant(arr))
    }

    /// Backbone outputs after the stem and after each stage.
    pub fn backbone_stages<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Vec<Var<'t>> {
        let l = self.config.backbone.layout(self.config.width_multiplier);
        let act = self.config.activation;
        let (_, s, p, _) = l.stem;
        let mut outs = Vec::new();
        let mut h = conv(b, "backbone.stem", x, s, p);
        h = act.apply(if l.block == BlockKind::Plain { h } else { group_norm(b, "backbone.stem.gn", h) });
        outs.push(h);
        for (si, &(a, _, stride)) in l.stages.iter().enumerate() {
            if l.block == BlockKind::Plain {
                h = act.apply(conv(b, &format!("backbone.s{si}"), h, stride, 0));
            } else {
                for bi in 0..a {
                    let st = if bi == 0 { stride } else { 1 };
                    h = residual_block(b, &format!("backbone.s{si}.b{bi}"), h, st, l.block, act);
                }
            }
            outs.push(h);
        }
        outs
    }

    pub fn backbone<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        *self.backbone_stages(b, x).last().unwrap()
    }

    /// Feature map multiplied point-wise by each sample's game embedding.
    pub fn spatial<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>, games: &[&str]) -> Var<'t> {
        let s = z.shape();
        let e = per_game_embedding(b, "neck.spatial", games, &vec![0; games.len()]).reshape(&[s[0], 1, s[2], s[3]]);
        z * e
    }

    /// Latent vector per sample: embed, mean-pool, standardize, MLP.
    pub fn neck<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>, games: &[&str]) -> Var<'t> {
        let s = z.shape();
        let pooled = self.spatial(b, z, games).reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2, false);
        mlp2_with(b, "neck.mlp", instance_norm(pooled), self.config.activation)
    }

    /// Embedded feature map as `(N, H·W, D_z)` tokens, before the MLP.
    pub fn spatial_tokens<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>, games: &[&str]) -> Var<'t> {
        let s = z.shape();
        self.spatial(b, z, games).reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
    }

    /// Standardize then MLP over the last axis of raw feature tokens.
    pub fn token_mlp<'t>(&self, b: &Binding<'t, '_>, tokens: Var<'t>) -> Var<'t> {
        mlp2_with(b, "neck.mlp", instance_norm(tokens), self.config.activation)
    }

    /// One latent token per spatial position, `(N, H·W, D_q)`.
    pub fn neck_tokens<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>, games: &[&str]) -> Var<'t> {
        self.token_mlp(b, self.spatial_tokens(b, z, games))
    }

    /// Backbone then neck.
    pub fn encode<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, games: &[&str]) -> Var<'t> {
        self.neck(b, self.backbone(b, x), games)
    }

    pub fn head<'t>(&self, b: &Binding<'t, '_>, name: &str, q: Var<'t>, games: &[&str]) -> Var<'t> {
        per_game_linear(b, &format!("head.{name}"), q, games)
    }

    pub fn freeze_backbone(&mut self) {
        self.params.set_trainable("backbone.", false);
    }

    pub fn backbone_frozen(&self) -> bool {
        self.params.iter().filter(|(k, _)| k.starts_with("backbone.")).all(|(_, p)| !p.trainable)
    }

    /// Re-draws neck and head parameters and drops objective-specific ones.
    pub fn reinit_neck_head(&mut self, rng: &mut ChaCha8Rng) {
        self.params.remove_prefix("neck.");
        self.params.remove_prefix("head.");
        self.params.remove_prefix("aux.");
        self.declare_neck_mlp(rng);
        let [_, h, w] = self.config.feature_shape();
        for g in &self.games {
            self.params.insert(format!("neck.spatial.{g}"), Array::ones(vec![1, h * w]));
        }
        for (name, &(i, o)) in &self.heads {
            per_game_linear_params(&mut self.params, &format!("head.{name}"), &self.games, i, o, rng);
        }
    }

    /// Structural description stored alongside parameters in checkpoints.
    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "games": self.games, "heads": self.heads })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta["stack"];
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let games: Vec<String> = serde_json::from_value(meta["games"].clone())?;
        let heads: BTreeMap<String, (usize, usize)> = serde_json::from_value(meta["heads"].clone())?;
        Ok(Self { config, games, heads, params: ckpt.params.clone() })
    }
}

fn declare_backbone(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let l = config.backbone.layout(config.width_multiplier);
    let (k, _, _, c0) = l.stem;
    let plain = l.block == BlockKind::Plain;
    conv_params(store, "backbone.stem", STACK_DEPTH, c0, k, plain, rng);
    if !plain {
        affine_norm_params(store, "backbone.stem.gn", c0);
    }
    let mut cin = c0;
    for (si, &(a, width, stride)) in l.stages.iter().enumerate() {
        if plain {
            conv_params(store, &format!("backbone.s{si}"), cin, width, a, true, rng);
            cin = width;
            continue;
        }
        for bi in 0..a {
            let st = if bi == 0 { stride } else { 1 };
            let p = format!("backbone.s{si}.b{bi}");
            let cout = width * expansion(l.block);
            match l.block {
                BlockKind::Basic => {
                    conv_params(store, &format!("{p}.c1"), cin, width, 3, false, rng);
                    affine_norm_params(store, &format!("{p}.n1"), width);
                    conv_params(store, &format!("{p}.c2"), width, width, 3, false, rng);
                    affine_norm_params(store, &format!("{p}.n2"), width);
                }
                BlockKind::Bottleneck => {
                    conv_params(store, &format!("{p}.c1"), cin, width, 1, false, rng);
                    affine_norm_params(store, &format!("{p}.n1"), width);
                    conv_params(store, &format!("{p}.c2"), width, width, 3, false, rng);
                    affine_norm_params(store, &format!("{p}.n2"), width);
                    conv_params(store, &format!("{p}.c3"), width, cout, 1, false, rng);
                    affine_norm_params(store, &format!("{p}.n3"), cout);
                }
                BlockKind::Plain => unreachable!(),
            }
            if st != 1 || cin != cout {
                conv_params(store, &format!("{p}.down"), cin, cout, 1, false, rng);
                affine_norm_params(store, &format!("{p}.down.gn"), cout);
            }
            cin = cout;
        }
    }
}

fn residual_block<'t>(b: &Binding<'t, '_>, p: &str, x: Var<'t>, stride: usize, kind: BlockKind, act: Activation) -> Var<'t> {
    let h = match kind {
        BlockKind::Basic => {
            let h = act.apply(group_norm(b, &format!("{p}.n1"), conv(b, &format!("{p}.c1"), x, stride, 1)));
            group_norm(b, &format!("{p}.n2"), conv(b, &format!("{p}.c2"), h, 1, 1))
        }
        BlockKind::Bottleneck => {
            let h = act.apply(group_norm(b, &format!("{p}.n1"), conv(b, &format!("{p}.c1"), x, 1, 0)));
            let h = act.apply(group_norm(b, &format!("{p}.n2"), conv(b, &format!("{p}.c2"), h, stride, 1)));
            group_norm(b, &format!("{p}.n3"), conv(b, &format!("{p}.c3"), h, 1, 0))
        }
        BlockKind::Plain => unreachable!(),
    };
    let shortcut = if b.store().contains(&format!("{p}.down.w")) {
        group_norm(b, &format!("{p}.down.gn"), conv(b, &format!("{p}.down"), x, stride, 0))
    } else {
        x
    };
    act.apply(h + shortcut)
}

/// Runs backbone and neck without recording gradients.
pub fn encode_frozen(stack: &EncoderStack, store: &ParamStore, obs: &[&StackedObservation], games: &[&str]) -> Result<Array> {
    stack.check_games(games)?;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, store);
    let x = EncoderStack::input(&tape, obs)?;
    let q = stack.encode(&b, x, games);
    let v = (*q.value()).clone();
    Ok(v)
}
