//! Pre-training objectives over the encoder stack.
//!
//! Every objective declares the parameters it needs on an [`EncoderStack`],
//! names the view it samples, augments raw views, and builds a scalar loss on
//! an autograd tape. Momentum targets are evaluated through a frozen binding
//! of the mirror, so they never receive gradient.

mod contrastive;
pub mod fixture;
mod gradcheck;
mod masked;
mod sequence;
mod supervised;
pub mod value;

use std::collections::BTreeMap;

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentSpec};
use crate::data::{SampleView, StackedObservation, ViewKind, ViewPayload, ViewSpec, ACTION_COUNT};
use crate::model::EncoderStack;
use crate::nn::{Binding, TransformerConfig};
use crate::{Error, Result};

pub use contrastive::{info_nce, nce_from_logits, spr_info_nce, Reduction};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use masked::{mask_count, masked_mse, patch_targets, sample_mask, PATCH_DIM, PATCH_SIDE};
pub use value::{categorical_projection, cql_penalty, support};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Curl,
    Mae,
    Atc,
    SiamMae,
    R3m,
    Bc,
    Spr,
    Idm,
    SprIdm,
    CqlM,
    CqlD,
    Dt,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 12] = [
        ObjectiveKind::Curl,
        ObjectiveKind::Mae,
        ObjectiveKind::Atc,
        ObjectiveKind::SiamMae,
        ObjectiveKind::R3m,
        ObjectiveKind::Bc,
        ObjectiveKind::Spr,
        ObjectiveKind::Idm,
        ObjectiveKind::SprIdm,
        ObjectiveKind::CqlM,
        ObjectiveKind::CqlD,
        ObjectiveKind::Dt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Curl => "curl",
            ObjectiveKind::Mae => "mae",
            ObjectiveKind::Atc => "atc",
            ObjectiveKind::SiamMae => "siam_mae",
            ObjectiveKind::R3m => "r3m",
            ObjectiveKind::Bc => "bc",
            ObjectiveKind::Spr => "spr",
            ObjectiveKind::Idm => "idm",
            ObjectiveKind::SprIdm => "spr_idm",
            ObjectiveKind::CqlM => "cql_m",
            ObjectiveKind::CqlD => "cql_d",
            ObjectiveKind::Dt => "dt",
        }
    }

    /// Parameter prefixes shadowed by a momentum mirror, if any.
    pub fn mirror_prefixes(self) -> Option<&'static [&'static str]> {
        match self {
            ObjectiveKind::Curl | ObjectiveKind::Atc | ObjectiveKind::R3m | ObjectiveKind::Spr | ObjectiveKind::SprIdm => {
                Some(&["backbone.", "neck."])
            }
            ObjectiveKind::CqlM | ObjectiveKind::CqlD => Some(&["backbone.", "neck.", "head."]),
            _ => None,
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}`")))
    }
}

/// Objective hyperparameters. Fields an objective does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Steps to the future frame (upper end of the range for SiamMAE).
    pub k: usize,
    pub k_min: Option<usize>,
    /// Steps to the hard-negative frame (R3M).
    pub k_prime: Option<usize>,
    /// Prediction length for SPR, sequence length in steps for DT.
    pub horizon: usize,
    pub mask_ratio: f64,
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    pub cql_alpha: f64,
    pub gamma: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub atoms: usize,
    pub reward_scale: f64,
    pub spr_weight: f64,
    pub idm_weight: f64,
    pub nce_reduction: Reduction,
    /// Augment momentum-branch inputs as well as online ones.
    pub augment_target: bool,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl ObjectiveConfig {
    pub fn defaults(kind: ObjectiveKind) -> Self {
        let tf = |layers| TransformerConfig { layers, heads: 4, mlp_ratio: 4 };
        let mut c = Self {
            kind,
            k: 3,
            k_min: None,
            k_prime: None,
            horizon: 4,
            mask_ratio: 0.9,
            encoder: tf(3),
            decoder: tf(4),
            cql_alpha: 0.1,
            gamma: 0.99,
            v_min: -10.0,
            v_max: 10.0,
            atoms: 51,
            reward_scale: 0.01,
            spr_weight: 1.0,
            idm_weight: 1.0,
            nce_reduction: Reduction::Mean,
            augment_target: true,
            tau_start: 0.99,
            tau_end: 0.999,
        };
        match kind {
            ObjectiveKind::SiamMae => {
                c.mask_ratio = 0.95;
                c.k_min = Some(1);
                c.k = 3;
            }
            ObjectiveKind::R3m => c.k_prime = Some(6),
            ObjectiveKind::Dt => {
                c.horizon = 8;
                c.gamma = 1.0;
                c.encoder = tf(4);
            }
            _ => {}
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("objective.{f}"), m));
        if matches!(self.kind, ObjectiveKind::Mae | ObjectiveKind::SiamMae) && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio", "must lie in (0, 1)");
        }
        if self.kind == ObjectiveKind::R3m && self.k_prime.is_none_or(|kp| kp <= self.k) {
            return bad("k_prime", "must exceed k");
        }
        if self.kind == ObjectiveKind::CqlD && self.atoms < 2 {
            return bad("atoms", "need at least two atoms");
        }
        if !(self.v_min < self.v_max) {
            return bad("v_min", "must be below v_max");
        }
        if matches!(self.kind, ObjectiveKind::Spr | ObjectiveKind::SprIdm | ObjectiveKind::Dt) && self.horizon == 0 {
            return bad("horizon", "must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.tau_start) || !(0.0..=1.0).contains(&self.tau_end) || self.tau_start > self.tau_end {
            return bad("tau_start", "need 0 ≤ tau_start ≤ tau_end ≤ 1");
        }
        if self.k_min.is_some_and(|lo| lo > self.k) {
            return bad("k_min", "must not exceed k");
        }
        Ok(())
    }
}

/// Loss value with named diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

/// A loss still attached to its tape.
pub struct LossTerms<'t> {
    pub loss: Var<'t>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossTerms<'_> {
    pub fn output(&self) -> LossOutput {
        LossOutput { loss: self.loss.item(), diagnostics: self.diagnostics.clone() }
    }
}

/// Online and (optional) momentum bindings of one stack.
pub struct LossContext<'a, 't, 's> {
    pub stack: &'a EncoderStack,
    pub online: &'a Binding<'t, 's>,
    pub target: Option<&'a Binding<'t, 's>>,
}

impl<'a, 't, 's> LossContext<'a, 't, 's> {
    fn target(&self, kind: ObjectiveKind) -> Result<&'a Binding<'t, 's>> {
        self.target.ok_or(Error::MissingMirror(kind.name()))
    }

    /// Backbone + neck latents for a batch of stacks.
    pub fn encode(&self, b: &Binding<'t, 's>, obs: &[&StackedObservation], games: &[&str]) -> Result<Var<'t>> {
        self.stack.check_games(games)?;
        let x = EncoderStack::input(b.tape(), obs)?;
        Ok(self.stack.encode(b, x, games))
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub config: ObjectiveConfig,
}

impl Objective {
    pub fn new(config: ObjectiveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.config.kind
    }

    /// Adds heads and objective-specific parameters to `stack`.
    pub fn declare(&self, stack: &mut EncoderStack, rng: &mut ChaCha8Rng) -> Result<()> {
        let dq = stack.latent_dim();
        let c = &self.config;
        match c.kind {
            ObjectiveKind::Curl | ObjectiveKind::Atc | ObjectiveKind::R3m => stack.add_head("pred", dq, dq, rng)?,
            ObjectiveKind::Bc => stack.add_head("policy", dq, ACTION_COUNT, rng)?,
            ObjectiveKind::Idm => stack.add_head("idm", 2 * dq, ACTION_COUNT, rng)?,
            ObjectiveKind::Spr => contrastive::declare_spr(stack, rng)?,
            ObjectiveKind::SprIdm => {
                contrastive::declare_spr(stack, rng)?;
                stack.add_head("idm", 2 * dq, ACTION_COUNT, rng)?;
            }
            ObjectiveKind::Mae => masked::declare(stack, c, false, rng)?,
            ObjectiveKind::SiamMae => masked::declare(stack, c, true, rng)?,
            ObjectiveKind::CqlM => stack.add_head("q", dq, ACTION_COUNT, rng)?,
            ObjectiveKind::CqlD => stack.add_head("qd", dq, ACTION_COUNT * c.atoms, rng)?,
            ObjectiveKind::Dt => sequence::declare(stack, c, rng)?,
        }
        Ok(())
    }

    /// View the sampler must produce for this objective.
    pub fn view_spec(&self) -> ViewSpec {
        let c = &self.config;
        match c.kind {
            ObjectiveKind::Curl | ObjectiveKind::Mae => ViewSpec::image(),
            ObjectiveKind::Atc => ViewSpec::video(c.k),
            ObjectiveKind::R3m => ViewSpec { k_prime: c.k_prime, ..ViewSpec::video(c.k) },
            ObjectiveKind::SiamMae => ViewSpec { k_min: c.k_min, ..ViewSpec::video(c.k) },
            ObjectiveKind::Bc => ViewSpec::demo(1),
            ObjectiveKind::Idm => ViewSpec::demo(2),
            ObjectiveKind::Spr | ObjectiveKind::SprIdm => ViewSpec::demo(c.horizon + 1),
            ObjectiveKind::CqlM | ObjectiveKind::CqlD => ViewSpec { terminal_next: true, ..ViewSpec::trajectory(2) },
            ObjectiveKind::Dt => ViewSpec { pad_short: true, rtg_gamma: Some(c.gamma), ..ViewSpec::trajectory(c.horizon) },
        }
    }

    /// Applies augmentation to every observation of every view. Image views
    /// for CURL become two-view pairs (`Video` with `k = 0`).
    pub fn prepare(&self, views: &[SampleView], spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Vec<SampleView> {
        let mut aug = |o: &StackedObservation| augment(o, spec, rng).0;
        let target_aug = self.config.augment_target;
        views
            .iter()
            .map(|v| {
                let payload = match &v.payload {
                    ViewPayload::Image { obs } if self.config.kind == ObjectiveKind::Curl => {
                        let anchor = aug(obs);
                        let future = if target_aug { aug(obs) } else { obs.clone() };
                        ViewPayload::Video { anchor, future, k: 0, far: None }
                    }
                    ViewPayload::Image { obs } => ViewPayload::Image { obs: aug(obs) },
                    ViewPayload::Video { anchor, future, k, far } => {
                        let anchor = aug(anchor);
                        let mut t = |o: &StackedObservation| if target_aug { aug(o) } else { o.clone() };
                        let future = t(future);
                        ViewPayload::Video { anchor, future, k: *k, far: far.as_ref().map(t) }
                    }
                    ViewPayload::Demo { obs, actions } => {
                        ViewPayload::Demo { obs: obs.iter().map(&mut aug).collect(), actions: actions.clone() }
                    }
                    ViewPayload::Trajectory { obs, actions, rewards, terminals, returns_to_go } => ViewPayload::Trajectory {
                        obs: obs.iter().map(&mut aug).collect(),
                        actions: actions.clone(),
                        rewards: rewards.clone(),
                        terminals: terminals.clone(),
                        returns_to_go: returns_to_go.clone(),
                    },
                };
                let kind = if matches!(payload, ViewPayload::Video { .. }) { ViewKind::Video } else { v.kind };
                SampleView { kind, game: v.game.clone(), episode: v.episode, anchor: v.anchor, payload }
            })
            .collect()
    }

    /// Builds the loss for a prepared batch. `rng` drives token masking.
    pub fn loss<'t>(&self, ctx: &LossContext<'_, 't, '_>, views: &[SampleView], rng: &mut ChaCha8Rng) -> Result<LossTerms<'t>> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let c = &self.config;
        let terms = match c.kind {
            ObjectiveKind::Curl | ObjectiveKind::Atc | ObjectiveKind::R3m => contrastive::temporal(ctx, c, views)?,
            ObjectiveKind::Spr => contrastive::spr(ctx, c, views)?,
            ObjectiveKind::SprIdm => {
                let spr = contrastive::spr(ctx, c, views)?;
                let idm = supervised::idm(ctx, views)?;
                let mut diagnostics: BTreeMap<String, f64> =
                    spr.diagnostics.into_iter().map(|(k, v)| (format!("spr_{k}"), v)).collect();
                diagnostics.extend(idm.diagnostics.into_iter().map(|(k, v)| (format!("idm_{k}"), v)));
                diagnostics.insert("spr_loss".into(), spr.loss.item());
                diagnostics.insert("idm_loss".into(), idm.loss.item());
                LossTerms { loss: spr.loss.scale(c.spr_weight) + idm.loss.scale(c.idm_weight), diagnostics }
            }
            ObjectiveKind::Bc => supervised::bc(ctx, views)?,
            ObjectiveKind::Idm => supervised::idm(ctx, views)?,
            ObjectiveKind::Mae => masked::mae(ctx, c, views, rng)?,
            ObjectiveKind::SiamMae => masked::siam_mae(ctx, c, views, rng)?,
            ObjectiveKind::CqlM => value::cql_mse(ctx, c, views)?,
            ObjectiveKind::CqlD => value::cql_distributional(ctx, c, views)?,
            ObjectiveKind::Dt => sequence::dt(ctx, c, views)?,
        };
        let v = terms.loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} loss = {v}", c.kind.name())));
        }
        Ok(terms)
    }
}

/// Mean cross-entropy of `logits (N, C)` against integer targets, over rows
/// with positive weight (weights are 0/1).
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize], weights: Option<&[f64]>) -> Result<(Var<'t>, f64)> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!("action {t} outside [0, {c})")));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let onehot = Array::from_shape_fn(vec![n, c], |d| if d[1] == targets[d[0]] { w(d[0]) } else { 0.0 });
    let total: f64 = (0..n).map(w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("no weighted rows".into()));
    }
    let lv = logits.value();
    let correct = (0..n)
        .filter(|&i| w(i) > 0.0)
        .filter(|&i| {
            let row = lv.index_axis(ndarray::Axis(0), i);
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == targets[i]
        })
        .count() as f64;
    let tape = logits.tape();
    let nll = (logits.log_softmax(1) * tape.constant(onehot)).sum().scale(-1.0 / total);
    Ok((nll, correct / total))
}

pub(crate) fn games_of(views: &[SampleView]) -> Vec<&str> {
    views.iter().map(|v| v.game.as_str()).collect()
}

#[cfg(test)]
mod tests;
