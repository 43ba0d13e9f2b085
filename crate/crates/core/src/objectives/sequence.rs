//! Return-conditioned causal sequence modeling over (return, state, action)
//! token triplets.

use std::collections::BTreeMap;

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;

use super::contrastive::one_hot;
use super::{cross_entropy, games_of, LossContext, LossTerms, ObjectiveConfig};
use crate::data::{SampleView, StackedObservation, ViewPayload, ACTION_COUNT};
use crate::model::EncoderStack;
use crate::nn::{affine_norm_params, block, block_params, causal_mask, fan_in_uniform, layer_norm, linear, linear_params, MASKED};
use crate::{Error, Result};

/// Tokens per step.
pub const TOKENS_PER_STEP: usize = 3;

pub(super) fn declare(stack: &mut EncoderStack, c: &ObjectiveConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let dq = stack.latent_dim();
    if c.encoder.heads == 0 || dq % c.encoder.heads != 0 {
        return Err(Error::config("objective.encoder.heads", format!("latent width {dq} not divisible by {} heads", c.encoder.heads)));
    }
    if !stack.params.contains("aux.dt.pos") {
        linear_params(&mut stack.params, "aux.dt.ret", 1, dq, rng);
        stack.params.insert("aux.dt.pos", fan_in_uniform(&[TOKENS_PER_STEP * c.horizon, dq], dq, rng));
        for i in 0..c.encoder.layers {
            block_params(&mut stack.params, &format!("aux.dt.b{i}"), dq, c.encoder.mlp_ratio, false, rng);
        }
        affine_norm_params(&mut stack.params, "aux.dt.ln", dq);
    }
    stack.add_head("dt_act", ACTION_COUNT, dq, rng)?;
    stack.add_head("dt", dq, ACTION_COUNT, rng)
}

/// A trajectory window left-padded to the full horizon.
struct Window<'a> {
    game: &'a str,
    pad: usize,
    obs: &'a [StackedObservation],
    actions: &'a [u8],
    returns: &'a [f64],
}

fn windows(views: &[SampleView], horizon: usize) -> Result<Vec<Window<'_>>> {
    views
        .iter()
        .map(|v| {
            let ViewPayload::Trajectory { obs, actions, returns_to_go: Some(rtg), .. } = &v.payload else {
                return Err(Error::InvalidArgument("DT needs trajectory views with returns-to-go".into()));
            };
            if obs.is_empty() || obs.len() > horizon {
                return Err(Error::Shape(format!("DT window of {} steps, horizon {horizon}", obs.len())));
            }
            Ok(Window { game: &v.game, pad: horizon - obs.len(), obs, actions, returns: rtg })
        })
        .collect()
}

/// Action logits `(N, K, A)` at every state token, padded steps included.
pub(super) fn dt_logits<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<Var<'t>> {
    let k = c.horizon;
    let ws = windows(views, k)?;
    let b = ctx.online;
    let tape = b.tape();
    let dq = ctx.stack.latent_dim();
    let n = ws.len();
    let len = TOKENS_PER_STEP * k;

    let obs: Vec<&StackedObservation> = ws.iter().flat_map(|w| w.obs.iter()).collect();
    let step_games: Vec<&str> = ws.iter().flat_map(|w| std::iter::repeat_n(w.game, w.obs.len())).collect();
    let acts: Vec<u8> = ws.iter().flat_map(|w| w.actions.iter().copied()).collect();
    let rets: Vec<f64> = ws.iter().flat_map(|w| w.returns.iter().map(|r| r * c.reward_scale)).collect();
    let m = obs.len();

    let ret_tok = linear(b, "aux.dt.ret", tape.constant(Array::from_shape_vec(vec![m, 1], rets).expect("returns shape")));
    let state_tok = ctx.encode(b, &obs, &step_games)?;
    let act_tok = ctx.stack.head(b, "dt_act", tape.constant(one_hot(&acts)), &step_games);
    // Row 0 is the padding token; then returns, states, actions.
    let pool = Var::concat(&[tape.constant(Array::zeros(vec![1, dq])), ret_tok, state_tok, act_tok], 0);

    let mut rows = Vec::with_capacity(n * len);
    let mut key_pad = Array::zeros(vec![n, 1, 1, len]);
    let mut offset = 0;
    for (i, w) in ws.iter().enumerate() {
        for s in 0..k {
            if s < w.pad {
                rows.extend([0; TOKENS_PER_STEP]);
                for t in 0..TOKENS_PER_STEP {
                    key_pad[[i, 0, 0, TOKENS_PER_STEP * s + t]] = MASKED;
                }
            } else {
                let j = offset + s - w.pad;
                rows.extend([1 + j, 1 + m + j, 1 + 2 * m + j]);
            }
        }
        offset += w.obs.len();
    }
    let mask = key_pad + causal_mask(len).into_shape_with_order(vec![1, 1, len, len]).expect("mask shape");
    let mask = tape.constant(mask);

    let mut h = pool.index_select(&rows).reshape(&[n, len, dq]) + b.var("aux.dt.pos").reshape(&[1, len, dq]);
    for i in 0..c.encoder.layers {
        h = block(b, &format!("aux.dt.b{i}"), h, None, c.encoder.heads, Some(mask));
    }
    h = layer_norm(b, "aux.dt.ln", h);
    let state_rows: Vec<usize> = (0..n).flat_map(|i| (0..k).map(move |s| i * len + TOKENS_PER_STEP * s + 1)).collect();
    let games: Vec<&str> = ws.iter().flat_map(|w| std::iter::repeat_n(w.game, k)).collect();
    let logits = ctx.stack.head(b, "dt", h.reshape(&[n * len, dq]).index_select(&state_rows), &games);
    Ok(logits.reshape(&[n, k, ACTION_COUNT]))
}

/// Cross-entropy of state-token logits against logged actions over the
/// unpadded steps.
pub(super) fn dt<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let k = c.horizon;
    ctx.stack.check_games(&games_of(views))?;
    let logits = dt_logits(ctx, c, views)?;
    let ws = windows(views, k)?;
    let mut targets = Vec::with_capacity(ws.len() * k);
    let mut weights = Vec::with_capacity(ws.len() * k);
    for w in &ws {
        for s in 0..k {
            let real = s >= w.pad;
            targets.push(if real { w.actions[s - w.pad] as usize } else { 0 });
            weights.push(real as u8 as f64);
        }
    }
    let (loss, acc) = cross_entropy(logits.reshape(&[ws.len() * k, ACTION_COUNT]), &targets, Some(&weights))?;
    Ok(LossTerms { loss, diagnostics: BTreeMap::from([("accuracy".to_string(), acc)]) })
}
