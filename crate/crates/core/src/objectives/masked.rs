//! Masked reconstruction of stacked frames from convolutional feature tokens.

use std::collections::BTreeMap;

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;

use super::{games_of, LossContext, LossTerms, ObjectiveConfig};
use crate::data::{SampleView, StackedObservation, ViewPayload, FRAME_SIDE, STACK_DEPTH};
use crate::model::EncoderStack;
use crate::nn::{block, block_params, sinusoidal_positions, Binding};
use crate::{Error, Result};

/// Pixel side of one token's patch on the 6×6 grid of the residual presets.
pub const PATCH_SIDE: usize = FRAME_SIDE / 6;
/// Targets per token: every stack frame of one patch.
pub const PATCH_DIM: usize = STACK_DEPTH * PATCH_SIDE * PATCH_SIDE;

const HEAD: &str = "recon";

/// Number of masked tokens, `round(ρ·tokens)`.
pub fn mask_count(ratio: f64, tokens: usize) -> usize {
    (ratio * tokens as f64).round() as usize
}

/// Uniform mask without replacement; `true` marks a masked token.
pub fn sample_mask(tokens: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; tokens];
    for i in rand::seq::index::sample(rng, tokens, count.min(tokens)) {
        mask[i] = true;
    }
    mask
}

fn patch_side(grid: (usize, usize)) -> Result<usize> {
    let (h, w) = grid;
    if h != w || h == 0 || FRAME_SIDE % h != 0 {
        return Err(Error::Shape(format!("feature grid {h}×{w} does not tile an {FRAME_SIDE}-pixel frame")));
    }
    Ok(FRAME_SIDE / h)
}

/// Reconstruction targets `(H·W, 4·p·p)` in `[0, 1]`: token `(i, j)` owns
/// pixel rows `p·i..p·i+p` and columns `p·j..p·j+p` of every frame, laid out
/// frame-major then row-major.
pub fn patch_targets(obs: &StackedObservation, grid: (usize, usize)) -> Result<Array> {
    let p = patch_side(grid)?;
    let (h, w) = grid;
    Ok(ndarray::Array2::from_shape_fn((h * w, STACK_DEPTH * p * p), |(t, k)| {
        let (ti, tj) = (t / w, t % w);
        let f = k / (p * p);
        let (r, c) = ((k % (p * p)) / p, k % p);
        obs.at(f, ti * p + r, tj * p + c) as f64 / 255.0
    })
    .into_dyn())
}

fn prefix(siam: bool) -> &'static str {
    if siam {
        "aux.siam_mae"
    } else {
        "aux.mae"
    }
}

pub(super) fn declare(stack: &mut EncoderStack, c: &ObjectiveConfig, siam: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    let dq = stack.latent_dim();
    for tf in [&c.encoder, &c.decoder] {
        if tf.heads == 0 || dq % tf.heads != 0 {
            return Err(Error::config("objective.encoder.heads", format!("latent width {dq} not divisible by {} heads", tf.heads)));
        }
    }
    let [_, h, w] = stack.config.feature_shape();
    let p = patch_side((h, w))?;
    let pre = prefix(siam);
    if !stack.params.contains(&format!("{pre}.mask_token")) {
        for i in 0..c.encoder.layers {
            block_params(&mut stack.params, &format!("{pre}.enc.b{i}"), dq, c.encoder.mlp_ratio, false, rng);
        }
        for i in 0..c.decoder.layers {
            block_params(&mut stack.params, &format!("{pre}.dec.b{i}"), dq, c.decoder.mlp_ratio, siam, rng);
        }
        stack.params.insert(format!("{pre}.mask_token"), Array::zeros(vec![1, dq]));
    }
    stack.add_head(HEAD, dq, STACK_DEPTH * p * p, rng)
}

/// Squared error between `pred (N, T, P)` and `target`, averaged over masked
/// tokens and their `P` values; visible tokens carry zero weight.
pub fn masked_mse<'t>(pred: Var<'t>, target: &Array, masks: &[Vec<bool>]) -> Result<Var<'t>> {
    let s = pred.shape();
    if s.len() != 3 || target.shape() != s.as_slice() || masks.len() != s[0] || masks.iter().any(|m| m.len() != s[1]) {
        return Err(Error::Shape(format!("masked_mse prediction {s:?}, target {:?}", target.shape())));
    }
    let count: usize = masks.iter().map(|m| m.iter().filter(|&&x| x).count()).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("no masked tokens".into()));
    }
    let weight = ndarray::Array3::from_shape_fn((s[0], s[1], 1), |(i, j, _)| masks[i][j] as u8 as f64).into_dyn();
    let tape = pred.tape();
    let err = (pred - tape.constant(target.clone())).square() * tape.constant(weight);
    Ok(err.sum().scale(1.0 / (count * s[2]) as f64))
}

struct Masked<'a> {
    obs: Vec<&'a StackedObservation>,
    masks: Vec<Vec<bool>>,
}

/// Encodes the visible tokens of `m.obs`, fills masked slots with the mask
/// token, decodes (cross-attending to `memory` when given) and maps every
/// token to patch predictions `(N, T, P)`.
fn reconstruct<'t>(
    ctx: &LossContext<'_, 't, '_>,
    c: &ObjectiveConfig,
    pre: &str,
    m: &Masked<'_>,
    games: &[&str],
    memory: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let b = ctx.online;
    let tape = b.tape();
    let n = m.obs.len();
    let x = EncoderStack::input(tape, &m.obs)?;
    let tokens = ctx.stack.spatial_tokens(b, ctx.stack.backbone(b, x), games);
    let ts = tokens.shape();
    let (t, dz) = (ts[1], ts[2]);
    let dq = ctx.stack.latent_dim();
    let visible: Vec<Vec<usize>> = m.masks.iter().map(|mk| (0..t).filter(|&j| !mk[j]).collect()).collect();
    let v = visible[0].len();
    if v == 0 || visible.iter().any(|vis| vis.len() != v) {
        return Err(Error::InvalidArgument("every sample needs the same positive number of visible tokens".into()));
    }
    let pos = sinusoidal_positions(t, dq);
    let rows: Vec<usize> = visible.iter().enumerate().flat_map(|(i, vis)| vis.iter().map(move |&j| i * t + j)).collect();
    let vis_pos = ndarray::Array3::from_shape_fn((n, v, dq), |(i, j, k)| pos[[visible[i][j], k]]).into_dyn();
    let mut h = ctx.stack.token_mlp(b, tokens.reshape(&[n * t, dz]).index_select(&rows).reshape(&[n, v, dz])) + tape.constant(vis_pos);
    h = encoder(b, c, pre, h);

    // Visible rows first, then the single mask-token row.
    let pool = Var::concat(&[h.reshape(&[n * v, dq]), b.var(&format!("{pre}.mask_token"))], 0);
    let mut order = Vec::with_capacity(n * t);
    for (i, mk) in m.masks.iter().enumerate() {
        let mut rank = 0;
        for &masked in mk {
            if masked {
                order.push(n * v);
            } else {
                order.push(i * v + rank);
                rank += 1;
            }
        }
    }
    let full_pos = pos.into_shape_with_order(vec![1, t, dq]).expect("position table");
    let mut d = pool.index_select(&order).reshape(&[n, t, dq]) + tape.constant(full_pos);
    for i in 0..c.decoder.layers {
        d = block(b, &format!("{pre}.dec.b{i}"), d, memory, c.decoder.heads, None);
    }
    let token_games: Vec<&str> = games.iter().flat_map(|g| std::iter::repeat_n(*g, t)).collect();
    let out = ctx.stack.head(b, HEAD, d.reshape(&[n * t, dq]), &token_games);
    let p = out.shape()[1];
    Ok(out.reshape(&[n, t, p]))
}

fn encoder<'t>(b: &Binding<'t, '_>, c: &ObjectiveConfig, pre: &str, mut h: Var<'t>) -> Var<'t> {
    for i in 0..c.encoder.layers {
        h = block(b, &format!("{pre}.enc.b{i}"), h, None, c.encoder.heads, None);
    }
    h
}

fn targets(stack: &EncoderStack, obs: &[&StackedObservation]) -> Result<Array> {
    let [_, h, w] = stack.config.feature_shape();
    let per: Vec<Array> = obs.iter().map(|o| patch_targets(o, (h, w))).collect::<Result<_>>()?;
    let views: Vec<_> = per.iter().map(|a| a.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn draw_masks(stack: &EncoderStack, ratio: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let [_, h, w] = stack.config.feature_shape();
    let count = mask_count(ratio, h * w);
    (0..n).map(|_| sample_mask(h * w, count, rng)).collect()
}

fn finish<'t>(loss: Var<'t>, masks: &[Vec<bool>]) -> LossTerms<'t> {
    let per_sample = masks.first().map_or(0, |m| m.iter().filter(|&&x| x).count());
    LossTerms { loss, diagnostics: BTreeMap::from([("masked_tokens".to_string(), per_sample as f64)]) }
}

/// MAE with explicit masks.
pub(super) fn mae_with_masks<'t>(
    ctx: &LossContext<'_, 't, '_>,
    c: &ObjectiveConfig,
    obs: Vec<&StackedObservation>,
    games: &[&str],
    masks: Vec<Vec<bool>>,
) -> Result<LossTerms<'t>> {
    ctx.stack.check_games(games)?;
    let target = targets(ctx.stack, &obs)?;
    let m = Masked { obs, masks };
    let pred = reconstruct(ctx, c, prefix(false), &m, games, None)?;
    Ok(finish(masked_mse(pred, &target, &m.masks)?, &m.masks))
}

pub(super) fn mae<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView], rng: &mut ChaCha8Rng) -> Result<LossTerms<'t>> {
    let obs = views
        .iter()
        .map(|v| match &v.payload {
            ViewPayload::Image { obs } => Ok(obs),
            _ => Err(Error::InvalidArgument("MAE needs image views".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = draw_masks(ctx.stack, c.mask_ratio, obs.len(), rng);
    mae_with_masks(ctx, c, obs, &games_of(views), masks)
}

/// SiamMAE with explicit masks on the future frames.
pub(super) fn siam_mae_with_masks<'t>(
    ctx: &LossContext<'_, 't, '_>,
    c: &ObjectiveConfig,
    current: Vec<&StackedObservation>,
    future: Vec<&StackedObservation>,
    games: &[&str],
    masks: Vec<Vec<bool>>,
) -> Result<LossTerms<'t>> {
    ctx.stack.check_games(games)?;
    let pre = prefix(true);
    let b = ctx.online;
    let tape = b.tape();
    let x = EncoderStack::input(tape, &current)?;
    let tokens = ctx.stack.neck_tokens(b, ctx.stack.backbone(b, x), games);
    let s = tokens.shape();
    let pos = sinusoidal_positions(s[1], s[2]);
    let full_pos = pos.into_shape_with_order(vec![1, s[1], s[2]]).expect("position table");
    let memory = encoder(b, c, pre, tokens + tape.constant(full_pos));
    let target = targets(ctx.stack, &future)?;
    let m = Masked { obs: future, masks };
    let pred = reconstruct(ctx, c, pre, &m, games, Some(memory))?;
    Ok(finish(masked_mse(pred, &target, &m.masks)?, &m.masks))
}

pub(super) fn siam_mae<'t>(
    ctx: &LossContext<'_, 't, '_>,
    c: &ObjectiveConfig,
    views: &[SampleView],
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms<'t>> {
    let mut current = Vec::new();
    let mut future = Vec::new();
    for v in views {
        let ViewPayload::Video { anchor, future: f, .. } = &v.payload else {
            return Err(Error::InvalidArgument("SiamMAE needs video views".into()));
        };
        current.push(anchor);
        future.push(f);
    }
    let masks = draw_masks(ctx.stack, c.mask_ratio, views.len(), rng);
    siam_mae_with_masks(ctx, c, current, future, &games_of(views), masks)
}
