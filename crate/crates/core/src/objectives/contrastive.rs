use std::collections::BTreeMap;

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{games_of, LossContext, LossTerms, ObjectiveConfig, ObjectiveKind};
use crate::data::{SampleView, StackedObservation, ViewPayload, ACTION_COUNT};
use crate::model::EncoderStack;
use crate::nn::{fan_in_uniform, linear, linear_params};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Softmax cross-entropy of each row of `logits` against the column
/// `positive[row]`, reduced over rows. Returns the loss and the fraction of
/// rows whose positive has the largest logit.
pub fn nce_from_logits<'t>(logits: Var<'t>, positive: &[usize], reduction: Reduction) -> (Var<'t>, f64) {
    let s = logits.shape();
    let (rows, cols) = (s[0], s[1]);
    let pick = Array::from_shape_fn(vec![rows, cols], |d| if d[1] == positive[d[0]] { 1.0 } else { 0.0 });
    let tape = logits.tape();
    let pos = (logits * tape.constant(pick)).sum_axis(1, false);
    let per_row = logits.logsumexp(1, false) - pos;
    let loss = match reduction {
        Reduction::Mean => per_row.mean(),
        Reduction::Sum => per_row.sum(),
    };
    let lv = logits.value();
    let hits = (0..rows)
        .filter(|&r| {
            let row = lv.index_axis(ndarray::Axis(0), r);
            row.iter().all(|&v| v <= row[positive[r]])
        })
        .count();
    (loss, hits as f64 / rows as f64)
}

/// InfoNCE with dot-product similarity: anchor `y[b]` against positives
/// `pos[b']` for all `b'`, plus its own hard negative `hard[b]` when given.
pub fn info_nce<'t>(y: Var<'t>, pos: Var<'t>, hard: Option<Var<'t>>, reduction: Reduction) -> Result<(Var<'t>, f64)> {
    let (ys, ps) = (y.shape(), pos.shape());
    if ys.len() != 2 || ys != ps || ys[0] == 0 {
        return Err(Error::Shape(format!("info_nce anchors {ys:?} vs positives {ps:?}")));
    }
    if y.value().iter().chain(pos.value().iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive embedding".into()));
    }
    let b = ys[0];
    let mut logits = y.matmul(pos.transpose_last());
    if let Some(n) = hard {
        if n.shape() != ys {
            return Err(Error::Shape(format!("hard negatives {:?} vs anchors {ys:?}", n.shape())));
        }
        logits = Var::concat(&[logits, (y * n).sum_axis(1, true)], 1);
    }
    Ok(nce_from_logits(logits, &(0..b).collect::<Vec<_>>(), reduction))
}

/// Contrastive loss over `B·K` predictions: prediction `y[b, k]` against
/// targets `q[b', k']` for every `b'`, `k'`; the positive is `q[b, k]`.
pub fn spr_info_nce<'t>(y: Var<'t>, q: Var<'t>, reduction: Reduction) -> Result<(Var<'t>, f64)> {
    let (ys, qs) = (y.shape(), q.shape());
    if ys.len() != 3 || ys != qs {
        return Err(Error::Shape(format!("spr predictions {ys:?} vs targets {qs:?}")));
    }
    let (b, k, d) = (ys[0], ys[1], ys[2]);
    let yf = y.reshape(&[b * k, d]);
    let qf = q.reshape(&[b * k, d]);
    info_nce(yf, qf, None, reduction)
}

fn video_parts(views: &[SampleView]) -> Result<(Vec<&StackedObservation>, Vec<&StackedObservation>, Vec<Option<&StackedObservation>>)> {
    let mut a = Vec::new();
    let mut f = Vec::new();
    let mut n = Vec::new();
    for v in views {
        let ViewPayload::Video { anchor, future, far, .. } = &v.payload else {
            return Err(Error::InvalidArgument("contrastive objective needs video views".into()));
        };
        a.push(anchor);
        f.push(future);
        n.push(far.as_ref());
    }
    Ok((a, f, n))
}

/// CURL, ATC and R3M: online anchor through the predictor head against
/// momentum-encoded futures (and far-future hard negatives for R3M).
pub(super) fn temporal<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let target = ctx.target(c.kind)?;
    let games = games_of(views);
    let (anchors, futures, fars) = video_parts(views)?;
    let q = ctx.encode(ctx.online, &anchors, &games)?;
    let y = ctx.stack.head(ctx.online, "pred", q, &games);
    let q_pos = ctx.encode(target, &futures, &games)?;
    let hard = if c.kind == ObjectiveKind::R3m {
        let far: Vec<&StackedObservation> =
            fars.into_iter().collect::<Option<_>>().ok_or_else(|| Error::InvalidArgument("R3M needs far-future frames".into()))?;
        Some(ctx.encode(target, &far, &games)?)
    } else {
        None
    };
    let (loss, acc) = info_nce(y, q_pos, hard, c.nce_reduction)?;
    Ok(LossTerms { loss, diagnostics: BTreeMap::from([("accuracy".to_string(), acc)]) })
}

pub(super) fn declare_spr(stack: &mut EncoderStack, rng: &mut ChaCha8Rng) -> Result<()> {
    let dq = stack.latent_dim();
    if !stack.params.contains("aux.spr.gru.wi.w") {
        linear_params(&mut stack.params, "aux.spr.gru.wi", dq, 3 * dq, rng);
        stack.params.insert("aux.spr.gru.wh.w", fan_in_uniform(&[dq, 3 * dq], dq, rng));
        stack.params.insert("aux.spr.gru.wh.b", fan_in_uniform(&[3 * dq], dq, rng));
    }
    stack.add_head("spr_act", ACTION_COUNT, dq, rng)?;
    stack.add_head("spr", dq, dq, rng)
}

/// One gated recurrent step.
fn gru_step<'t>(b: &crate::nn::Binding<'t, '_>, x: Var<'t>, h: Var<'t>) -> Var<'t> {
    let hd = h.shape()[1];
    let gi = linear(b, "aux.spr.gru.wi", x);
    let gh = linear(b, "aux.spr.gru.wh", h);
    let r = (gi.narrow(1, 0, hd) + gh.narrow(1, 0, hd)).sigmoid();
    let z = (gi.narrow(1, hd, hd) + gh.narrow(1, hd, hd)).sigmoid();
    let n = (gi.narrow(1, 2 * hd, hd) + r * gh.narrow(1, 2 * hd, hd)).tanh();
    n + z * (h - n)
}

pub(super) fn one_hot(actions: &[u8]) -> Array {
    Array::from_shape_fn(vec![actions.len(), ACTION_COUNT], |d| if d[1] == actions[d[0]] as usize { 1.0 } else { 0.0 })
}

/// SPR: roll the online latent forward with a recurrent cell fed by
/// game-wise action embeddings, and contrast each prediction against the
/// momentum latents of all future steps in the batch.
pub(super) fn spr<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let target = ctx.target(c.kind)?;
    let games = games_of(views);
    let k = c.horizon;
    let mut first = Vec::new();
    let mut futures = Vec::new();
    let mut future_games = Vec::new();
    let mut actions: Vec<Vec<u8>> = vec![Vec::new(); k];
    for v in views {
        let ViewPayload::Demo { obs, actions: acts } = &v.payload else {
            return Err(Error::InvalidArgument("SPR needs demonstration views".into()));
        };
        if obs.len() < k + 1 || acts.len() < k {
            return Err(Error::Shape(format!("SPR window of {} steps, need {}", obs.len(), k + 1)));
        }
        first.push(&obs[0]);
        for (i, o) in obs[1..=k].iter().enumerate() {
            futures.push(o);
            future_games.push(v.game.as_str());
            actions[i].push(acts[i]);
        }
    }
    let bsz = views.len();
    let dq = ctx.stack.latent_dim();
    let tape = ctx.online.tape();
    let mut h = ctx.encode(ctx.online, &first, &games)?;
    let mut preds = Vec::with_capacity(k);
    for acts in &actions {
        let x = ctx.stack.head(ctx.online, "spr_act", tape.constant(one_hot(acts)), &games);
        h = gru_step(ctx.online, x, h);
        preds.push(ctx.stack.head(ctx.online, "spr", h, &games).reshape(&[bsz, 1, dq]));
    }
    let y = Var::concat(&preds, 1);
    let q = ctx.encode(target, &futures, &future_games)?.reshape(&[bsz, k, dq]);
    let (loss, acc) = spr_info_nce(y, q, c.nce_reduction)?;
    Ok(LossTerms { loss, diagnostics: BTreeMap::from([("accuracy".to_string(), acc)]) })
}
