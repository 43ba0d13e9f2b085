//! Conservative Q-learning on logged transitions, scalar and categorical.

use std::collections::BTreeMap;

use autograd::{Array, Var};

use super::{games_of, LossContext, LossTerms, ObjectiveConfig};
use crate::data::{clip_reward, SampleView, StackedObservation, ViewPayload, ACTION_COUNT};
use crate::{Error, Result};

/// `atoms` evenly spaced values from `v_min` to `v_max` inclusive.
pub fn support(v_min: f64, v_max: f64, atoms: usize) -> Vec<f64> {
    let dz = (v_max - v_min) / (atoms - 1) as f64;
    (0..atoms).map(|i| v_min + dz * i as f64).collect()
}

/// Projects the distribution `probs` over `z` shifted to `r + discount·z`
/// back onto `z`, splitting each atom's mass linearly between its two
/// nearest support points. Values outside the support are clamped to it.
pub fn categorical_projection(probs: &[f64], reward: f64, discount: f64, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let (lo, hi) = (z[0], z[n - 1]);
    let dz = (hi - lo) / (n - 1) as f64;
    let mut out = vec![0.0; n];
    for (&p, &zj) in probs.iter().zip(z) {
        let b = ((reward + discount * zj).clamp(lo, hi) - lo) / dz;
        let l = b.floor();
        let u = b.ceil();
        let (li, ui) = ((l as usize).min(n - 1), (u as usize).min(n - 1));
        if li == ui {
            out[li] += p;
        } else {
            out[li] += p * (u - b);
            out[ui] += p * (b - l);
        }
    }
    out
}

struct Transitions<'a> {
    obs: Vec<&'a StackedObservation>,
    next: Vec<&'a StackedObservation>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    /// `γ·(1 − terminal)` per sample.
    discounts: Vec<f64>,
}

fn transitions<'a>(views: &'a [SampleView], gamma: f64) -> Result<Transitions<'a>> {
    let mut t = Transitions { obs: vec![], next: vec![], actions: vec![], rewards: vec![], discounts: vec![] };
    for v in views {
        let ViewPayload::Trajectory { obs, actions, rewards, terminals, .. } = &v.payload else {
            return Err(Error::InvalidArgument("CQL needs trajectory views".into()));
        };
        if obs.len() < 2 {
            return Err(Error::Shape("CQL needs (o_t, o_{t+1}) windows".into()));
        }
        t.obs.push(&obs[0]);
        t.next.push(&obs[1]);
        t.actions.push(actions[0] as usize);
        t.rewards.push(clip_reward(rewards[0] as f64));
        t.discounts.push(if terminals[0] { 0.0 } else { gamma });
    }
    Ok(t)
}

fn action_mask(actions: &[usize], trailing: &[usize]) -> Array {
    let mut shape = vec![actions.len(), ACTION_COUNT];
    shape.extend_from_slice(trailing);
    Array::from_shape_fn(shape, |d| (d[1] == actions[d[0]]) as u8 as f64)
}

fn finite(a: &Array, what: &str) -> Result<()> {
    match a.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(format!("{what} = {v}"))),
        None => Ok(()),
    }
}

/// `logsumexp_a Q(s, a) − Q(s, a_t)`, averaged over the batch.
pub fn cql_penalty<'t>(q: Var<'t>, actions: &[usize]) -> Var<'t> {
    let taken = (q * q.tape().constant(action_mask(actions, &[]))).sum_axis(1, false);
    (q.logsumexp(1, false) - taken).mean()
}

/// Squared TD error against the target network's greedy bootstrap, plus
/// the weighted conservative penalty.
pub(super) fn cql_mse<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let target = ctx.target(c.kind)?;
    let games = games_of(views);
    let tr = transitions(views, c.gamma)?;
    let q = ctx.stack.head(ctx.online, "q", ctx.encode(ctx.online, &tr.obs, &games)?, &games);
    let q_next = ctx.stack.head(target, "q", ctx.encode(target, &tr.next, &games)?, &games).value().clone();
    finite(&q.value(), "Q")?;
    finite(&q_next, "target Q")?;
    let y = Array::from_shape_fn(vec![tr.actions.len()], |d| {
        let row = q_next.index_axis(ndarray::Axis(0), d[0]);
        tr.rewards[d[0]] + tr.discounts[d[0]] * row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    let tape = q.tape();
    let taken = (q * tape.constant(action_mask(&tr.actions, &[]))).sum_axis(1, false);
    let td = (taken - tape.constant(y)).square().mean();
    let cql = cql_penalty(q, &tr.actions);
    let diagnostics = BTreeMap::from([
        ("td".to_string(), td.item()),
        ("cql".to_string(), cql.item()),
        ("q_mean".to_string(), q.value().mean().unwrap_or(0.0)),
    ]);
    Ok(LossTerms { loss: td + cql.scale(c.cql_alpha), diagnostics })
}

/// Categorical TD cross-entropy against the projected target distribution
/// of the target network's highest-mean action, plus the conservative
/// penalty on expected Q values.
pub(super) fn cql_distributional<'t>(ctx: &LossContext<'_, 't, '_>, c: &ObjectiveConfig, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let target = ctx.target(c.kind)?;
    let games = games_of(views);
    let tr = transitions(views, c.gamma)?;
    let n = tr.actions.len();
    let na = c.atoms;
    let z = support(c.v_min, c.v_max, na);
    let tape = ctx.online.tape();
    let z_var = tape.constant(Array::from_shape_vec(vec![1, 1, na], z.clone()).expect("support shape"));

    let logits = ctx.stack.head(ctx.online, "qd", ctx.encode(ctx.online, &tr.obs, &games)?, &games).reshape(&[n, ACTION_COUNT, na]);
    finite(&logits.value(), "distributional logits")?;
    let logp = logits.log_softmax(2);
    let q = (logp.exp() * z_var).sum_axis(2, false);

    let next_logits = ctx.stack.head(target, "qd", ctx.encode(target, &tr.next, &games)?, &games).reshape(&[n, ACTION_COUNT, na]);
    let next_p = next_logits.softmax(2).value().clone();
    finite(&next_p, "target distribution")?;
    let mut projected = Array::zeros(vec![n, na]);
    for i in 0..n {
        let dist = |a: usize| (0..na).map(|j| next_p[[i, a, j]]).collect::<Vec<_>>();
        let mean = |a: usize| dist(a).iter().zip(&z).map(|(p, v)| p * v).sum::<f64>();
        let best = (0..ACTION_COUNT).fold(0, |b, a| if mean(a) > mean(b) { a } else { b });
        for (j, m) in categorical_projection(&dist(best), tr.rewards[i], tr.discounts[i], &z).into_iter().enumerate() {
            projected[[i, j]] = m;
        }
    }

    let taken_logp = (logp * tape.constant(action_mask(&tr.actions, &[1]))).sum_axis(1, false);
    let ce = (taken_logp * tape.constant(projected)).sum().scale(-1.0 / n as f64);
    let cql = cql_penalty(q, &tr.actions);
    let diagnostics = BTreeMap::from([
        ("td".to_string(), ce.item()),
        ("cql".to_string(), cql.item()),
        ("q_mean".to_string(), q.value().mean().unwrap_or(0.0)),
    ]);
    Ok(LossTerms { loss: ce + cql.scale(c.cql_alpha), diagnostics })
}
