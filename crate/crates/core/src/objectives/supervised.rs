use std::collections::BTreeMap;

use autograd::Var;

use super::{cross_entropy, games_of, LossContext, LossTerms};
use crate::data::{SampleView, StackedObservation, ViewPayload};
use crate::{Error, Result};

fn demo_parts(views: &[SampleView], steps: usize) -> Result<(Vec<Vec<&StackedObservation>>, Vec<usize>)> {
    let mut obs = vec![Vec::with_capacity(views.len()); steps];
    let mut actions = Vec::with_capacity(views.len());
    for v in views {
        let ViewPayload::Demo { obs: o, actions: a } = &v.payload else {
            return Err(Error::InvalidArgument("expected demonstration views".into()));
        };
        if o.len() < steps || a.is_empty() {
            return Err(Error::Shape(format!("demonstration of {} steps, need {steps}", o.len())));
        }
        for (i, slot) in obs.iter_mut().enumerate() {
            slot.push(&o[i]);
        }
        actions.push(a[0] as usize);
    }
    Ok((obs, actions))
}

fn terms(loss: Var<'_>, acc: f64) -> LossTerms<'_> {
    LossTerms { loss, diagnostics: BTreeMap::from([("accuracy".to_string(), acc)]) }
}

/// Behavior cloning: policy head logits on `q_t` against `a_t`.
pub(super) fn bc<'t>(ctx: &LossContext<'_, 't, '_>, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let games = games_of(views);
    let (obs, actions) = demo_parts(views, 1)?;
    let q = ctx.encode(ctx.online, &obs[0], &games)?;
    let (loss, acc) = cross_entropy(ctx.stack.head(ctx.online, "policy", q, &games), &actions, None)?;
    Ok(terms(loss, acc))
}

/// Inverse dynamics: `[q_t, q_{t+1}]` through the idm head against `a_t`.
pub(super) fn idm<'t>(ctx: &LossContext<'_, 't, '_>, views: &[SampleView]) -> Result<LossTerms<'t>> {
    let games = games_of(views);
    let (obs, actions) = demo_parts(views, 2)?;
    let n = views.len();
    // Both steps share one forward pass.
    let both: Vec<&StackedObservation> = obs[0].iter().chain(obs[1].iter()).copied().collect();
    let both_games: Vec<&str> = games.iter().chain(games.iter()).copied().collect();
    let q = ctx.encode(ctx.online, &both, &both_games)?;
    let pair = Var::concat(&[q.narrow(0, 0, n), q.narrow(0, n, n)], 1);
    let (loss, acc) = cross_entropy(ctx.stack.head(ctx.online, "idm", pair, &games), &actions, None)?;
    Ok(terms(loss, acc))
}
