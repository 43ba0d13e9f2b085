//! Central finite-difference check of objective gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LossContext, Objective};
use crate::data::SampleView;
use crate::model::EncoderStack;
use crate::nn::{Binding, ParamStore};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates to probe, spread round-robin over parameters with gradient.
    pub samples: usize,
    /// Differences below this are treated as agreement (both sides are
    /// numerically zero).
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, samples: 60, abs_floor: 1e-9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    /// `(parameter, index, analytic, numeric)` of failing coordinates.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

fn eval(objective: &Objective, stack: &EncoderStack, params: &ParamStore, mirror: Option<&ParamStore>, views: &[SampleView], seed: u64) -> Result<f64> {
    let tape = autograd::Tape::new();
    let online = Binding::frozen(&tape, params);
    let target = mirror.map(|m| Binding::frozen(&tape, m));
    let ctx = LossContext { stack, online: &online, target: target.as_ref() };
    Ok(objective.loss(&ctx, views, &mut ChaCha8Rng::seed_from_u64(seed))?.loss.item())
}

fn set(params: &mut ParamStore, name: &str, idx: usize, v: f64) {
    params.get_mut(name).expect("bound parameter").value.as_slice_memory_order_mut().expect("contiguous parameter")[idx] = v;
}

/// Compares backpropagated gradients of `objective` on `views` against
/// central differences. Masking randomness is re-seeded identically for
/// every evaluation.
pub fn gradient_check(
    objective: &Objective,
    stack: &EncoderStack,
    mirror: Option<&ParamStore>,
    views: &[SampleView],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let loss_seed = cfg.seed ^ 0x5eed;
    let grads = {
        let tape = autograd::Tape::new();
        let online = Binding::new(&tape, &stack.params);
        let target = mirror.map(|m| Binding::frozen(&tape, m));
        let ctx = LossContext { stack, online: &online, target: target.as_ref() };
        let loss = objective.loss(&ctx, views, &mut ChaCha8Rng::seed_from_u64(loss_seed))?.loss;
        let mut g = tape.backward(loss);
        online.gradients(&mut g)
    };
    let names: Vec<&String> = grads.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = stack.params.clone();
    let mut report = GradCheckReport { checked: 0, passed: 0, failures: Vec::new() };
    for i in 0..cfg.samples.min(grads.values().map(|g| g.len()).sum()) {
        let name = names[i % names.len()];
        let g = &grads[name];
        let idx = rng.random_range(0..g.len());
        let analytic = g.as_slice_memory_order().expect("contiguous gradient")[idx];
        let original = params.value(name).as_slice_memory_order().expect("contiguous parameter")[idx];
        let mut at = |v: f64| -> Result<f64> {
            set(&mut params, name, idx, v);
            eval(objective, stack, &params, mirror, views, loss_seed)
        };
        let plus = at(original + cfg.step)?;
        let minus = at(original - cfg.step)?;
        set(&mut params, name, idx, original);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let diff = (analytic - numeric).abs();
        let ok = diff <= cfg.abs_floor || diff / analytic.abs().max(numeric.abs()) < cfg.tolerance;
        report.checked += 1;
        if ok {
            report.passed += 1;
        } else {
            report.failures.push((name.clone(), idx, analytic, numeric));
        }
    }
    Ok(report)
}
