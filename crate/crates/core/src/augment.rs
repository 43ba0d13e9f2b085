//! Random shift and intensity jitter on stacked observations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{StackedObservation, FRAME_LEN, FRAME_SIDE, STACK_DEPTH};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub shift_pad: usize,
    pub intensity_scale: f64,
    pub shift: bool,
    pub intensity: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { shift_pad: 4, intensity_scale: 0.05, shift: true, intensity: true }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self { shift: false, intensity: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_scale >= 0.0) || !self.intensity_scale.is_finite() {
            return Err(Error::config("augment.intensity_scale", "must be a finite value ≥ 0"));
        }
        Ok(())
    }
}

/// One applied augmentation, recorded in application order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    Shift { dy: usize, dx: usize },
    Intensity { eps: f64 },
}

/// Crops the 84×84 window at `(dy, dx)` from the replicate-padded stack.
pub fn shift_with_offset(obs: &StackedObservation, pad: usize, dy: usize, dx: usize) -> StackedObservation {
    assert!(dy <= 2 * pad && dx <= 2 * pad, "offset outside padded frame");
    let mut out = StackedObservation::constant(0.0);
    let last = FRAME_SIDE as isize - 1;
    for f in 0..STACK_DEPTH {
        let src = obs.frame(f);
        let dst = &mut out.values_mut()[f * FRAME_LEN..(f + 1) * FRAME_LEN];
        for r in 0..FRAME_SIDE {
            let sr = (r as isize + dy as isize - pad as isize).clamp(0, last) as usize;
            for c in 0..FRAME_SIDE {
                let sc = (c as isize + dx as isize - pad as isize).clamp(0, last) as usize;
                dst[r * FRAME_SIDE + c] = src[sr * FRAME_SIDE + sc];
            }
        }
    }
    out
}

/// Shift with an offset drawn uniformly from `{0..2·pad}²`, shared by all frames.
pub fn random_shift(obs: &StackedObservation, pad: usize, rng: &mut ChaCha8Rng) -> (StackedObservation, (usize, usize)) {
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    (shift_with_offset(obs, pad, dy, dx), (dy, dx))
}

/// Multiplies every pixel by `1 + scale·eps`, clamped to `[0, 255]`.
pub fn intensity_with_eps(obs: &StackedObservation, scale: f64, eps: f64) -> StackedObservation {
    let gain = (1.0 + scale * eps) as f32;
    let mut out = obs.clone();
    for v in out.values_mut() {
        *v = (*v * gain).clamp(0.0, 255.0);
    }
    out
}

/// Intensity jitter with one standard-normal draw per stack, clipped to `[-2, 2]`.
pub fn intensity(obs: &StackedObservation, scale: f64, rng: &mut ChaCha8Rng) -> (StackedObservation, f64) {
    let eps: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
    (intensity_with_eps(obs, scale, eps), eps)
}

/// Shift, then intensity, each when enabled.
pub fn augment(obs: &StackedObservation, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> (StackedObservation, Vec<AugmentOp>) {
    let mut ops = Vec::with_capacity(2);
    let mut cur = obs.clone();
    if spec.shift {
        let (o, (dy, dx)) = random_shift(&cur, spec.shift_pad, rng);
        cur = o;
        ops.push(AugmentOp::Shift { dy, dx });
    }
    if spec.intensity {
        let (o, eps) = intensity(&cur, spec.intensity_scale, rng);
        cur = o;
        ops.push(AugmentOp::Intensity { eps });
    }
    (cur, ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp() -> StackedObservation {
        let data = (0..STACK_DEPTH * FRAME_LEN).map(|i| ((i * 7) % 256) as f32).collect();
        StackedObservation::from_values(data).unwrap()
    }

    #[test]
    fn zero_pad_is_identity() {
        let obs = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_shift(&obs, 0, &mut rng).0, obs);
    }

    #[test]
    fn offsets_cover_all_81_origins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..3000 {
            seen.insert(random_shift(&ramp(), 4, &mut rng).1);
        }
        assert_eq!(seen.len(), 81);
        assert!(seen.iter().all(|&(y, x)| y <= 8 && x <= 8));
    }

    #[test]
    fn shift_moves_content_and_replicates_edges() {
        let obs = ramp();
        let s = shift_with_offset(&obs, 4, 8, 0);
        // dy = 8 moves the window down by 4 rows; dx = 0 pads on the left.
        assert_eq!(s.at(1, 10, 20), obs.at(1, 14, 16));
        assert_eq!(s.at(2, 83, 0), obs.at(2, 83, 0));
        assert_eq!(s.at(0, 0, 2), obs.at(0, 4, 0));
    }

    #[test]
    fn constant_image_is_shift_invariant() {
        let obs = StackedObservation::constant(77.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(random_shift(&obs, 4, &mut rng).0, obs);
        }
    }

    #[test]
    fn intensity_closed_form() {
        let obs = ramp();
        assert_eq!(intensity_with_eps(&obs, 0.0, 1.3), obs);
        assert_eq!(intensity_with_eps(&obs, 0.05, 0.0), obs);
        let j = intensity_with_eps(&obs, 0.05, 2.0);
        for (a, b) in obs.values().iter().zip(j.values()) {
            assert_eq!(*b, (a * 1.1f32).clamp(0.0, 255.0));
        }
    }

    #[test]
    fn pipeline_order_and_determinism() {
        let obs = ramp();
        let spec = AugmentSpec::default();
        let (a, ops) = augment(&obs, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        let (b, _) = augment(&obs, &spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(matches!(ops[..], [AugmentOp::Shift { .. }, AugmentOp::Intensity { .. }]));
        let (AugmentOp::Shift { dy, dx }, AugmentOp::Intensity { eps }) = (ops[0], ops[1]) else { panic!() };
        let manual = intensity_with_eps(&shift_with_offset(&obs, 4, dy, dx), 0.05, eps);
        assert_eq!(a, manual);
        assert_eq!(a.values().len(), obs.values().len());
        let (c, none) = augment(&obs, &AugmentSpec::disabled(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(none.is_empty());
        assert_eq!(c, obs);
    }
}
