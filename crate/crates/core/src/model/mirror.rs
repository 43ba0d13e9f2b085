use crate::nn::ParamStore;
use crate::{Error, Result};

/// Shadow copy of the parameters under a set of name prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumMirror {
    pub prefixes: Vec<String>,
    pub shadow: ParamStore,
    /// Number of EMA updates applied so far.
    pub updates: u64,
}

impl MomentumMirror {
    pub fn new(online: &ParamStore, prefixes: &[&str]) -> Self {
        let mut shadow = online.subset(prefixes);
        for (_, p) in shadow.iter_mut() {
            p.trainable = false;
        }
        Self { prefixes: prefixes.iter().map(|s| s.to_string()).collect(), shadow, updates: 0 }
    }

    /// `shadow ← τ·shadow + (1−τ)·online` over every mirrored parameter.
    pub fn update(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        ema_update(&mut self.shadow, online, tau)?;
        self.updates += 1;
        Ok(())
    }
}

pub fn ema_update(shadow: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("τ = {tau} outside [0, 1]")));
    }
    for (name, s) in shadow.iter_mut() {
        let o = online.get(name).ok_or_else(|| Error::Shape(format!("mirrored parameter `{name}` missing online")))?;
        if o.value.shape() != s.value.shape() {
            return Err(Error::Shape(format!("`{name}`: shadow {:?} vs online {:?}", s.value.shape(), o.value.shape())));
        }
        s.value.zip_mut_with(&o.value, |a, &b| *a = tau * *a + (1.0 - tau) * b);
    }
    Ok(())
}

/// Linear momentum schedule from `start` at step 0 to `end` at `total`.
pub fn tau_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let f = (step.min(total)) as f64 / total as f64;
    start + (end - start) * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Array;
    use proptest::prelude::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("backbone.w", Array::from_elem(vec![3], v));
        s.insert("head.w", Array::from_elem(vec![2], v));
        s
    }

    #[test]
    fn endpoints() {
        let online = store(5.0);
        let mut m = MomentumMirror::new(&store(1.0), &["backbone."]);
        assert!(!m.shadow.contains("head.w"));
        m.update(&online, 1.0).unwrap();
        assert_eq!(m.shadow.value("backbone.w")[[0]], 1.0);
        m.update(&online, 0.0).unwrap();
        assert_eq!(m.shadow.value("backbone.w")[[0]], 5.0);
        assert_eq!(m.updates, 2);
    }

    #[test]
    fn closed_form_over_100_steps() {
        let (s0, v, tau) = (-2.0, 3.0, 0.97f64);
        let mut m = MomentumMirror::new(&store(s0), &["backbone."]);
        for _ in 0..100 {
            m.update(&store(v), tau).unwrap();
        }
        let expect = tau.powi(100) * s0 + (1.0 - tau.powi(100)) * v;
        assert!((m.shadow.value("backbone.w")[[1]] - expect).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut m = MomentumMirror::new(&store(0.0), &["backbone."]);
        let mut bad = ParamStore::new();
        bad.insert("backbone.w", Array::zeros(vec![4]));
        assert!(m.update(&bad, 0.5).is_err());
    }

    #[test]
    fn tau_schedule_endpoints() {
        assert_eq!(tau_at(0, 100, 0.99, 0.999), 0.99);
        assert!((tau_at(100, 100, 0.99, 0.999) - 0.999).abs() < 1e-15);
        assert!((tau_at(50, 100, 0.99, 0.999) - 0.9945).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tau_monotone(a in 0u64..1000, b in 0u64..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(tau_at(lo, 1000, 0.99, 0.999) <= tau_at(hi, 1000, 0.99, 0.999));
        }
    }
}
