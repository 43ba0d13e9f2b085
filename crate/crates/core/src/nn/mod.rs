//! Named parameters, their binding onto an autograd tape, and layers.

mod layers;
mod transformer;

use std::cell::RefCell;
use std::collections::BTreeMap;

use autograd::{Array, Gradients, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use layers::*;
pub use transformer::{attention, attention_params, block, block_params, causal_mask, sinusoidal_positions, TransformerConfig, MASKED};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub trainable: bool,
}

/// Flat, name-ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), Param { value, trainable: true });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Array {
        &self.params.get(name).unwrap_or_else(|| panic!("parameter `{name}` not declared")).value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copies of every parameter whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { params }
    }

    /// Overwrites or adds every entry of `other`.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Total scalar count under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, p)| p.value.len()).sum()
    }

    /// Digest of names, shapes and exact bit patterns under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array::from_shape_simple_fn(shape.to_vec(), || rng.random_range(-bound..bound))
}

/// Lazily places store parameters on a tape. Trainable parameters become
/// gradient-carrying leaves unless the binding is frozen.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    frozen: bool,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, frozen: false, vars: RefCell::new(BTreeMap::new()) }
    }

    /// Every parameter enters as a constant.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { frozen: true, ..Self::new(tape, store) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let p = self.store.get(name).unwrap_or_else(|| panic!("parameter `{name}` not declared"));
        let v = if p.trainable && !self.frozen { self.tape.param(p.value.clone()) } else { self.tape.constant(p.value.clone()) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound, gradient-carrying parameter that received one.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Array> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binding_respects_trainable_flag() {
        let mut store = ParamStore::new();
        store.insert("a.w", Array::from_elem(vec![2], 1.0));
        store.insert("b.w", Array::from_elem(vec![2], 2.0));
        store.set_trainable("a.", false);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store);
        let loss = (b.var("a.w") * b.var("b.w")).sum();
        let mut g = tape.backward(loss);
        let grads = b.gradients(&mut g);
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["b.w"]);
        assert_eq!(grads["b.w"].as_slice().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.insert("x", fan_in_uniform(&[3, 3], 3, &mut rng));
        let f = store.fingerprint("");
        store.get_mut("x").unwrap().value[[0, 0]] += 1e-15;
        assert_ne!(f, store.fingerprint(""));
        assert!(store.value("x").iter().all(|v| v.abs() < 1.0 / 3f64.sqrt()));
    }
}
