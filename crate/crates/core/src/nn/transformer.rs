//! Pre-norm transformer blocks with optional cross-attention.

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{affine_norm_params, gelu, layer_norm, linear, linear_params};
use super::{Binding, ParamStore};

/// Additive score for disallowed attention pairs; small enough that its
/// softmax weight underflows to exactly zero.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn attention_params(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    for p in ["q", "k", "v", "o"] {
        linear_params(store, &format!("{prefix}.{p}"), dim, dim, rng);
    }
}

fn split_heads<'t>(x: Var<'t>, heads: usize) -> Var<'t> {
    let s = x.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    x.reshape(&[n, l, heads, d / heads]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, l, d / heads])
}

/// Multi-head scaled dot-product attention from `xq (N, Lq, D)` onto
/// `xkv (N, Lk, D)`. `mask` is added to the `(N, H, Lq, Lk)` scores.
pub fn attention<'t>(b: &Binding<'t, '_>, prefix: &str, xq: Var<'t>, xkv: Var<'t>, heads: usize, mask: Option<Var<'t>>) -> Var<'t> {
    let sq = xq.shape();
    let (n, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = xkv.shape()[1];
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let q = split_heads(linear(b, &format!("{prefix}.q"), xq), heads);
    let k = split_heads(linear(b, &format!("{prefix}.k"), xkv), heads);
    let v = split_heads(linear(b, &format!("{prefix}.v"), xkv), heads);
    let mut scores = q.bmm(k.transpose_last()).scale(1.0 / ((d / heads) as f64).sqrt()).reshape(&[n, heads, lq, lk]);
    if let Some(m) = mask {
        scores = scores + m;
    }
    let attn = scores.softmax(3).reshape(&[n * heads, lq, lk]);
    let out = attn.bmm(v).reshape(&[n, heads, lq, d / heads]).permute(&[0, 2, 1, 3]).reshape(&[n, lq, d]);
    linear(b, &format!("{prefix}.o"), out)
}

pub fn block_params(store: &mut ParamStore, prefix: &str, dim: usize, mlp_ratio: usize, cross: bool, rng: &mut ChaCha8Rng) {
    affine_norm_params(store, &format!("{prefix}.ln1"), dim);
    attention_params(store, &format!("{prefix}.attn"), dim, rng);
    if cross {
        affine_norm_params(store, &format!("{prefix}.lnc"), dim);
        attention_params(store, &format!("{prefix}.cross"), dim, rng);
    }
    affine_norm_params(store, &format!("{prefix}.ln2"), dim);
    linear_params(store, &format!("{prefix}.fc1"), dim, dim * mlp_ratio, rng);
    linear_params(store, &format!("{prefix}.fc2"), dim * mlp_ratio, dim, rng);
}

/// One pre-norm block: self-attention, optional cross-attention onto
/// `memory`, then a GELU MLP, each with a residual connection.
pub fn block<'t>(
    b: &Binding<'t, '_>,
    prefix: &str,
    x: Var<'t>,
    memory: Option<Var<'t>>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Var<'t> {
    let h = layer_norm(b, &format!("{prefix}.ln1"), x);
    let mut x = x + attention(b, &format!("{prefix}.attn"), h, h, heads, mask);
    if let Some(mem) = memory {
        let h = layer_norm(b, &format!("{prefix}.lnc"), x);
        x = x + attention(b, &format!("{prefix}.cross"), h, mem, heads, None);
    }
    let h = layer_norm(b, &format!("{prefix}.ln2"), x);
    x + linear(b, &format!("{prefix}.fc2"), gelu(linear(b, &format!("{prefix}.fc1"), h)))
}

/// `(L, L)` additive mask allowing position `i` to see `j ≤ i`.
pub fn causal_mask(len: usize) -> Array {
    Array::from_shape_fn(vec![len, len], |d| if d[1] > d[0] { MASKED } else { 0.0 })
}

/// Fixed sine/cosine position table of shape `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array {
    Array::from_shape_fn(vec![len, dim], |d| {
        let (pos, i) = (d[0] as f64, d[1]);
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() }
    })
}
