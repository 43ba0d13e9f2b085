use std::collections::BTreeMap;

use autograd::{Array, Var};
use rand_chacha::ChaCha8Rng;

use super::{fan_in_uniform, Binding, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

pub fn linear_params(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{prefix}.w"), fan_in_uniform(&[input, output], input, rng));
    store.insert(format!("{prefix}.b"), fan_in_uniform(&[output], input, rng));
}

/// Affine map over the last axis of `x`.
pub fn linear<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    matmul_last(x, w) + bias
}

/// `x (…, in) · w (in, out)`, flattening leading axes.
pub fn matmul_last<'t>(x: Var<'t>, w: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    if shape.len() == 2 {
        return x.matmul(w);
    }
    let inner = *shape.last().expect("rank ≥ 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let out = w.shape()[1];
    let mut new_shape = shape[..shape.len() - 1].to_vec();
    new_shape.push(out);
    x.reshape(&[rows, inner]).matmul(w).reshape(&new_shape)
}

pub fn conv_params(store: &mut ParamStore, prefix: &str, input: usize, output: usize, kernel: usize, bias: bool, rng: &mut ChaCha8Rng) {
    let fan_in = input * kernel * kernel;
    store.insert(format!("{prefix}.w"), fan_in_uniform(&[output, input, kernel, kernel], fan_in, rng));
    if bias {
        store.insert(format!("{prefix}.b"), fan_in_uniform(&[output], fan_in, rng));
    }
}

pub fn conv<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let y = x.conv2d(b.var(&format!("{prefix}.w")), stride, pad);
    let bias_name = format!("{prefix}.b");
    if b.store().contains(&bias_name) {
        let c = y.shape()[1];
        y + b.var(&bias_name).reshape(&[1, c, 1, 1])
    } else {
        y
    }
}

pub fn affine_norm_params(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Array::ones(vec![channels]));
    store.insert(format!("{prefix}.beta"), Array::zeros(vec![channels]));
}

/// Channels per normalization group.
pub const GROUP_WIDTH: usize = 16;

/// Largest group count not exceeding `channels / GROUP_WIDTH` that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    let mut g = (channels / GROUP_WIDTH).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

/// Standardizes the last axis of `x`.
pub fn standardize_last<'t>(x: Var<'t>) -> Var<'t> {
    let ax = x.shape().len() - 1;
    let centered = x - x.mean_axis(ax, true);
    let var = centered.square().mean_axis(ax, true);
    centered / var.add_scalar(NORM_EPS).sqrt()
}

/// Group normalization of an NCHW tensor with learned per-channel affine.
pub fn group_norm<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let g = group_count(c);
    let y = standardize_last(x.reshape(&[n, g, (c / g) * h * w])).reshape(&[n, c, h, w]);
    let gamma = b.var(&format!("{prefix}.gamma")).reshape(&[1, c, 1, 1]);
    let beta = b.var(&format!("{prefix}.beta")).reshape(&[1, c, 1, 1]);
    y * gamma + beta
}

pub fn layer_norm<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    standardize_last(x) * b.var(&format!("{prefix}.gamma")) + b.var(&format!("{prefix}.beta"))
}

/// Per-sample standardization over the last (channel) axis, no affine.
pub fn instance_norm<'t>(x: Var<'t>) -> Var<'t> {
    standardize_last(x)
}

/// Tanh approximation of GELU.
pub fn gelu<'t>(x: Var<'t>) -> Var<'t> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + x.square() * x.scale(0.044715)).scale(c).tanh();
    x.scale(0.5) * inner.add_scalar(1.0)
}

pub fn mlp2_params(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) {
    linear_params(store, &format!("{prefix}.fc1"), input, hidden, rng);
    linear_params(store, &format!("{prefix}.fc2"), hidden, output, rng);
}

/// Two linear layers with a ReLU between.
pub fn mlp2<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    mlp2_with(b, prefix, x, Activation::Relu)
}

pub fn mlp2_with<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>, act: Activation) -> Var<'t> {
    linear(b, &format!("{prefix}.fc2"), act.apply(linear(b, &format!("{prefix}.fc1"), x)))
}

/// Hidden nonlinearity of the encoder stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => gelu(x),
        }
    }
}

pub fn per_game_linear_params(
    store: &mut ParamStore,
    prefix: &str,
    games: &[String],
    input: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) {
    for g in games {
        linear_params(store, &format!("{prefix}.{g}"), input, output, rng);
    }
}

/// Row groups of a batch keyed by game, in game-name order.
pub fn group_rows<'a>(games: &[&'a str]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in games.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    groups
}

/// Applies a per-row function to each game's rows and reassembles the batch
/// in its original order. `x` is indexed by sample along axis 0.
pub fn per_game<'t>(x: Var<'t>, games: &[&str], mut f: impl FnMut(&str, Var<'t>) -> Var<'t>) -> Var<'t> {
    assert_eq!(x.shape()[0], games.len(), "one game per sample");
    let groups = group_rows(games);
    if groups.len() == 1 {
        let (g, _) = groups.into_iter().next().unwrap();
        return f(g, x);
    }
    let mut outs = Vec::with_capacity(groups.len());
    let mut order = Vec::with_capacity(games.len());
    for (g, rows) in &groups {
        outs.push(f(g, x.index_select(rows)));
        order.extend_from_slice(rows);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    Var::concat(&outs, 0).index_select(&inverse)
}

/// Game-specific affine map over the last axis.
pub fn per_game_linear<'t>(b: &Binding<'t, '_>, prefix: &str, x: Var<'t>, games: &[&str]) -> Var<'t> {
    per_game(x, games, |g, xs| linear(b, &format!("{prefix}.{g}"), xs))
}

/// Rows of per-game tables, gathered per sample: table `prefix.<game>` has
/// shape `(rows, dim)`; returns `(N, dim)` with row `idx[i]` of sample `i`'s game.
pub fn per_game_embedding<'t>(b: &Binding<'t, '_>, prefix: &str, games: &[&str], idx: &[usize]) -> Var<'t> {
    let groups = group_rows(games);
    let mut tables = Vec::new();
    let mut offsets = BTreeMap::new();
    let mut offset = 0;
    for g in groups.keys() {
        let t = b.var(&format!("{prefix}.{g}"));
        offsets.insert(*g, offset);
        offset += t.shape()[0];
        tables.push(t);
    }
    let stacked = if tables.len() == 1 { tables[0] } else { Var::concat(&tables, 0) };
    let rows: Vec<usize> = games.iter().zip(idx).map(|(g, &i)| offsets[g] + i).collect();
    stacked.index_select(&rows)
}
