use std::cell::RefCell;
use std::fmt;
use std::ops;
use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, s, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::conv::conv2d_backward;
use crate::{conv2d_forward, unbroadcast, Array};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Sum(usize, usize, bool),
    Mean(usize, usize, bool),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    IndexSelect(usize, Vec<usize>),
    LogSoftmax(usize, usize),
    Softmax(usize, usize),
    Conv2d { input: usize, weight: usize, stride: usize, pad: usize },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), value))
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, value: Array, op: Op) -> Var<'_> {
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Array, op: Op) -> Var<'_> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Reverse pass from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, root.tape), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[root.id] = Some(Array::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let op = &nodes[id].op;
            if let Op::Leaf = op {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Array { &nodes[i].value };
            let rq = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, gi: Array| {
                if !nodes[i].requires_grad {
                    return;
                }
                debug_assert_eq!(gi.shape(), nodes[i].value.shape(), "grad shape mismatch at node {i}");
                match &mut grads[i] {
                    Some(existing) => *existing += &gi,
                    slot @ None => *slot = Some(gi),
                }
            };
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rq(*a) {
                        acc(*a, unbroadcast(g.clone(), val(*a).shape()));
                    }
                    if rq(*b) {
                        acc(*b, unbroadcast(g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if rq(*a) {
                        acc(*a, unbroadcast(g.clone(), val(*a).shape()));
                    }
                    if rq(*b) {
                        acc(*b, unbroadcast(-g, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if rq(*a) {
                        acc(*a, unbroadcast(&g * val(*b), val(*a).shape()));
                    }
                    if rq(*b) {
                        acc(*b, unbroadcast(&g * val(*a), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if rq(*a) {
                        acc(*a, unbroadcast(&g / bv, val(*a).shape()));
                    }
                    if rq(*b) {
                        let gb = -(&g * val(*a)) / (bv * bv);
                        acc(*b, unbroadcast(gb, bv.shape()));
                    }
                }
                Op::Neg(a) => acc(*a, -g),
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g * &*nodes[id].value),
                Op::Log(a) => acc(*a, g / val(*a)),
                Op::Relu(a) => {
                    let mut gi = g;
                    gi.zip_mut_with(val(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(*a, gi)
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    acc(*a, g * &y.mapv(|t| 1.0 - t * t))
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    acc(*a, g * &y.mapv(|t| t * (1.0 - t)))
                }
                Op::Sqrt(a) => {
                    let y = &nodes[id].value;
                    acc(*a, g / &y.mapv(|t| 2.0 * t))
                }
                Op::Square(a) => acc(*a, g * &val(*a).mapv(|x| 2.0 * x)),
                Op::MatMul(a, b) => {
                    let g2 = g.into_dimensionality::<Ix2>().expect("matmul grad 2-D");
                    if rq(*a) {
                        let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                        acc(*a, g2.dot(&bv.t()).into_dyn());
                    }
                    if rq(*b) {
                        let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                        acc(*b, av.t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let g3 = g.into_dimensionality::<Ix3>().expect("bmm grad 3-D");
                    let av = val(*a).view().into_dimensionality::<Ix3>().unwrap();
                    let bv = val(*b).view().into_dimensionality::<Ix3>().unwrap();
                    if rq(*a) {
                        let mut ga = ndarray::Array3::<f64>::zeros(av.raw_dim());
                        for i in 0..g3.shape()[0] {
                            general_mat_mul(1.0, &g3.slice(s![i, .., ..]), &bv.slice(s![i, .., ..]).t(), 0.0, &mut ga.slice_mut(s![i, .., ..]));
                        }
                        acc(*a, ga.into_dyn());
                    }
                    if rq(*b) {
                        let mut gb = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                        for i in 0..g3.shape()[0] {
                            general_mat_mul(1.0, &av.slice(s![i, .., ..]).t(), &g3.slice(s![i, .., ..]), 0.0, &mut gb.slice_mut(s![i, .., ..]));
                        }
                        acc(*b, gb.into_dyn());
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).raw_dim();
                    acc(*a, g.as_standard_layout().into_owned().into_shape_with_order(shape).expect("reshape grad"))
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(*a, g.permuted_axes(inv).as_standard_layout().into_owned())
                }
                Op::Sum(a, axis, keepdim) | Op::Mean(a, axis, keepdim) => {
                    let shape = val(*a).shape().to_vec();
                    let mut gg = if *keepdim { g } else { g.insert_axis(Axis(*axis)) };
                    if let Op::Mean(..) = op {
                        gg /= shape[*axis] as f64;
                    }
                    acc(*a, gg.broadcast(IxDyn(&shape)).expect("sum broadcast").to_owned())
                }
                Op::SumAll(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, Array::from_elem(val(*a).raw_dim(), s))
                }
                Op::Concat(inputs, axis) => {
                    let mut start = 0;
                    for &i in inputs {
                        let len = val(i).shape()[*axis];
                        if rq(i) {
                            let piece = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                            acc(i, piece);
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let mut gi = Array::zeros(val(*a).raw_dim());
                    let len = g.shape()[*axis];
                    gi.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
                    acc(*a, gi)
                }
                Op::IndexSelect(a, idx) => {
                    let mut gi = Array::zeros(val(*a).raw_dim());
                    for (j, &i) in idx.iter().enumerate() {
                        let mut row = gi.index_axis_mut(Axis(0), i);
                        row += &g.index_axis(Axis(0), j);
                    }
                    acc(*a, gi)
                }
                Op::LogSoftmax(a, axis) => {
                    let y: &Array = &nodes[id].value;
                    let sm = y.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    acc(*a, &g - &(sm * &gsum))
                }
                Op::Softmax(a, axis) => {
                    let y: &Array = &nodes[id].value;
                    let dot = (&g * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    acc(*a, y * &(&g - &dot))
                }
                Op::Conv2d { input, weight, stride, pad } => {
                    let (gx, gw) = conv2d_backward(val(*input), val(*weight), &g, *stride, *pad, rq(*input), rq(*weight));
                    if let Some(gx) = gx {
                        acc(*input, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*weight, gw);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn softmax_along(x: &Array, axis: usize, log: bool) -> Array {
    let ax = Axis(axis);
    let m = x.fold_axis(ax, f64::NEG_INFINITY, |&a, &b| a.max(b)).insert_axis(ax);
    let m = m.mapv(|v| if v.is_finite() { v } else { 0.0 });
    let shifted = x - &m;
    let e = shifted.mapv(f64::exp);
    let z = e.sum_axis(ax).insert_axis(ax);
    if log {
        shifted - &z.mapv(f64::ln)
    } else {
        e / &z
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.iter().next().copied().unwrap()
    }

    /// Copy of this value as a new constant (gradient stops here).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.unary(self.id, v, op)
    }

    pub fn exp(&self) -> Var<'t> {
        self.map_unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.map_unary(f64::ln, Op::Log(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map_unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map_unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map_unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.map_unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.map_unary(|x| x * x, Op::Square(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map_unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map_unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let v = a2.dot(&b2).into_dyn();
        self.tape.binary(self.id, other.id, v, Op::MatMul(self.id, other.id))
    }

    /// `(n, m, k) x (n, k, p) -> (n, m, p)`.
    pub fn bmm(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-D");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-D");
        assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
        assert_eq!(a3.shape()[2], b3.shape()[1], "bmm inner mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((a3.shape()[0], a3.shape()[1], b3.shape()[2]));
        for i in 0..a3.shape()[0] {
            general_mat_mul(1.0, &a3.slice(s![i, .., ..]), &b3.slice(s![i, .., ..]), 0.0, &mut out.slice_mut(s![i, .., ..]));
        }
        self.tape.binary(self.id, other.id, out.into_dyn(), Op::BatchMatMul(self.id, other.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value().as_standard_layout().into_owned();
        let v = v.into_shape_with_order(IxDyn(shape)).unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        self.tape.unary(self.id, v, Op::Reshape(self.id))
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'t> {
        let v = self.value().view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned();
        self.tape.unary(self.id, v, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Var<'t> {
        let n = self.shape().len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'t> {
        let mut v = self.value().sum_axis(Axis(axis));
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        self.tape.unary(self.id, v, Op::Sum(self.id, axis, keepdim))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        let mut v = self.value().sum_axis(Axis(axis)) / n;
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        self.tape.unary(self.id, v, Op::Mean(self.id, axis, keepdim))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Array::from_elem(IxDyn(&[]), self.value().sum());
        self.tape.unary(self.id, v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.tape.unary(self.id, v, Op::Narrow(self.id, axis, start))
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select(Axis(0), idx);
        self.tape.unary(self.id, v, Op::IndexSelect(self.id, idx.to_vec()))
    }

    pub fn log_softmax(&self, axis: usize) -> Var<'t> {
        let v = softmax_along(&self.value(), axis, true);
        self.tape.unary(self.id, v, Op::LogSoftmax(self.id, axis))
    }

    pub fn softmax(&self, axis: usize) -> Var<'t> {
        let v = softmax_along(&self.value(), axis, false);
        self.tape.unary(self.id, v, Op::Softmax(self.id, axis))
    }

    /// `log Σ exp(x)` along `axis`, stabilised with a detached max.
    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Var<'t> {
        let ax = Axis(axis);
        let m = self.value().fold_axis(ax, f64::NEG_INFINITY, |&a, &b| a.max(b)).insert_axis(ax);
        let m = m.mapv(|v| if v.is_finite() { v } else { 0.0 });
        let mc = self.tape.constant(m);
        let out = (*self - mc).exp().sum_axis(axis, true).ln() + mc;
        if keepdim {
            out
        } else {
            let mut shape = out.shape();
            shape.remove(axis);
            out.reshape(&shape)
        }
    }

    pub fn conv2d(&self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let v = conv2d_forward(&self.value(), &weight.value(), stride, pad);
        self.tape.binary(self.id, weight.id, v, Op::Conv2d { input: self.id, weight: weight.id, stride, pad })
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident, $sym:tt) => {
        impl<'t> ops::$trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                let v = {
                    let a = self.value();
                    let b = rhs.value();
                    &*a $sym &*b
                };
                self.tape.binary(self.id, rhs.id, v, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, Add, +);
binop!(Sub, sub, Sub, -);
binop!(Mul, mul, Mul, *);
binop!(Div, div, Div, /);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.map_unary(|x| -x, Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every coordinate of every input against central differences.
    fn check<F>(inputs: Vec<Array>, f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Array]| -> f64 {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
            f(&t, &vs).value().sum()
        };
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array::zeros(x.raw_dim()));
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[i] += h;
                minus[k].as_slice_mut().unwrap()[i] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic.as_slice().unwrap()[i];
                let err = (num - ana).abs() / (1.0f64).max(num.abs()).max(ana.abs());
                assert!(err < 1e-6, "input {k} coord {i}: numeric {num} analytic {ana}");
            }
        }
    }

    #[test]
    fn elementwise_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[1, 4], &mut rng);
        check(vec![a.clone(), b.clone()], |_, v| ((v[0] + v[1]) * v[0] - v[1]).square().sum());
        let pos = b.mapv(|x| x.abs() + 0.5);
        check(vec![a.clone(), pos], |_, v| (v[0] / v[1]).sum());
        check(vec![a.clone()], |_, v| v[0].tanh().sigmoid().exp().sum());
        check(vec![a.mapv(|x| x.abs() + 0.1)], |_, v| (v[0].ln() + v[0].sqrt()).sum());
        check(vec![a.clone()], |_, v| (-v[0]).scale(3.0).add_scalar(1.0).square().mean());
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_array(&[3, 5], &mut rng);
        let b = rand_array(&[5, 2], &mut rng);
        check(vec![a, b], |_, v| v[0].matmul(v[1]).square().sum());
        let a = rand_array(&[2, 3, 4], &mut rng);
        let b = rand_array(&[2, 4, 3], &mut rng);
        check(vec![a, b], |_, v| v[0].bmm(v[1]).tanh().sum());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&[2, 3, 4], &mut rng);
        let w = rand_array(&[4, 2, 3], &mut rng);
        check(vec![a.clone(), w], |_, v| (v[0].permute(&[2, 0, 1]) * v[1]).sum());
        check(vec![a.clone()], |_, v| v[0].reshape(&[6, 4]).transpose_last().square().sum());
        check(vec![a.clone()], |_, v| v[0].sum_axis(1, false).square().sum() + v[0].mean_axis(2, true).exp().sum());
        check(vec![a.clone()], |_, v| v[0].narrow(2, 1, 2).square().sum());
        check(vec![a.clone()], |_, v| v[0].index_select(&[1, 1, 0]).square().sum());
        check(vec![a.clone(), a.clone()], |_, v| Var::concat(&[v[0], v[1].scale(2.0)], 1).square().sum());
    }

    #[test]
    fn softmax_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_array(&[3, 5], &mut rng);
        let w = rand_array(&[3, 5], &mut rng);
        check(vec![a.clone(), w.clone()], |_, v| (v[0].log_softmax(1) * v[1]).sum());
        check(vec![a.clone(), w.clone()], |_, v| (v[0].softmax(0) * v[1]).sum());
        check(vec![a.clone()], |_, v| v[0].logsumexp(1, false).square().sum());
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let a = Array::from_shape_vec(IxDyn(&[4]), vec![-1.0, -0.3, 0.4, 2.0]).unwrap();
        check(vec![a], |_, v| v[0].relu().square().sum());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&[2, 2, 5, 5], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        check(vec![x, w], |_, v| v[0].conv2d(v[1], 2, 1).square().sum());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Array::ones(IxDyn(&[2])));
        let p = tape.param(Array::ones(IxDyn(&[2])));
        let out = (c * p).sum();
        let g = tape.backward(out);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(Array::from_shape_vec(IxDyn(&[1, 2]), vec![1000.0, 1000.0]).unwrap());
        let l = x.logsumexp(1, false).item();
        assert!((l - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_entries_are_exactly_zero() {
        let tape = Tape::new();
        let x = tape.constant(Array::from_shape_vec(IxDyn(&[1, 3]), vec![0.5, 0.1, 0.2 - 1e9]).unwrap());
        let s = x.softmax(1).value();
        assert_eq!(s[[0, 2]], 0.0);
    }
}
