//! A minimal reverse-mode automatic differentiation engine over dense `f64`
//! tensors in row-major (NCHW for images) layout.
//!
//! Tensors are immutable, reference-counted values. Every operation on a
//! tensor that requires gradients records a backward closure, and
//! [`Tensor::backward`] walks the recorded graph in reverse topological order.
//! Parameters are leaves created with [`Tensor::param`]; optimizers replace
//! them with fresh leaves instead of mutating in place, so graphs built from
//! old parameter values stay valid.
//!
//! Shape mismatches inside ops are programmer errors and panic. Public
//! entry points in the higher-level modules validate user-facing shapes and
//! return [`crate::Error`] instead.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph. Results are constant tensors.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node: None,
        }))
    }

    /// Constant tensor; never receives gradients.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::leaf(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(value: f64, shape: &[usize]) -> Tensor {
        Tensor::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[])
    }

    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            inputs,
            backward: Box::new(backward),
        });
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// `(n, c, h, w)` of a 4-d tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match *self.shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("expected a 4-d tensor, got shape {s:?}"),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), self.shape())
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.to_vec(), self.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode gradient of this scalar with respect to every leaf that
    /// requires gradients.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got {:?}", self.shape());
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        grads.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else {
                if let Some(g) = grads.remove(&t.id()) {
                    leaves.insert(t.id(), g);
                }
                continue;
            };
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let input_grads = (node.backward)(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.len(), input.numel());
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(input.id(), ig);
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Gradients of leaf tensors, keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast shapes {a:?} and {b:?}"),
        };
    }
    out
}

/// For each linear index of `out`, the linear index into a tensor of shape
/// `src` broadcast to `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }

    /// Partial derivatives (d/dx, d/dy).
    fn partials(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (y, x),
            BinOp::Div => (1.0 / y, -x / (y * y)),
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g| {
            let (mut ga, mut gb) = (Vec::new(), Vec::new());
            if ac.requires_grad() {
                ga = vec![0.0; g.len()];
            }
            if bc.requires_grad() {
                gb = vec![0.0; g.len()];
            }
            for k in 0..g.len() {
                let (px, py) = op.partials(ac.data()[k], bc.data()[k]);
                if !ga.is_empty() {
                    ga[k] = g[k] * px;
                }
                if !gb.is_empty() {
                    gb[k] = g[k] * py;
                }
            }
            vec![
                (!ga.is_empty()).then_some(ga),
                (!gb.is_empty()).then_some(gb),
            ]
        });
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let ia = Rc::new(broadcast_index(a.shape(), &shape));
    let ib = Rc::new(broadcast_index(b.shape(), &shape));
    let data: Vec<f64> = ia
        .iter()
        .zip(ib.iter())
        .map(|(&i, &j)| op.apply(a.data()[i], b.data()[j]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(data, shape, vec![a.clone(), b.clone()], move |g| {
        let mut ga = ac.requires_grad().then(|| vec![0.0; ac.numel()]);
        let mut gb = bc.requires_grad().then(|| vec![0.0; bc.numel()]);
        for k in 0..g.len() {
            let (i, j) = (ia[k], ib[k]);
            let (px, py) = op.partials(ac.data()[i], bc.data()[j]);
            if let Some(ga) = ga.as_mut() {
                ga[i] += g[k] * px;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += g[k] * py;
            }
        }
        vec![ga, gb]
    })
}

// ---------------------------------------------------------------------------
// Elementwise ops

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` returns dy/dx given input `x` and
    /// output `y`.
    pub fn map(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out_vals = Rc::new(data.clone());
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(input.data())
                .zip(out_vals.iter())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.map(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor {
        self.map(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqr(&self) -> Tensor {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `dims`, keeping them as size-1 axes.
    pub fn sum_dims(&self, dims: &[usize]) -> Tensor {
        let mut out_shape = self.shape().to_vec();
        for &d in dims {
            out_shape[d] = 1;
        }
        let map = Rc::new(broadcast_index(&out_shape, self.shape()));
        let mut data = vec![0.0; numel(&out_shape)];
        for (k, &o) in map.iter().enumerate() {
            data[o] += self.data()[k];
        }
        Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            vec![Some(map.iter().map(|&o| g[o]).collect())]
        })
    }

    pub fn mean_dims(&self, dims: &[usize]) -> Tensor {
        let count: usize = dims.iter().map(|&d| self.shape()[d]).product();
        self.sum_dims(dims).scale(1.0 / count as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    fn split_at_dim(&self, dim: usize) -> (usize, usize, usize) {
        let s = self.shape();
        (numel(&s[..dim]), s[dim], numel(&s[dim + 1..]))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Tensor {
        let (outer, d, inner) = self.split_at_dim(dim);
        assert!(start + len <= d, "narrow {start}+{len} out of range {d}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        let total = self.numel();
        Tensor::from_op(data, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let base = (o * d + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenation along `dim`.
    pub fn cat(tensors: &[Tensor], dim: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let first = tensors[0].shape();
        for t in tensors {
            assert_eq!(t.shape().len(), first.len());
            for (i, (&a, &b)) in first.iter().zip(t.shape()).enumerate() {
                assert!(i == dim || a == b, "cat shapes {first:?} vs {:?}", t.shape());
            }
        }
        let outer = numel(&first[..dim]);
        let inner = numel(&first[dim + 1..]);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[dim]).collect();
        let total_d: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total_d * inner);
        for o in 0..outer {
            for (t, &d) in tensors.iter().zip(&sizes) {
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[dim] = total_d;
        let sizes_c = sizes.clone();
        Tensor::from_op(data, shape, tensors.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = sizes_c.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &d) in grads.iter_mut().zip(&sizes_c) {
                    gi.extend_from_slice(&g[pos..pos + d * inner]);
                    pos += d * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Softmax along `dim`.
    pub fn softmax(&self, dim: usize) -> Tensor {
        let (outer, d, inner) = self.split_at_dim(dim);
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * d + c) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for c in 0..d {
                    m = m.max(self.data()[idx(c)]);
                }
                let mut s = 0.0;
                for c in 0..d {
                    let e = (self.data()[idx(c)] - m).exp();
                    data[idx(c)] = e;
                    s += e;
                }
                for c in 0..d {
                    data[idx(c)] /= s;
                }
            }
        }
        let y = Rc::new(data.clone());
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |c: usize| (o * d + c) * inner + i;
                    let dot: f64 = (0..d).map(|c| g[idx(c)] * y[idx(c)]).sum();
                    for c in 0..d {
                        gx[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax along `dim`.
    pub fn log_softmax(&self, dim: usize) -> Tensor {
        let (outer, d, inner) = self.split_at_dim(dim);
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * d + c) * inner + i;
                let m = (0..d).map(|c| self.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..d).map(|c| (self.data()[idx(c)] - m).exp()).sum::<f64>().ln();
                for c in 0..d {
                    data[idx(c)] = self.data()[idx(c)] - lse;
                }
            }
        }
        let y = Rc::new(data.clone());
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |c: usize| (o * d + c) * inner + i;
                    let gsum: f64 = (0..d).map(|c| g[idx(c)]).sum();
                    for c in 0..d {
                        gx[idx(c)] = g[idx(c)] - y[idx(c)].exp() * gsum;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: Conv2dGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: Conv2dGeometry,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * op(a)[m×k] · op(b)[k×n] + beta * c`, with explicit
/// row/column strides for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the full strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// 2-d convolution of an `(N, Cin, H, W)` input with `(Cout, Cin, k, k)`
    /// weights and optional `(Cout)` bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, geo: Conv2dGeometry) -> Tensor {
        let (n, cin, h, w) = self.dims4();
        let (cout, wcin, k, k2) = weight.dims4();
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
        assert_eq!(k, k2, "square kernels only");
        if let Some(b) = bias {
            assert_eq!(b.shape(), [cout]);
        }
        let ho = (h + 2 * geo.padding - k) / geo.stride + 1;
        let wo = (w + 2 * geo.padding - k) / geo.stride + 1;
        let kk = cin * k * k;
        let hw = ho * wo;
        let mut out = vec![0.0; n * cout * hw];
        let mut all_cols = vec![0.0; n * kk * hw];
        for b in 0..n {
            let cols = &mut all_cols[b * kk * hw..(b + 1) * kk * hw];
            im2col(&self.data()[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, k, geo, ho, wo, cols);
            let o = &mut out[b * cout * hw..(b + 1) * cout * hw];
            if let Some(bias) = bias {
                for (co, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(bias.data()[co]);
                }
            }
            gemm(cout, kk, hw, weight.data(), kk, 1, cols, hw, 1, if bias.is_some() { 1.0 } else { 0.0 }, o);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (xc, wc) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let cols = Rc::new(all_cols);
        Tensor::from_op(out, vec![n, cout, ho, wo], inputs, move |g| {
            let mut gx = xc.requires_grad().then(|| vec![0.0; xc.numel()]);
            let mut gw = vec![0.0; wc.numel()];
            let mut gb = vec![0.0; cout];
            let mut dcols = vec![0.0; kk * hw];
            for b in 0..n {
                let gb_slice = &g[b * cout * hw..(b + 1) * cout * hw];
                let cols_b = &cols[b * kk * hw..(b + 1) * kk * hw];
                // dW += dY · colsᵀ
                gemm(cout, hw, kk, gb_slice, hw, 1, cols_b, 1, hw, 1.0, &mut gw);
                if has_bias {
                    for (co, chunk) in gb_slice.chunks(hw).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols = Wᵀ · dY
                    gemm(kk, cout, hw, wc.data(), 1, kk, gb_slice, hw, 1, 0.0, &mut dcols);
                    col2im(&dcols, cin, h, w, k, geo, ho, wo, &mut gx[b * cin * h * w..(b + 1) * cin * h * w]);
                }
            }
            let mut res = vec![gx, Some(gw)];
            if has_bias {
                res.push(Some(gb));
            }
            res
        })
    }
}

// ---------------------------------------------------------------------------
// Resampling

/// Per-axis linear interpolation table for half-pixel-centred resizing.
fn resize_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Tensor {
    /// Bilinear resize of an `(N, C, H, W)` tensor to `(out_h, out_w)` with
    /// half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let ty = Rc::new(resize_table(h, out_h));
        let tx = Rc::new(resize_table(w, out_w));
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Tensor::from_op(out, vec![n, c, out_h, out_w], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gs = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = gs[oy * out_w + ox];
                        dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += v * fy * (1.0 - fx);
                        dst[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

/// Bilinear sample location with border clamping. Returns corner indices,
/// fractional offset, and whether the coordinate was inside the valid range
/// (clamped coordinates carry no gradient).
#[inline]
fn clamp_coord(v: f64, size: usize) -> (usize, usize, f64, bool) {
    let max = (size - 1) as f64;
    let inside = (0.0..=max).contains(&v);
    let c = v.clamp(0.0, max);
    if size == 1 {
        return (0, 0, 0.0, false);
    }
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

impl Tensor {
    /// Samples `self` `(N, C, H, W)` at `(x + dx, y + dy)` for every pixel,
    /// where `disp` is `(N, 2, H, W)` in pixels with channel order (dx, dy).
    /// Bilinear interpolation, out-of-range samples clamp to the border.
    pub fn warp_bilinear(&self, disp: &Tensor) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert_eq!(disp.shape(), [n, 2, h, w], "displacement shape");
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            let dx = &disp.data()[(b * 2) * hw..(b * 2 + 1) * hw];
            let dy = &disp.data()[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (x0, x1, fx, _) = clamp_coord(x as f64 + dx[p], w);
                    let (y0, y1, fy, _) = clamp_coord(y as f64 + dy[p], h);
                    for ch in 0..c {
                        let src = &self.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        out[(b * c + ch) * hw + p] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        let (img, dsp) = (self.clone(), disp.clone());
        Tensor::from_op(out, vec![n, c, h, w], vec![self.clone(), disp.clone()], move |g| {
            let mut gi = img.requires_grad().then(|| vec![0.0; img.numel()]);
            let mut gd = dsp.requires_grad().then(|| vec![0.0; dsp.numel()]);
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let ddx = dsp.data()[(b * 2) * hw + p];
                        let ddy = dsp.data()[(b * 2 + 1) * hw + p];
                        let (x0, x1, fx, inx) = clamp_coord(x as f64 + ddx, w);
                        let (y0, y1, fy, iny) = clamp_coord(y as f64 + ddy, h);
                        let (mut sx, mut sy) = (0.0, 0.0);
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let gv = g[off + p];
                            if let Some(gi) = gi.as_mut() {
                                gi[off + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                gi[off + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                gi[off + y1 * w + x0] += gv * fy * (1.0 - fx);
                                gi[off + y1 * w + x1] += gv * fy * fx;
                            }
                            if gd.is_some() {
                                let src = &img.data()[off..off + hw];
                                let (v00, v01) = (src[y0 * w + x0], src[y0 * w + x1]);
                                let (v10, v11) = (src[y1 * w + x0], src[y1 * w + x1]);
                                sx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                sy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                        }
                        if let Some(gd) = gd.as_mut() {
                            if inx {
                                gd[(b * 2) * hw + p] += sx;
                            }
                            if iny {
                                gd[(b * 2 + 1) * hw + p] += sy;
                            }
                        }
                    }
                }
            }
            vec![gi, gd]
        })
    }

    /// Per-pixel cross-entropy of `(N, C, H, W)` logits against labels
    /// (`N*H*W` entries). Pixels labelled `ignore` get loss 0 and no gradient.
    /// Returns an `(N, 1, H, W)` loss map.
    pub fn cross_entropy_map(&self, labels: &[u8], ignore: u8) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "label count");
        let mut loss = vec![0.0; n * hw];
        let mut probs = vec![0.0; self.numel()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let m = (0..c).map(|ch| self.data()[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..c).map(|ch| (self.data()[idx(ch)] - m).exp()).sum();
                for ch in 0..c {
                    probs[idx(ch)] = (self.data()[idx(ch)] - m).exp() / s;
                }
                let l = labels[b * hw + p];
                if l != ignore {
                    assert!((l as usize) < c, "label {l} out of range for {c} classes");
                    loss[b * hw + p] = m + s.ln() - self.data()[idx(l as usize)];
                }
            }
        }
        let labels: Rc<Vec<u8>> = Rc::new(labels.to_vec());
        let probs = Rc::new(probs);
        Tensor::from_op(loss, vec![n, 1, h, w], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * c * hw];
            for b in 0..n {
                for p in 0..hw {
                    let l = labels[b * hw + p];
                    if l == ignore {
                        continue;
                    }
                    let gv = g[b * hw + p];
                    for ch in 0..c {
                        let idx = (b * c + ch) * hw + p;
                        let onehot = if ch == l as usize { 1.0 } else { 0.0 };
                        gx[idx] = gv * (probs[idx] - onehot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
