use std::cell::{Cell, Ref, RefCell};

use super::tensor::{axis_split, broadcast_index_map, broadcast_shape, strides, Tensor};
use crate::error::{Error, Result};

/// Records every operation of a forward pass so that [`Tape::backward`] can
/// replay them in reverse.
///
/// Node ids are assigned in creation order, so inputs always precede the
/// nodes that consume them and a single reverse sweep is a valid
/// topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Cosh,
    Sinh,
    Sinhc,
    Acosh,
    Asin,
    Acos,
    Gelu,
    Relu,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Cosh => "cosh",
            Unary::Sinh => "sinh",
            Unary::Sinhc => "sinhc",
            Unary::Acosh => "arccosh",
            Unary::Asin => "arcsin",
            Unary::Acos => "arccos",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Sinhc => crate::geometry::sinhc(x),
            Unary::Acosh => x.acosh(),
            Unary::Asin => x.asin(),
            Unary::Acos => x.acos(),
            Unary::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::Relu => x.max(0.0),
        }
    }

    /// `dy/dx` at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Sinhc => {
                if x.abs() < 1e-4 {
                    x / 3.0 + x * x * x / 30.0
                } else {
                    (x * x.cosh() - x.sinh()) / (x * x)
                }
            }
            // the domain edges are reached only through clamps, where the
            // upstream gradient is already zero
            Unary::Acosh => {
                if x > 1.0 {
                    1.0 / (x * x - 1.0).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Asin => {
                if x.abs() < 1.0 {
                    1.0 / (1.0 - x * x).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Acos => {
                if x.abs() < 1.0 {
                    -1.0 / (1.0 - x * x).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Unary(usize, Unary),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    BroadcastTo(usize),
    Reshape(usize),
    Transpose(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Sum {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSumExp {
        x: usize,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Norm {
        x: usize,
        axis: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Unary(_, u) => u.name(),
            Op::Clamp { .. } => "clamp",
            Op::BroadcastTo(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Permute { .. } => "permute",
            Op::MatMul { .. } => "matmul",
            Op::Sum { .. } => "sum",
            Op::SumAll(..) => "sum_all",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Norm { .. } => "norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(x, _)
            | Op::BroadcastTo(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::SumAll(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::Permute { x, .. }
            | Op::Sum { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Norm { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        let t = Self::default();
        t.fault.set(fault);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that does not.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op.name(),
                detail: format!("non-finite result of shape {:?}", value.shape()),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of nothing"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for x in xs {
            let s = x.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::usage(format!("concat shape mismatch: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for x in xs {
                let v = &nodes[x.id].value;
                let ext = v.shape()[axis];
                for o in 0..outer {
                    let src = &v.data()[o * ext * inner..(o + 1) * ext * inner];
                    let dst = (o * total + off) * inner;
                    data[dst..dst + ext * inner].copy_from_slice(src);
                }
                off += ext;
            }
        }
        self.push(
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                axis,
            },
            Tensor::from_parts(shape, data),
        )
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut contributions = backward_rule(&nodes, id, &g);
            if let Some(f) = fault.filter(|f| f.op == node.op.name()) {
                for (_, t) in contributions.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= f.factor);
                }
            }
            for (input, t) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(t),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let ga = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
            let gb = gd.iter().zip(va).map(|(g, x)| g * x).collect();
            vec![
                (*a, Tensor::from_parts(g.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(g.shape().to_vec(), gb)),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let ga = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
            let gb = gd
                .iter()
                .zip(va.iter().zip(vb))
                .map(|(g, (x, y))| -g * x / (y * y))
                .collect();
            vec![
                (*a, Tensor::from_parts(g.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(g.shape().to_vec(), gb)),
            ]
        }
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::MulScalar(x, s) => vec![(*x, g.map(|v| v * s))],
        Op::Unary(x, u) => {
            let xv = val(*x).data();
            let yv = node.value.data();
            let data = gd
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&g, (&x, &y))| if g == 0.0 { 0.0 } else { g * u.derivative(x, y) })
                .collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x).data();
            let data = gd
                .iter()
                .zip(xv)
                .map(|(&g, &x)| if x > *lo && x < *hi { g } else { 0.0 })
                .collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::BroadcastTo(x) => {
            let src = val(*x);
            let map = broadcast_index_map(src.shape(), g.shape());
            let mut data = vec![0.0; src.numel()];
            for (gi, &si) in map.iter().enumerate() {
                data[si] += gd[gi];
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), data))]
        }
        Op::Reshape(x) => vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), gd.to_vec()))],
        Op::Transpose(x) => {
            let src_shape = val(*x).shape().to_vec();
            vec![(*x, transpose_last(g, &src_shape))]
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![(*x, permute_data(g, &inverse))]
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (va, vb) = (val(*a), val(*b));
            let mut ga = vec![0.0; va.numel()];
            let mut gb = vec![0.0; vb.numel()];
            for bi in 0..*batch {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                let a_s = &va.data()[bi * m * k..(bi + 1) * m * k];
                let b_off = if *shared_rhs { 0 } else { bi * k * n };
                let b_s = &vb.data()[b_off..b_off + k * n];
                // dA = G B^T, dB = A^T G
                gemm(*m, *n, *k, gs, false, b_s, true, &mut ga[bi * m * k..(bi + 1) * m * k]);
                gemm(*k, *m, *n, a_s, true, gs, false, &mut gb[b_off..b_off + k * n]);
            }
            vec![
                (*a, Tensor::from_parts(va.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(vb.shape().to_vec(), gb)),
            ]
        }
        Op::Sum { x, axis } => {
            let shape = val(*x).shape().to_vec();
            let (outer, ext, inner) = axis_split(&shape, *axis);
            let mut data = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                for kk in 0..ext {
                    for i in 0..inner {
                        data[(o * ext + kk) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::SumAll(x) => {
            let src = val(*x);
            vec![(*x, Tensor::full(src.shape(), gd[0]))]
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, ext, inner) = axis_split(node.value.shape(), *axis);
            let mut data = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |kk: usize| (o * ext + kk) * inner + i;
                    let dot: f64 = (0..ext).map(|kk| gd[at(kk)] * y[at(kk)]).sum();
                    for kk in 0..ext {
                        data[at(kk)] = y[at(kk)] * (gd[at(kk)] - dot);
                    }
                }
            }
            vec![(*x, Tensor::from_parts(node.value.shape().to_vec(), data))]
        }
        Op::LogSumExp { x, axis, mask } => {
            let src = val(*x);
            let xv = src.data();
            let out = node.value.data();
            let (outer, ext, inner) = axis_split(src.shape(), *axis);
            let mut data = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for kk in 0..ext {
                        let at = (o * ext + kk) * inner + i;
                        if mask.as_ref().is_none_or(|m| m[at]) {
                            data[at] = gd[r] * (xv[at] - out[r]).exp();
                        }
                    }
                }
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), data))]
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let w = *node.value.shape().last().unwrap();
            let mut data = vec![0.0; y.len()];
            for (r, s) in inv_std.iter().enumerate() {
                let row = r * w..(r + 1) * w;
                let gr = &gd[row.clone()];
                let yr = &y[row.clone()];
                let mean_g = gr.iter().sum::<f64>() / w as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                for (j, out) in data[row].iter_mut().enumerate() {
                    *out = s * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            vec![(*x, Tensor::from_parts(node.value.shape().to_vec(), data))]
        }
        Op::Norm { x, axis } => {
            let src = val(*x);
            let xv = src.data();
            let nv = node.value.data();
            let (outer, ext, inner) = axis_split(src.shape(), *axis);
            let mut data = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    if nv[r] == 0.0 {
                        continue;
                    }
                    for kk in 0..ext {
                        let at = (o * ext + kk) * inner + i;
                        data[at] = gd[r] * xv[at] / nv[r];
                    }
                }
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), data))]
        }
        Op::Concat { xs, axis } => {
            let total = g.shape()[*axis];
            let (outer, _, inner) = axis_split(g.shape(), *axis);
            let mut off = 0;
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                let shape = val(x).shape().to_vec();
                let ext = shape[*axis];
                let mut data = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let s = (o * total + off) * inner;
                    data.extend_from_slice(&gd[s..s + ext * inner]);
                }
                off += ext;
                out.push((x, Tensor::from_parts(shape, data)));
            }
            out
        }
        Op::Slice { x, axis, start } => {
            let shape = val(*x).shape().to_vec();
            let (outer, ext, inner) = axis_split(&shape, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::Gather { x, indices } => {
            let shape = val(*x).shape().to_vec();
            let row: usize = shape[1..].iter().product();
            let mut data = vec![0.0; shape.iter().product()];
            for (r, &src) in indices.iter().enumerate() {
                for j in 0..row {
                    data[src * row + j] += gd[r * row + j];
                }
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
    }
}

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides address them in row-major (or transposed) order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_last(t: &Tensor, src_shape: &[usize]) -> Tensor {
    // `t` has the transposed shape; produce data in `src_shape` layout.
    let r = src_shape.len();
    let (rows, cols) = (src_shape[r - 2], src_shape[r - 1]);
    let batch = t.numel() / (rows * cols).max(1);
    let d = t.data();
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + i * cols + j] = d[base + j * rows + i];
            }
        }
    }
    Tensor::from_parts(src_shape.to_vec(), out)
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = out_shape.len();
    let total = t.numel();
    let d = t.data();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(d[off]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn elementwise<'t>(a: Var<'t>, b: Var<'t>, name: &'static str) -> Result<(Var<'t>, Var<'t>)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((a, b));
    }
    let target = broadcast_shape(&sa, &sb)
        .ok_or_else(|| Error::usage(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")))?;
    Ok((a.broadcast_to(&target)?, b.broadcast_to(&target)?))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = elementwise(self, other, name)?;
        let value = {
            let (va, vb) = (a.value(), b.value());
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        self.tape.push(op(a.id, b.id), value)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + s);
        self.tape.push(Op::AddScalar(self.id), v)
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * s);
        self.tape.push(Op::MulScalar(self.id, s), v)
    }

    fn unary(self, u: Unary) -> Result<Var<'t>> {
        let v = self.value().map(|x| u.forward(x));
        self.tape.push(Op::Unary(self.id, u), v)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn cosh(self) -> Result<Var<'t>> {
        self.unary(Unary::Cosh)
    }

    pub fn sinh(self) -> Result<Var<'t>> {
        self.unary(Unary::Sinh)
    }

    /// `sinh(x)/x`, equal to 1 at 0.
    pub fn sinhc(self) -> Result<Var<'t>> {
        self.unary(Unary::Sinhc)
    }

    pub fn acosh(self) -> Result<Var<'t>> {
        self.unary(Unary::Acosh)
    }

    pub fn asin(self) -> Result<Var<'t>> {
        self.unary(Unary::Asin)
    }

    pub fn acos(self) -> Result<Var<'t>> {
        self.unary(Unary::Acos)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Unary::Gelu)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::usage(format!("clamp: invalid range [{lo}, {hi}]")));
        }
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.tape.push(Op::Clamp { x: self.id, lo, hi }, v)
    }

    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>> {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        if src == shape {
            return Ok(self);
        }
        if broadcast_shape(&src, shape).as_deref() != Some(shape) {
            return Err(Error::usage(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let value = {
            let v = self.value();
            let map = broadcast_index_map(&src, shape);
            let data = map.iter().map(|&i| v.data()[i]).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        self.tape.push(Op::BroadcastTo(self.id), value)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if shape.iter().product::<usize>() != v.numel() {
                return Err(Error::usage(format!("cannot reshape {:?} to {shape:?}", v.shape())));
            }
            Tensor::from_parts(shape.to_vec(), v.data().to_vec())
        };
        self.tape.push(Op::Reshape(self.id), value)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let s = v.shape();
            if s.len() < 2 {
                return Err(Error::usage("transpose needs at least 2 axes"));
            }
            let mut t_shape = s.to_vec();
            t_shape.swap(s.len() - 2, s.len() - 1);
            // transposing back from the swapped shape is the same copy
            transpose_last(&Tensor::from_parts(t_shape.clone(), v.data().to_vec()), &t_shape)
        };
        self.tape.push(Op::Transpose(self.id), value)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let mut seen = vec![false; perm.len()];
            let valid = perm.len() == v.shape().len()
                && perm
                    .iter()
                    .all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::usage(format!(
                    "invalid permutation {perm:?} for {:?}",
                    v.shape()
                )));
            }
            permute_data(&v, perm)
        };
        self.tape.push(
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            value,
        )
    }

    /// `[.., m, k] x [k, n]` (shared right-hand side) or
    /// `[.., m, k] x [.., k, n]` with matching leading axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::usage("matmul needs operands with at least 2 axes"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::usage(format!("matmul shape mismatch: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let value = {
            let (va, vb) = (self.value(), other.value());
            let mut data = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let b_off = if shared_rhs { 0 } else { bi * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &vb.data()[b_off..b_off + k * n],
                    false,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
            Tensor::from_parts(out_shape, data)
        };
        self.tape.push(
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            value,
        )
    }

    fn check_axis(&self, axis: usize, name: &str) -> Result<Vec<usize>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::usage(format!("{name}: axis {axis} out of range for {s:?}")));
        }
        Ok(s)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "sum")?;
        let (outer, ext, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value();
            let d = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for kk in 0..ext {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * ext + kk) * inner + i];
                    }
                }
            }
            let mut s = shape.clone();
            s[axis] = 1;
            Tensor::from_parts(s, out)
        };
        self.tape.push(Op::Sum { x: self.id, axis }, value)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let ext = self.check_axis(axis, "mean")?[axis];
        self.sum_axis(axis)?.mul_scalar(1.0 / ext as f64)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape.push(Op::SumAll(self.id), Tensor::scalar(total))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, ext, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value();
            let d = v.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |kk: usize| (o * ext + kk) * inner + i;
                    let max = (0..ext).map(|kk| d[at(kk)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for kk in 0..ext {
                        let e = (d[at(kk)] - max).exp();
                        out[at(kk)] = e;
                        z += e;
                    }
                    for kk in 0..ext {
                        out[at(kk)] /= z;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), out)
        };
        self.tape.push(Op::Softmax { x: self.id, axis }, value)
    }

    /// Log-sum-exp over `axis`, keeping it with extent 1.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        self.logsumexp_impl(axis, None)
    }

    /// Log-sum-exp over the entries of `axis` where `mask` is true. Every
    /// reduced slice must keep at least one entry.
    pub fn logsumexp_masked(self, axis: usize, mask: Vec<bool>) -> Result<Var<'t>> {
        if mask.len() != self.value().numel() {
            return Err(Error::usage("logsumexp mask length does not match the input"));
        }
        self.logsumexp_impl(axis, Some(mask))
    }

    fn logsumexp_impl(self, axis: usize, mask: Option<Vec<bool>>) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "logsumexp")?;
        let (outer, ext, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value();
            let d = v.data();
            let keep = |at: usize| mask.as_ref().is_none_or(|m| m[at]);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |kk: usize| (o * ext + kk) * inner + i;
                    let max = (0..ext)
                        .filter(|&kk| keep(at(kk)))
                        .map(|kk| d[at(kk)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(Error::usage("logsumexp over an empty selection"));
                    }
                    let z: f64 = (0..ext)
                        .filter(|&kk| keep(at(kk)))
                        .map(|kk| (d[at(kk)] - max).exp())
                        .sum();
                    out[o * inner + i] = max + z.ln();
                }
            }
            let mut s = shape.clone();
            s[axis] = 1;
            Tensor::from_parts(s, out)
        };
        self.tape.push(Op::LogSumExp { x: self.id, axis, mask }, value)
    }

    /// Normalises each row of the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let (value, inv_std) = {
            let v = self.value();
            let w = *v.shape().last().ok_or_else(|| Error::usage("layer_norm of a scalar"))?;
            let rows = v.numel() / w;
            let mut out = vec![0.0; v.numel()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &v.data()[r * w..(r + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
                let s = 1.0 / (var + eps).sqrt();
                for (o, x) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                    *o = (x - mean) * s;
                }
                inv_std.push(s);
            }
            (Tensor::from_parts(v.shape().to_vec(), out), inv_std)
        };
        self.tape.push(Op::LayerNorm { x: self.id, inv_std }, value)
    }

    /// Euclidean norm over `axis`, keeping it with extent 1. The gradient at
    /// a zero vector is taken as zero.
    pub fn norm(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "norm")?;
        let (outer, ext, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value();
            let d = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for kk in 0..ext {
                    for i in 0..inner {
                        let x = d[(o * ext + kk) * inner + i];
                        out[o * inner + i] += x * x;
                    }
                }
            }
            out.iter_mut().for_each(|x| *x = x.sqrt());
            let mut s = shape.clone();
            s[axis] = 1;
            Tensor::from_parts(s, out)
        };
        self.tape.push(Op::Norm { x: self.id, axis }, value)
    }

    /// Entries `start..end` of `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "slice")?;
        if start >= end || end > shape[axis] {
            return Err(Error::usage(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let len = end - start;
        let value = {
            let v = self.value();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * ext + start) * inner;
                out.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            Tensor::from_parts(s, out)
        };
        self.tape.push(
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            value,
        )
    }

    /// Rows of axis 0 picked by `indices` (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let shape = v.shape();
            if shape.is_empty() {
                return Err(Error::usage("gather_rows of a scalar"));
            }
            let row: usize = shape[1..].iter().product();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                if i >= shape[0] {
                    return Err(Error::usage(format!("gather index {i} out of range {}", shape[0])));
                }
                out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
            }
            let mut s = shape.to_vec();
            s[0] = indices.len();
            Tensor::from_parts(s, out)
        };
        self.tape.push(
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
            value,
        )
    }
}
