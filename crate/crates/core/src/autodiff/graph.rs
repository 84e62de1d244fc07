use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]: a differentiable value.
///
/// Handles are only meaningful for the graph that produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied unary op: `(input, output, upstream) -> input grad`.
pub type CustomBackward = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs is a vector matching the trailing dimension of lhs
    RhsTrailing,
    LhsTrailing,
}

enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    WeightedSumAxis { x: Var, w: Var, axis: usize },
    Softmax { z: Var, axis: usize, temperature: f64 },
    Concat(Vec<Var>),
    Slice(Var, usize),
    Pick(Var, usize),
    Row(Var, usize),
    Stack(Vec<Var>),
    Reshape(Var),
    Custom(Var, CustomBackward),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation graph recorded in creation order.
///
/// Nodes are appended after their parents, so creation order is a topological
/// order and [`Graph::backward`] walks it in reverse. Gradients accumulate
/// (`+=`) across calls until [`Graph::zero_grads`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, zeros if nothing has reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.is_empty() {
            Ok(Broadcast::RhsScalar)
        } else if sa.is_empty() {
            Ok(Broadcast::LhsScalar)
        } else if sb.len() == 1 && sa.len() > 1 && sa[sa.len() - 1] == sb[0] {
            Ok(Broadcast::RhsTrailing)
        } else if sa.len() == 1 && sb.len() > 1 && sb[sb.len() - 1] == sa[0] {
            Ok(Broadcast::LhsTrailing)
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary<F: Fn(f64, f64) -> f64>(
        &self,
        a: Var,
        b: Var,
        kind: Broadcast,
        f: F,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
            Broadcast::Same => (ta.shape().into(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
            Broadcast::RhsScalar => (ta.shape().into(), da.iter().map(|&x| f(x, db[0])).collect()),
            Broadcast::LhsScalar => (tb.shape().into(), db.iter().map(|&y| f(da[0], y)).collect()),
            Broadcast::RhsTrailing => {
                let w = db.len();
                (ta.shape().into(), da.iter().enumerate().map(|(i, &x)| f(x, db[i % w])).collect())
            }
            Broadcast::LhsTrailing => {
                let w = da.len();
                (tb.shape().into(), db.iter().enumerate().map(|(i, &y)| f(da[i % w], y)).collect())
            }
        };
        Tensor::new(shape, data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("add", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b, kind), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("sub", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b, kind), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b, kind), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().into(), t.data().iter().map(|x| x * c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    /// Matrix product for rank-1/rank-2 operands. A rank-1 left operand is a
    /// row vector, a rank-1 right operand a column vector; rank-1 x rank-1 is
    /// the dot product (a scalar).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, &bv) in dst.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![],
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::MatMul { a, b, m, k, n },
            rg,
            "matmul",
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::dim("dot", self.shape(a), self.shape(b)));
        }
        self.matmul(a, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[2]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![c, r], out).unwrap(), Op::Transpose(a), rg, "transpose")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().into(), t.data().iter().map(|&x| f(x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, op, rg, name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    /// Overflow-safe `log(1 + exp(z))`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, |x| x.max(floor).ln(), Op::LogClamped(a, floor), "log")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(op, self.shape(a), &[axis]));
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::SumAxis(a, axis), rg, "sum_axis")
    }

    /// Mean along `axis`, accumulated as a running mean so that equal entries
    /// average to themselves exactly.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if len == 0 {
            return Err(Error::Empty("mean_axis"));
        }
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            dst.copy_from_slice(&d[o * len * inner..(o * len + 1) * inner]);
            for l in 1..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (m, &x) in dst.iter_mut().zip(src) {
                    *m += (x - *m) / (l + 1) as f64;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::MeanAxis(a, axis), rg, "mean_axis")
    }

    /// Coordinate-wise maximum along `axis`; ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if len == 0 {
            return Err(Error::Empty("max_axis"));
        }
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = d[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::MaxAxis(a, axis, arg), rg, "max_axis")
    }

    /// Contracts `axis` of `x` against the weight vector `w`:
    /// `out[.., ..] = sum_l w[l] * x[.., l, ..]`.
    pub fn weighted_sum_axis(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        self.check_axis("weighted_sum_axis", x, axis)?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (outer, len, inner) = axis_extents(tx.shape(), axis);
        if tw.shape() != [len] {
            return Err(Error::dim("weighted_sum_axis", tx.shape(), tw.shape()));
        }
        let (dx, dw) = (tx.data(), tw.data());
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (l, &wl) in dw.iter().enumerate() {
                let src = &dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wl * s;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::WeightedSumAxis { x, w, axis },
            rg,
            "weighted_sum_axis",
        )
    }

    /// `exp((z - max z) / temperature)` normalized along `axis`.
    pub fn softmax(&mut self, z: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.check_axis("softmax", z, axis)?;
        let t = self.value(z);
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = ((d[idx(l)] - mx) / temperature).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let rg = self.rg(z);
        self.push(
            Tensor::new(t.shape().into(), out).unwrap(),
            Op::Softmax { z, axis, temperature },
            rg,
            "softmax",
        )
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::dim("concat", self.shape(p), &[1]));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// `a[start..start + len]` of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.numel() {
            return Err(Error::dim("slice", t.shape(), &[start, len]));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, start), rg, "slice")
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.numel() {
            return Err(Error::dim("pick", t.shape(), &[index]));
        }
        let out = Tensor::scalar(t.data()[index]);
        let rg = self.rg(a);
        self.push(out, Op::Pick(a, index), rg, "pick")
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || i >= t.shape()[0] {
            return Err(Error::dim("row", t.shape(), &[i]));
        }
        let out = Tensor::vector(t.row(i).to_vec());
        let rg = self.rg(a);
        self.push(out, Op::Row(a, i), rg, "row")
    }

    /// Stacks equal-length rank-1 tensors into a `[k, len]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack"))?;
        let width = self.shape(*first).to_vec();
        if width.len() != 1 {
            return Err(Error::dim("stack", &width, &[1]));
        }
        let mut out = Vec::with_capacity(rows.len() * width[0]);
        for &r in rows {
            if self.shape(r) != width.as_slice() {
                return Err(Error::dim("stack", &width, self.shape(r)));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        self.push(
            Tensor::new(vec![rows.len(), width[0]], out).unwrap(),
            Op::Stack(rows.to_vec()),
            rg,
            "stack",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Elementwise op with caller-supplied forward and backward rules.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(f64) -> f64,
        backward: CustomBackward,
    ) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().into(), t.data().iter().map(|&x| forward(x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Custom(a, backward), rg, "custom")
    }

    /// Reverse-mode sweep from a scalar `root`, adding d(root)/d(node) into the
    /// gradient of every node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            add_into(&mut self.nodes[i].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(d) => d.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let na = self.nodes[a.0].value.numel();
                let nb = self.nodes[b.0].value.numel();
                send(*a, reduce_broadcast(g, na, *kind, true));
                let mut gb = reduce_broadcast(g, nb, *kind, false);
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                send(*b, gb);
            }
            Op::Mul(a, b, kind) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let (na, nb) = (va.len(), vb.len());
                let at = |j: usize, v: &[f64], lhs: bool| -> f64 {
                    match (kind, lhs) {
                        (Broadcast::Same, _) => v[j],
                        (Broadcast::LhsScalar, true) | (Broadcast::RhsScalar, false) => v[0],
                        (Broadcast::LhsTrailing, true) | (Broadcast::RhsTrailing, false) => v[j % v.len()],
                        _ => v[j],
                    }
                };
                if self.nodes[a.0].requires_grad {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, &gj)| gj * at(j, vb, false)).collect();
                    send(*a, reduce_broadcast(&full, na, *kind, true));
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, &gj)| gj * at(j, va, true)).collect();
                    send(*b, reduce_broadcast(&full, nb, *kind, false));
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.nodes[a.0].requires_grad {
                    // dA = dC B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] = gi.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *dst += av * gv;
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                send(*a, ga);
            }
            Op::Tanh(a) => send(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect()),
            Op::Softplus(a) => {
                let x = self.nodes[a.0].value.data();
                send(*a, g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect())
            }
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()),
            Op::LogClamped(a, floor) => {
                let x = self.nodes[a.0].value.data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > *floor { gi / xi } else { 0.0 })
                        .collect(),
                )
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.nodes[a.0].value.shape(), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*a, ga);
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.nodes[a.0].value.shape(), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for (dst, &gv) in ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                        {
                            *dst = gv / len as f64;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::MaxAxis(a, axis, arg) => {
                let (outer, len, inner) = axis_extents(self.nodes[a.0].value.shape(), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = arg[o * inner + i];
                        ga[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
                send(*a, ga);
            }
            Op::WeightedSumAxis { x, w, axis } => {
                let (outer, len, inner) = axis_extents(self.nodes[x.0].value.shape(), *axis);
                let (vx, vw) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for (l, &wl) in vw.iter().enumerate() {
                            for (dst, &gv) in gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                                .iter_mut()
                                .zip(go)
                            {
                                *dst = wl * gv;
                            }
                        }
                    }
                    send(*x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![0.0; len];
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for (l, slot) in gw.iter_mut().enumerate() {
                            let src = &vx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            *slot += src.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    send(*w, gw);
                }
            }
            Op::Softmax { z, axis, temperature } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut gz = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dotp: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gz[idx(l)] = y[idx(l)] * (g[idx(l)] - dotp) / temperature;
                        }
                    }
                }
                send(*z, gz);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                ga[*start..*start + g.len()].copy_from_slice(g);
                send(*a, ga);
            }
            Op::Pick(a, index) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                ga[*index] = g[0];
                send(*a, ga);
            }
            Op::Row(a, r) => {
                let t = &self.nodes[a.0].value;
                let cols = t.shape()[1];
                let mut ga = vec![0.0; t.numel()];
                ga[r * cols..(r + 1) * cols].copy_from_slice(g);
                send(*a, ga);
            }
            Op::Stack(rows) => {
                let w = g.len() / rows.len();
                for (r, &v) in rows.iter().enumerate() {
                    send(v, g[r * w..(r + 1) * w].to_vec());
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Custom(a, backward) => {
                let x = self.nodes[a.0].value.data();
                send(*a, backward(x, y, g));
            }
        }
    }
}

/// Sums an upstream gradient back down to an operand's (possibly broadcast) size.
fn reduce_broadcast(g: &[f64], n: usize, kind: Broadcast, lhs: bool) -> Vec<f64> {
    let broadcast_here = matches!(
        (kind, lhs),
        (Broadcast::LhsScalar, true)
            | (Broadcast::RhsScalar, false)
            | (Broadcast::LhsTrailing, true)
            | (Broadcast::RhsTrailing, false)
    );
    if !broadcast_here {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (j, &gj) in g.iter().enumerate() {
        out[j % n] += gj;
    }
    out
}
