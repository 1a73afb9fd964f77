//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Tape` is rebuilt for every forward pass. Operations append nodes that
//! store their inputs, shape, and computed values; `backward` walks the nodes
//! in reverse and accumulates gradients. Node indices are append-only, so an
//! input always has a smaller index than its output.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op may
//! be a scalar (one element) or a vector matching the last axis of a 2-D left
//! operand (bias-add style). Everything else must match shapes exactly.

use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Shapes match exactly.
    Same,
    /// Left is `[r, c]`, right is `[c]`.
    Row,
    /// Right has a single element.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary { kind: BinKind, pat: Broadcast, a: Var, b: Var },
    MatMul { a: Var, b: Var },
    Exp { a: Var },
    Log { a: Var },
    Neg { a: Var },
    Sqrt { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    SoftmaxRows { a: Var },
    Clamp { a: Var, lo: T, hi: T },
    AddScalar { a: Var },
    Scale { a: Var, c: T },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    PairwiseSqDist { a: Var },
    ConcatRows { a: Var, b: Var },
    SliceRows { a: Var, mask: Vec<bool> },
    RowOuter { a: Var, b: Var },
    ScaleGrad { a: Var, factor: T },
    Detach,
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
}

/// Gradients produced by `Tape::backward`, indexed by `Var`.
pub struct GradMap<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradMap<T> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dense gradient: zeros when the loss is independent of `v`.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); len],
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, shape, values, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn values(&self, v: Var) -> &[T] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let node = self.node(v);
        if node.values.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let node = self.node(v);
        match node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{what} must be 2-D, got {other:?}"))),
        }
    }

    /// Inserts a leaf copying the tensor's values and grad requirement.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), false))
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    fn broadcast_pattern(&self, a: Var, b: Var) -> Result<Broadcast> {
        let sa = &self.node(a).shape;
        let sb = &self.node(b).shape;
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.node(b).values.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let ([_r, c], [cb]) = (sa.as_slice(), sb.as_slice()) {
            if c == cb {
                return Ok(Broadcast::Row);
            }
        }
        Err(Error::Shape(format!(
            "operands not broadcastable: {sa:?} vs {sb:?}"
        )))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let pat = self.broadcast_pattern(a, b)?;
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        if kind == BinKind::Div && bv.iter().any(|v| *v == T::zero()) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let apply = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out: Vec<T> = match pat {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| apply(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| apply(x, bv[0])).collect(),
            Broadcast::Row => {
                let c = bv.len();
                av.iter().enumerate().map(|(i, &x)| apply(x, bv[i % c])).collect()
            }
        };
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Binary { kind, pat, a, b }, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: [{m}, {ka}] x [{kb}, {n}]"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, rg))
    }

    fn unary(&mut self, op: Op<T>, a: Var, values: Vec<T>) -> Var {
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(op, shape, values, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let values = self.node(a).values.iter().map(|v| v.exp()).collect();
        self.unary(Op::Exp { a }, a, values)
    }

    /// Natural log. Non-positive inputs are rejected; callers clamp first
    /// when operating on probabilities.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.node(a).values.iter().any(|v| *v <= T::zero()) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let values = self.node(a).values.iter().map(|v| v.ln()).collect();
        Ok(self.unary(Op::Log { a }, a, values))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let values = self.node(a).values.iter().map(|v| -*v).collect();
        self.unary(Op::Neg { a }, a, values)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.node(a).values.iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        let values = self.node(a).values.iter().map(|v| v.sqrt()).collect();
        Ok(self.unary(Op::Sqrt { a }, a, values))
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let values =
            self.node(a).values.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.unary(Op::Relu { a }, a, values)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let values = self
            .node(a)
            .values
            .iter()
            .map(|&v| {
                // Branch on sign so the exponential never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        self.unary(Op::Sigmoid { a }, a, values)
    }

    /// Row-wise softmax over the last axis of a 2-D input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax input")?;
        let av = &self.node(a).values;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(row[0], T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        Ok(self.unary(Op::SoftmaxRows { a }, a, out))
    }

    /// Clamps values to `[lo, hi]`. Gradient passes only where the input lies
    /// inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::Config(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        let values = self.node(a).values.iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok(self.unary(Op::Clamp { a, lo, hi }, a, values))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let values = self.node(a).values.iter().map(|&v| v + c).collect();
        self.unary(Op::AddScalar { a }, a, values)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let values = self.node(a).values.iter().map(|&v| v * c).collect();
        self.unary(Op::Scale { a, c }, a, values)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.node(a).values.iter().cloned().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll { a }, vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::of_usize(self.node(a).values.len());
        let s: T = self.node(a).values.iter().cloned().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::MeanAll { a }, vec![1], vec![s / n], rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let (r, c) = self.dims2(a, "axis reduction input")?;
        if axis > 1 {
            return Err(Error::Shape(format!("axis {axis} out of range for 2-D input")));
        }
        let av = &self.node(a).values;
        let (out_len, denom) = if axis == 0 { (c, r) } else { (r, c) };
        let mut out = vec![T::zero(); out_len];
        for i in 0..r {
            for j in 0..c {
                let slot = if axis == 0 { j } else { i };
                out[slot] = out[slot] + av[i * c + j];
            }
        }
        if mean {
            let d = T::of_usize(denom);
            for v in &mut out {
                *v = *v / d;
            }
        }
        let rg = self.node(a).requires_grad;
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        Ok(self.push(op, vec![out_len], out, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Full matrix of squared Euclidean distances between the rows of a
    /// 2-D input: output `[i, j] = ||row_i - row_j||^2`.
    pub fn pairwise_sqdist(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "pairwise distance input")?;
        let av = &self.node(a).values;
        let mut out = vec![T::zero(); r * r];
        for i in 0..r {
            for j in (i + 1)..r {
                let mut d = T::zero();
                for k in 0..c {
                    let diff = av[i * c + k] - av[j * c + k];
                    d = d + diff * diff;
                }
                out[i * r + j] = d;
                out[j * r + i] = d;
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::PairwiseSqDist { a }, vec![r, r], out, rg))
    }

    /// Stacks the rows of two 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat lhs")?;
        let (rb, cb) = self.dims2(b, "concat rhs")?;
        if ca != cb {
            return Err(Error::Shape(format!(
                "concat column mismatch: {ca} vs {cb}"
            )));
        }
        let mut out = self.node(a).values.clone();
        out.extend_from_slice(&self.node(b).values);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::ConcatRows { a, b }, vec![ra + rb, ca], out, rg))
    }

    /// Keeps the rows of a 2-D input where `mask` is true.
    pub fn slice_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice input")?;
        if mask.len() != r {
            return Err(Error::Shape(format!(
                "mask length {} does not match {r} rows",
                mask.len()
            )));
        }
        let keep = mask.iter().filter(|m| **m).count();
        if keep == 0 {
            return Err(Error::Shape("row mask selects no rows".into()));
        }
        let av = &self.node(a).values;
        let mut out = Vec::with_capacity(keep * c);
        for (i, m) in mask.iter().enumerate() {
            if *m {
                out.extend_from_slice(&av[i * c..(i + 1) * c]);
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::SliceRows { a, mask: mask.to_vec() }, vec![keep, c], out, rg))
    }

    /// Per-row outer product, flattened row-major: for rows `f` (length p)
    /// and `g` (length q), output row entry `k * q + j` is `f[k] * g[j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, p) = self.dims2(a, "outer lhs")?;
        let (rb, q) = self.dims2(b, "outer rhs")?;
        if ra != rb {
            return Err(Error::Shape(format!(
                "outer product row mismatch: {ra} vs {rb}"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = Vec::with_capacity(ra * p * q);
        for i in 0..ra {
            for k in 0..p {
                let f = av[i * p + k];
                for j in 0..q {
                    out.push(f * bv[i * q + j]);
                }
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::RowOuter { a, b }, vec![ra, p * q], out, rg))
    }

    /// Identity forward; multiplies the gradient by `factor` on the way
    /// back. A gradient reversal layer is `scale_grad(x, -coeff)`.
    pub fn scale_grad(&mut self, a: Var, factor: T) -> Var {
        let values = self.node(a).values.clone();
        self.unary(Op::ScaleGrad { a, factor }, a, values)
    }

    /// Copies values and stops gradients.
    pub fn detach(&mut self, a: Var) -> Var {
        let shape = self.node(a).shape.clone();
        let values = self.node(a).values.clone();
        self.push(Op::Detach, shape, values, false)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node the
    /// loss depends on; leaves the loss does not reach simply stay absent
    /// (dense queries report zeros).
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("loss var not on this tape".into()));
        }
        if self.node(loss).values.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(up) = upper[0].as_deref() else { continue };
            let node = &self.nodes[idx];
            let mut add_to = |v: Var, deltas: &dyn Fn(&mut Vec<T>)| {
                if self.nodes[v.0].requires_grad {
                    let slot = lower[v.0]
                        .get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].values.len()]);
                    deltas(slot);
                }
            };
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Binary { kind, pat, a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for (i, &u) in up.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add | BinKind::Sub => u,
                                BinKind::Mul => {
                                    let y = match pat {
                                        Broadcast::Same => bv[i],
                                        Broadcast::Scalar => bv[0],
                                        Broadcast::Row => bv[i % bv.len()],
                                    };
                                    u * y
                                }
                                BinKind::Div => {
                                    let y = match pat {
                                        Broadcast::Same => bv[i],
                                        Broadcast::Scalar => bv[0],
                                        Broadcast::Row => bv[i % bv.len()],
                                    };
                                    u / y
                                }
                            };
                            g[i] = g[i] + d;
                        }
                    });
                    add_to(*b, &|g: &mut Vec<T>| {
                        for (i, &u) in up.iter().enumerate() {
                            let slot = match pat {
                                Broadcast::Same => i,
                                Broadcast::Scalar => 0,
                                Broadcast::Row => i % bv.len(),
                            };
                            let d = match kind {
                                BinKind::Add => u,
                                BinKind::Sub => -u,
                                BinKind::Mul => u * av[i],
                                BinKind::Div => {
                                    let y = bv[slot];
                                    -u * av[i] / (y * y)
                                }
                            };
                            g[slot] = g[slot] + d;
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    // dA = U . B^T
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..m {
                            for kk in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s = s + up[i * n + j] * bv[kk * n + j];
                                }
                                g[i * k + kk] = g[i * k + kk] + s;
                            }
                        }
                    });
                    // dB = A^T . U
                    add_to(*b, &|g: &mut Vec<T>| {
                        for kk in 0..k {
                            for j in 0..n {
                                let mut s = T::zero();
                                for i in 0..m {
                                    s = s + av[i * k + kk] * up[i * n + j];
                                }
                                g[kk * n + j] = g[kk * n + j] + s;
                            }
                        }
                    });
                }
                Op::Exp { a } => {
                    let out = &node.values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] * out[i];
                        }
                    });
                }
                Op::Log { a } => {
                    let av = &self.nodes[a.0].values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] / av[i];
                        }
                    });
                }
                Op::Neg { a } => {
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] - up[i];
                        }
                    });
                }
                Op::Sqrt { a } => {
                    let out = &node.values;
                    let two = T::of_f64(2.0);
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] / (two * out[i]);
                        }
                    });
                }
                Op::Relu { a } => {
                    let av = &self.nodes[a.0].values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            if av[i] > T::zero() {
                                g[i] = g[i] + up[i];
                            }
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let out = &node.values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] * out[i] * (T::one() - out[i]);
                        }
                    });
                }
                Op::SoftmaxRows { a } => {
                    let out = &node.values;
                    let c = node.shape[1];
                    add_to(*a, &|g: &mut Vec<T>| {
                        let rows = out.len() / c;
                        for i in 0..rows {
                            let y = &out[i * c..(i + 1) * c];
                            let u = &up[i * c..(i + 1) * c];
                            let mut dot = T::zero();
                            for j in 0..c {
                                dot = dot + u[j] * y[j];
                            }
                            for j in 0..c {
                                g[i * c + j] = g[i * c + j] + y[j] * (u[j] - dot);
                            }
                        }
                    });
                }
                Op::Clamp { a, lo, hi } => {
                    let av = &self.nodes[a.0].values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            if av[i] >= *lo && av[i] <= *hi {
                                g[i] = g[i] + up[i];
                            }
                        }
                    });
                }
                Op::AddScalar { a } => {
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i];
                        }
                    });
                }
                Op::Scale { a, c } => {
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] * *c;
                        }
                    });
                }
                Op::SumAll { a } => {
                    add_to(*a, &|g: &mut Vec<T>| {
                        for v in g.iter_mut() {
                            *v = *v + up[0];
                        }
                    });
                }
                Op::MeanAll { a } => {
                    let n = T::of_usize(self.nodes[a.0].values.len());
                    add_to(*a, &|g: &mut Vec<T>| {
                        for v in g.iter_mut() {
                            *v = *v + up[0] / n;
                        }
                    });
                }
                Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mean = matches!(node.op, Op::MeanAxis { .. });
                    let denom = if *axis == 0 { r } else { c };
                    let scale = if mean {
                        T::one() / T::of_usize(denom)
                    } else {
                        T::one()
                    };
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..r {
                            for j in 0..c {
                                let slot = if *axis == 0 { j } else { i };
                                g[i * c + j] = g[i * c + j] + up[slot] * scale;
                            }
                        }
                    });
                }
                Op::PairwiseSqDist { a } => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let av = &self.nodes[a.0].values;
                    let two = T::of_f64(2.0);
                    add_to(*a, &|g: &mut Vec<T>| {
                        for m in 0..r {
                            for n in 0..r {
                                if m == n {
                                    continue;
                                }
                                let w = (up[m * r + n] + up[n * r + m]) * two;
                                if w == T::zero() {
                                    continue;
                                }
                                for k in 0..c {
                                    g[m * c + k] =
                                        g[m * c + k] + w * (av[m * c + k] - av[n * c + k]);
                                }
                            }
                        }
                    });
                }
                Op::ConcatRows { a, b } => {
                    let na = self.nodes[a.0].values.len();
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..na {
                            g[i] = g[i] + up[i];
                        }
                    });
                    add_to(*b, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[na + i];
                        }
                    });
                }
                Op::SliceRows { a, mask } => {
                    let c = node.shape[1];
                    add_to(*a, &|g: &mut Vec<T>| {
                        let mut src = 0;
                        for (i, m) in mask.iter().enumerate() {
                            if *m {
                                for j in 0..c {
                                    g[i * c + j] = g[i * c + j] + up[src * c + j];
                                }
                                src += 1;
                            }
                        }
                    });
                }
                Op::RowOuter { a, b } => {
                    let (r, p) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let q = self.nodes[b.0].shape[1];
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..r {
                            for k in 0..p {
                                let mut s = T::zero();
                                for j in 0..q {
                                    s = s + up[i * p * q + k * q + j] * bv[i * q + j];
                                }
                                g[i * p + k] = g[i * p + k] + s;
                            }
                        }
                    });
                    add_to(*b, &|g: &mut Vec<T>| {
                        for i in 0..r {
                            for j in 0..q {
                                let mut s = T::zero();
                                for k in 0..p {
                                    s = s + up[i * p * q + k * q + j] * av[i * p + k];
                                }
                                g[i * q + j] = g[i * q + j] + s;
                            }
                        }
                    });
                }
                Op::ScaleGrad { a, factor } => {
                    add_to(*a, &|g: &mut Vec<T>| {
                        for i in 0..g.len() {
                            g[i] = g[i] + up[i] * *factor;
                        }
                    });
                }
            }
        }
        Ok(GradMap { grads })
    }
}
