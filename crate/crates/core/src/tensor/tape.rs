use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, transpose};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Probability floor applied inside `cross_entropy` before the log.
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    SumSquares(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    /// Some input (transitively) is a leaf that wants a gradient.
    needs_grad: bool,
}

/// Ordered record of one forward pass.
pub struct Tape<S> {
    id: u32,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    tape: u32,
    grads: HashMap<u32, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.idx)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let one = S::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * c * (one + S::of(3.0) * a * x * x);
    (value, deriv)
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        total += e;
    }
    let inv = S::one() / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<S>, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.idx as usize])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, needs)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&[S], TensorError> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        Ok(&self.node(v)?.shape)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<S>, TensorError> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<S, TensorError> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: n.shape.clone(),
            });
        }
        Ok(n.value[0])
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let n = self.node(v)?;
        match n.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: n.shape.clone(),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        Ok(na.shape.clone())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx as usize].needs_grad)
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a)?, self.value(b)?, &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// `x · wᵀ` for `x: [n, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (n, k) = self.dims2(x, "linear")?;
        let (o, k2) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: vec![n, k],
                rhs: vec![o, k2],
            });
        }
        let mut out = vec![S::zero(); n * o];
        gemm_nt(self.value(x)?, self.value(w)?, &mut out, n, k, o);
        let needs = self.needs(&[x, w]);
        Ok(self.push(vec![n, o], out, Op::Linear(x, w), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = transpose(self.value(a)?, r, c);
        let needs = self.needs(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = n.value.clone();
        let needs = n.needs_grad;
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.value(a)?.iter().zip(self.value(b)?).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape(a, b, "sub")?;
        let out = self.value(a)?.iter().zip(self.value(b)?).map(|(&x, &y)| x - y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Sub(a, b), needs))
    }

    /// Adds a `[c]` vector to every row of an `[r,c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "add_row")?;
        let rlen = self.node(row)?.value.len();
        if rlen != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: self.node(row)?.shape.clone(),
            });
        }
        let bias = self.value(row)?;
        let mut out = self.value(a)?.to_vec();
        for orow in out.chunks_exact_mut(c.max(1)) {
            for (o, &b) in orow.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let needs = self.needs(&[a, row]);
        Ok(self.push(vec![r, c], out, Op::AddRow(a, row), needs))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape(a, b, "elementwise_mul")?;
        let out = self.value(a)?.iter().zip(self.value(b)?).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| x * s).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, Op::Scale(a, s), needs))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| x.max(S::zero())).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, Op::Relu(a), needs))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| gelu_parts(x).0).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, Op::Gelu(a), needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let width = *n.shape.last().ok_or(TensorError::Rank {
            op: "softmax",
            expected: 1,
            shape: vec![],
        })?;
        let mut out = vec![S::zero(); n.value.len()];
        if width > 0 {
            for (row, o) in n.value.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
                softmax_row(row, o);
            }
        }
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, Op::Softmax(a), needs))
    }

    /// Normalizes each row of `[r,c]` to zero mean and unit variance, then
    /// applies the per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.node(p)?.value.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: self.node(p)?.shape.clone(),
                });
            }
        }
        let xv = self.value(x)?;
        let g = self.value(gamma)?;
        let b = self.value(beta)?;
        let inv_c = S::one() / S::of(c as f64);
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[V,D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let tv = self.value(table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[N,V]` logits. Probabilities are floored at 1e-12 before the log.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: "no rows".into(),
            });
        }
        let lv = self.value(logits)?;
        let mut probs = vec![S::zero(); n * v];
        let mut total = S::zero();
        let floor = S::of(CROSS_ENTROPY_FLOOR);
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let p = &mut probs[i * v..(i + 1) * v];
            softmax_row(&lv[i * v..(i + 1) * v], p);
            total += -p[t].max(floor).ln();
        }
        let loss = total / S::of(n as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum_of_squares(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let s = n.value.iter().map(|&x| x * x).sum();
        let needs = n.needs_grad;
        Ok(self.push(vec![], vec![s], Op::SumSquares(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let s = n.value.iter().copied().sum();
        let needs = n.needs_grad;
        Ok(self.push(vec![], vec![s], Op::Sum(a), needs))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with `d` split into `heads` equal
    /// slices; position `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (rows, d) = self.dims2(q, "attention")?;
        for other in [k, v] {
            let s = self.dims2(other, "attention")?;
            if s != (rows, d) {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![rows, d],
                    rhs: vec![s.0, s.1],
                });
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                message: format!("[{rows},{d}] is not batch={batch} x seq={seq} with {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q)?, self.value(k)?, self.value(v)?);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); rows * d];
        let mut scores = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let qrow = &qv[(b * seq + t) * d + h * dh..][..dh];
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        let krow = &kv[(b * seq + s) * d + h * dh..][..dh];
                        *sc = dot(qrow, krow) * scale;
                    }
                    let p = &mut probs[pbase + t * seq..pbase + t * seq + t + 1];
                    softmax_row(&scores[..=t], p);
                    let orow = &mut out[(b * seq + t) * d + h * dh..][..dh];
                    for (s, &ps) in p.iter().enumerate() {
                        let vrow = &vv[(b * seq + s) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += ps * x;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape's record; a second
    /// call fails with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        self.consumed = true;

        let count = loss.idx as usize + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..count).map(|_| None).collect();
        grads[loss.idx as usize] = Some(vec![S::one()]);
        let mut out = HashMap::new();

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let want = |v: &Var| nodes[v.idx as usize].needs_grad;
            let val = |v: &Var| nodes[v.idx as usize].value.as_slice();
            let shape = |v: &Var| nodes[v.idx as usize].shape.as_slice();
            match &node.op {
                Op::Leaf => {
                    out.insert(i as u32, Tensor::new(node.shape.clone(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (shape(a)[0], shape(a)[1]);
                    let n = shape(b)[1];
                    if want(a) {
                        acc(&mut grads, a, val(a).len(), |ga| gemm_nt(&g, val(b), ga, m, n, k));
                    }
                    if want(b) {
                        acc(&mut grads, b, val(b).len(), |gb| gemm_tn(val(a), &g, gb, m, k, n));
                    }
                }
                Op::Linear(x, w) => {
                    let (n, k) = (shape(x)[0], shape(x)[1]);
                    let o = shape(w)[0];
                    if want(x) {
                        acc(&mut grads, x, val(x).len(), |gx| gemm_nn(&g, val(w), gx, n, o, k));
                    }
                    if want(w) {
                        acc(&mut grads, w, val(w).len(), |gw| gemm_tn(&g, val(x), gw, n, o, k));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (shape(a)[0], shape(a)[1]);
                    let gt = transpose(&g, c, r);
                    acc(&mut grads, a, gt.len(), |ga| add_into(ga, &gt));
                }
                Op::Reshape(a) => acc(&mut grads, a, g.len(), |ga| add_into(ga, &g)),
                Op::Add(a, b) => {
                    if want(a) {
                        acc(&mut grads, a, g.len(), |ga| add_into(ga, &g));
                    }
                    if want(b) {
                        acc(&mut grads, b, g.len(), |gb| add_into(gb, &g));
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        acc(&mut grads, a, g.len(), |ga| add_into(ga, &g));
                    }
                    if want(b) {
                        acc(&mut grads, b, g.len(), |gb| {
                            gb.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y)
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    if want(a) {
                        acc(&mut grads, a, g.len(), |ga| add_into(ga, &g));
                    }
                    if want(row) {
                        let c = val(row).len();
                        acc(&mut grads, row, c, |gr| {
                            for grow in g.chunks_exact(c) {
                                add_into(gr, grow);
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        let bv = val(b);
                        acc(&mut grads, a, g.len(), |ga| {
                            for ((x, &gi), &bi) in ga.iter_mut().zip(&g).zip(bv) {
                                *x += gi * bi;
                            }
                        });
                    }
                    if want(b) {
                        let av = val(a);
                        acc(&mut grads, b, g.len(), |gb| {
                            for ((x, &gi), &ai) in gb.iter_mut().zip(&g).zip(av) {
                                *x += gi * ai;
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, a, g.len(), |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, &gi)| *x += gi * s)
                    });
                }
                Op::Relu(a) => {
                    let av = val(a);
                    acc(&mut grads, a, g.len(), |ga| {
                        for ((x, &gi), &ai) in ga.iter_mut().zip(&g).zip(av) {
                            if ai > S::zero() {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let av = val(a);
                    acc(&mut grads, a, g.len(), |ga| {
                        for ((x, &gi), &ai) in ga.iter_mut().zip(&g).zip(av) {
                            *x += gi * gelu_parts(ai).1;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let width = *node.shape.last().unwrap_or(&1);
                    acc(&mut grads, a, g.len(), |ga| {
                        if width == 0 {
                            return;
                        }
                        for ((gar, gr), yr) in ga
                            .chunks_exact_mut(width)
                            .zip(g.chunks_exact(width))
                            .zip(y.chunks_exact(width))
                        {
                            let inner = dot(gr, yr);
                            for ((x, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                *x += yi * (gi - inner);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = val(gamma).len();
                    let gv = val(gamma);
                    if want(gamma) {
                        acc(&mut grads, gamma, c, |gg| {
                            for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                                for ((x, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                                    *x += gi * hi;
                                }
                            }
                        });
                    }
                    if want(beta) {
                        acc(&mut grads, beta, c, |gb| {
                            for grow in g.chunks_exact(c) {
                                add_into(gb, grow);
                            }
                        });
                    }
                    if want(x) {
                        let inv_c = S::one() / S::of(c as f64);
                        acc(&mut grads, x, g.len(), |gx| {
                            let mut dxhat = vec![S::zero(); c];
                            for (r, ((gxr, grow), hrow)) in gx
                                .chunks_exact_mut(c)
                                .zip(g.chunks_exact(c))
                                .zip(xhat.chunks_exact(c))
                                .enumerate()
                            {
                                for j in 0..c {
                                    dxhat[j] = grow[j] * gv[j];
                                }
                                let sum_d: S = dxhat.iter().copied().sum();
                                let sum_dh = dot(&dxhat, hrow);
                                for j in 0..c {
                                    gxr[j] += rstd[r] * inv_c
                                        * (S::of(c as f64) * dxhat[j] - sum_d - hrow[j] * sum_dh);
                                }
                            }
                        });
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = shape(table)[1];
                    acc(&mut grads, table, val(table).len(), |gt| {
                        for (grow, &id) in g.chunks_exact(d.max(1)).zip(ids) {
                            add_into(&mut gt[id * d..(id + 1) * d], grow);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = shape(logits)[1];
                    let n = targets.len();
                    let coef = g[0] / S::of(n as f64);
                    let floor = S::of(CROSS_ENTROPY_FLOOR);
                    acc(&mut grads, logits, n * v, |gl| {
                        for (i, &t) in targets.iter().enumerate() {
                            let p = &probs[i * v..(i + 1) * v];
                            if p[t] < floor {
                                continue;
                            }
                            let row = &mut gl[i * v..(i + 1) * v];
                            for (x, &pj) in row.iter_mut().zip(p) {
                                *x += coef * pj;
                            }
                            row[t] -= coef;
                        }
                    });
                }
                Op::SumSquares(a) => {
                    let two_g = S::of(2.0) * g[0];
                    let av = val(a);
                    acc(&mut grads, a, av.len(), |ga| {
                        ga.iter_mut().zip(av).for_each(|(x, &ai)| *x += two_g * ai)
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(&mut grads, a, val(a).len(), |ga| ga.iter_mut().for_each(|x| *x += g0));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let d = shape(q)[1];
                    let dh = d / heads;
                    let scale = S::one() / S::of(dh as f64).sqrt();
                    let (qv, kv, vv) = (val(q), val(k), val(v));
                    let mut dq = vec![S::zero(); qv.len()];
                    let mut dk = vec![S::zero(); kv.len()];
                    let mut dv = vec![S::zero(); vv.len()];
                    let mut dp = vec![S::zero(); seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let pbase = (b * heads + h) * seq * seq;
                            for t in 0..seq {
                                let p = &probs[pbase + t * seq..pbase + t * seq + t + 1];
                                let grow = &g[(b * seq + t) * d + h * dh..][..dh];
                                for s in 0..=t {
                                    let off = (b * seq + s) * d + h * dh;
                                    dp[s] = dot(grow, &vv[off..off + dh]);
                                    let dvrow = &mut dv[off..off + dh];
                                    for (x, &gi) in dvrow.iter_mut().zip(grow) {
                                        *x += p[s] * gi;
                                    }
                                }
                                let inner = dot(&dp[..=t], p);
                                let qoff = (b * seq + t) * d + h * dh;
                                for s in 0..=t {
                                    let ds = p[s] * (dp[s] - inner) * scale;
                                    let koff = (b * seq + s) * d + h * dh;
                                    for j in 0..dh {
                                        dq[qoff + j] += ds * kv[koff + j];
                                        dk[koff + j] += ds * qv[qoff + j];
                                    }
                                }
                            }
                        }
                    }
                    for (var, gvec) in [(q, dq), (k, dk), (v, dv)] {
                        if want(var) {
                            acc(&mut grads, var, gvec.len(), |gx| add_into(gx, &gvec));
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], v: &Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = grads[v.idx as usize].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
