//! Tape of tensor operations with reverse-mode gradient propagation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are borrowed
//! from a [`ParamStore`] rather than copied; their gradients come back from
//! [`Graph::backward`] as a [`Gradients`] value that the caller folds into the
//! store with [`ParamStore::accumulate`].

use rand::Rng;

use super::kernels::{self, gemm, ROW_MAJOR, TRANSPOSED};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Target index excluded from the cross-entropy average.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Data {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Gelu(Var),
    Softmax(Var),
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        denom: f64,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Data,
    op: Op,
    requires_grad: bool,
}

/// Per-head additive score bias and boolean mask for [`Graph::attention`].
pub struct AttentionInputs<'a> {
    pub heads: usize,
    /// Multiplies `q·k` before the bias is added.
    pub scale: f64,
    /// `heads × n_q × n_k` additive terms, applied after `scale`.
    pub bias: Option<&'a [f64]>,
    /// `n_q × n_k`, `true` where attending is allowed.
    pub mask: Option<&'a [bool]>,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::standalone()
    }
}

impl Graph<'static> {
    /// A graph without parameters; inputs only.
    pub fn standalone() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Data::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].data {
            Data::Owned(d) => d,
            Data::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    /// Registers a constant (or gradient-tracked, per the tensor's flag) input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: Data::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            ROW_MAJOR(k),
            self.value(b),
            ROW_MAJOR(n),
            0.0,
            &mut out,
            ROW_MAJOR(n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` vector to every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(x);
        if self.value(bias).len() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// `x·w + b` for `x[n, in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Row lookup into `table[vocab, d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.embed_optional(table, ids)
    }

    /// Row lookup where `None` yields a zero row.
    pub fn embed_optional(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var> {
        let (vocab, d) = self.dims2(table);
        let mut out = vec![0.0; ids.len() * d];
        let t = self.value(table);
        for (row, id) in ids.iter().enumerate() {
            if let Some(i) = *id {
                if i >= vocab {
                    return Err(Error::Index {
                        what: "embedding table",
                        index: i,
                        size: vocab,
                    });
                }
                out[row * d..(row + 1) * d].copy_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            xhat,
            inv_std,
            bias,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Softmax over the last dimension; rows that are entirely `-inf` map to zeros.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.dims2(x);
        if d == 0 {
            return Err(Error::shape("softmax", self.shape(x), &[1]));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(d).for_each(kernels::softmax_row);
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((na, da), (nb, db)) = (self.dims2(a), self.dims2(b));
        if na != nb {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            out.extend_from_slice(&va[r * da..(r + 1) * da]);
            out.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![na, da + db], out, Op::ConcatCols(a, b), rg))
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q[n_q, d]`, `k[n_k, d]`, `v[n_k, d]`.
    ///
    /// Per head: `softmax(scale·q_h·k_hᵀ + bias_h, masked to -inf)·v_h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, inputs: &AttentionInputs) -> Result<Var> {
        let ((nq, d), (nk, dk), (nv, dv)) = (self.dims2(q), self.dims2(k), self.dims2(v));
        if d != dk || nk != nv || dv != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let heads = inputs.heads;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if let Some(b) = inputs.bias {
            if b.len() != heads * nq * nk {
                return Err(Error::shape("attention bias", &[heads, nq, nk], &[b.len()]));
            }
        }
        if let Some(m) = inputs.mask {
            if m.len() != nq * nk {
                return Err(Error::shape("attention mask", &[nq, nk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            let off = h * dh;
            gemm(
                nq,
                dh,
                nk,
                inputs.scale,
                &qv[off..],
                ROW_MAJOR(d),
                &kv[off..],
                TRANSPOSED(d),
                0.0,
                p,
                ROW_MAJOR(nk),
            );
            if let Some(b) = inputs.bias {
                let bh = &b[h * nq * nk..(h + 1) * nq * nk];
                p.iter_mut().zip(bh).for_each(|(s, b)| *s += b);
            }
            if let Some(m) = inputs.mask {
                p.iter_mut()
                    .zip(m)
                    .filter(|(_, &allowed)| !allowed)
                    .for_each(|(s, _)| *s = f64::NEG_INFINITY);
            }
            p.chunks_mut(nk).for_each(kernels::softmax_row);
            gemm(
                nq,
                nk,
                dh,
                1.0,
                p,
                ROW_MAJOR(nk),
                &vv[off..],
                ROW_MAJOR(d),
                0.0,
                &mut out[off..],
                ROW_MAJOR(d),
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            scale: inputs.scale,
            probs,
        };
        Ok(self.push(vec![nq, d], out, op, rg))
    }

    /// Mean negative log-likelihood over targets that are not [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let denom = targets.iter().filter(|&&t| t != IGNORE_INDEX).count() as f64;
        self.cross_entropy_with_denominator(logits, targets, denom)
    }

    /// Summed negative log-likelihood divided by a caller-supplied `denom`,
    /// used to average over a whole batch of graphs.
    pub fn cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        targets: &[usize],
        denom: f64,
    ) -> Result<Var> {
        let (n, c) = self.dims2(logits);
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= c {
                return Err(Error::Index {
                    what: "class targets",
                    index: t,
                    size: c,
                });
            }
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for (p, &zj) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (zj - lse).exp();
            }
        }
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            denom,
            probs,
        };
        Ok(self.push(Vec::new(), vec![loss], op, rg))
    }

    /// Propagates d(loss)/d(node) back to every gradient-tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.push((id, g));
                    }
                }
                Op::Leaf if node.requires_grad => {
                    if let Some(g) = grads[i].take() {
                        leaves.push((Var(i), g));
                    }
                }
                _ => {}
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let va = self.value(*b);
                    let ga = acc(grads, *a, m * k);
                    gemm(m, n, k, 1.0, g, ROW_MAJOR(n), va, TRANSPOSED(n), 1.0, ga, ROW_MAJOR(k));
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let gb = acc(grads, *b, k * n);
                    gemm(k, m, n, 1.0, va, TRANSPOSED(k), g, ROW_MAJOR(n), 1.0, gb, ROW_MAJOR(n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.rg(*bias) {
                    let d = self.value(*bias).len();
                    let gb = acc(grads, *bias, d);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).zip(vb).for_each(|((o, gi), y)| *o += gi * y);
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).zip(va).for_each(|((o, gi), x)| *o += gi * x);
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Gather { table, ids } => {
                let len = self.value(*table).len();
                let d = *self.shape(*table).last().unwrap_or(&1);
                let gt = acc(grads, *table, len);
                for (row, id) in ids.iter().enumerate() {
                    if let Some(t) = id {
                        add_into(&mut gt[t * d..(t + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(gr).zip(hr).for_each(|((o, a), b)| *o += a * b);
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, d);
                    g.chunks(d).for_each(|r| add_into(gb, r));
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        dxhat.iter_mut().zip(gr).zip(gv).for_each(|((o, a), b)| *o = a * b);
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv / df * (df * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx = acc(grads, *x, g.len());
                gx.iter_mut()
                    .zip(g)
                    .zip(vx)
                    .for_each(|((o, gi), &xi)| *o += gi * kernels::gelu_grad(xi));
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap_or(&1);
                let out = self.value(Var(i)).to_vec();
                let gx = acc(grads, *x, g.len());
                for ((p, dp), dx) in out.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    kernels::softmax_row_backward(p, dp, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = self.dims2(*a);
                let (_, db) = self.dims2(*b);
                let w = da + db;
                if self.rg(*a) {
                    let ga = acc(grads, *a, n * da);
                    for r in 0..n {
                        add_into(&mut ga[r * da..(r + 1) * da], &g[r * w..r * w + da]);
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, n * db);
                    for r in 0..n {
                        add_into(&mut gb[r * db..(r + 1) * db], &g[r * w + da..(r + 1) * w]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, g.len());
                gx.iter_mut().zip(g).zip(mask).for_each(|((o, gi), m)| *o += gi * m);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, *scale, probs),
            Op::CrossEntropy {
                logits,
                targets,
                denom,
                probs,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let c = *self.shape(*logits).last().unwrap_or(&1);
                let gl = acc(grads, *logits, probs.len());
                let f = g[0] / denom;
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let row = &mut gl[r * c..(r + 1) * c];
                    row.iter_mut()
                        .zip(&probs[r * c..(r + 1) * c])
                        .for_each(|(o, p)| *o += f * p);
                    row[t] -= f;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        scale: f64,
        probs: &[f64],
    ) {
        let ((nq, d), (nk, _)) = (self.dims2(q), self.dims2(k));
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nq * nk];
        let mut ds = vec![0.0; nq * nk];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV_h = Pᵀ · dO_h
            gemm(nk, nq, dh, 1.0, p, TRANSPOSED(nk), &g[off..], ROW_MAJOR(d), 1.0, &mut dv[off..], ROW_MAJOR(d));
            // dP = dO_h · V_hᵀ
            gemm(nq, dh, nk, 1.0, &g[off..], ROW_MAJOR(d), &vv[off..], TRANSPOSED(d), 0.0, &mut dp, ROW_MAJOR(nk));
            ds.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..nq {
                kernels::softmax_row_backward(
                    &p[r * nk..(r + 1) * nk],
                    &dp[r * nk..(r + 1) * nk],
                    &mut ds[r * nk..(r + 1) * nk],
                );
            }
            // dQ_h = scale · dS · K_h ; dK_h = scale · dSᵀ · Q_h
            gemm(nq, nk, dh, scale, &ds, ROW_MAJOR(nk), &kv[off..], ROW_MAJOR(d), 1.0, &mut dq[off..], ROW_MAJOR(d));
            gemm(nk, nq, dh, scale, &ds, TRANSPOSED(nk), &qv[off..], ROW_MAJOR(d), 1.0, &mut dk[off..], ROW_MAJOR(d));
        }
        for (var, gvec) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                add_into(acc(grads, var, gvec.len()), &gvec);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients of one backward pass, keyed by parameter or by input variable.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to an input created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g.as_slice())
    }
}
