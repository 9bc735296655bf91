//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid reverse topological order. `backward` walks it once, accumulating
//! into per-node gradient buffers in a fixed order.

use crate::error::{Error, Result};
use crate::tensor::{
    self, log_softmax_row, matmul_at, matmul_bt, rms_inverse, sigmoid, softmax_in_place, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    RmsNorm {
        x: NodeId,
        scale: NodeId,
        inv_rms: Vec<f32>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    Rope {
        x: NodeId,
        table: RopeTable,
        n_heads: usize,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttnLayout,
        probs: Vec<f32>,
    },
    TokenNll {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<f32>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch geometry for causal self-attention over `[batch·seq, d_model]` rows.
#[derive(Clone, Copy, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
}

/// Rotary position cos/sin tables, `[seq × head_dim/2]`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    seq: usize,
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(seq: usize, head_dim: usize, base: f32) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let freq = (base as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { seq, half, cos, sin }
    }
}

/// The recorded computation (the differentiation context).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `id`, or `None` when no path from the loss reached it.
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[id.0].clone(), g.clone()))
    }

    /// Gradient of `id`, zero-filled if backward never visited it.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        self.get(id).unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    /// Moves the gradient out, zero-filled if backward never visited it.
    pub fn take(&mut self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match self.grads[id.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, contribution: &[f32]) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (g, c) in buf.iter_mut().zip(contribution) {
        *g += c;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::silu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = tensor::softmax_rows(self.value(x));
        let ng = self.needs(&[x]);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn rmsnorm(&mut self, x: NodeId, scale: NodeId, eps: f32) -> Result<NodeId> {
        let xv = self.value(x);
        let value = tensor::rmsnorm(xv, self.value(scale), eps)?;
        let inv_rms = xv
            .data()
            .chunks(xv.cols())
            .map(|r| rms_inverse(r, eps))
            .collect();
        let ng = self.needs(&[x, scale]);
        Ok(self.push(value, Op::RmsNorm { x, scale, inv_rms }, ng))
    }

    /// Gathers rows of `table[vocab × d]` for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    position,
                    token: id,
                    vocab,
                });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        let ng = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Rotary position encoding on `[batch·seq, n_heads·head_dim]`; row `r` sits at position `r % seq`.
    pub fn rope(&mut self, x: NodeId, table: &RopeTable, n_heads: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if d != n_heads * table.half * 2 || xv.rows() % table.seq != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![table.seq, n_heads * table.half * 2],
            });
        }
        let mut data = xv.data().to_vec();
        rotate(&mut data, d, table, n_heads, false);
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                table: table.clone(),
                n_heads,
            },
            ng,
        ))
    }

    /// Multi-head causal softmax attention; q, k, v are `[batch·seq, d_model]`.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttnLayout,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let rows = layout.batch * layout.seq;
        for t in [kv, vv] {
            if t.shape() != qv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    lhs: qv.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if qv.rows() != rows || d % layout.n_heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                lhs: qv.shape().to_vec(),
                rhs: vec![rows, d],
            });
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), d, layout);
        let value = Tensor::from_parts(vec![rows, d], out);
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// `Σ_t weights[t] · (−log softmax(logits[t])[targets[t]])` as a scalar.
    pub fn token_nll(&mut self, logits: NodeId, targets: &[u32], weights: &[f32]) -> Result<NodeId> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if lv.rows() != targets.len() || targets.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "token_nll",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = 0.0f32;
        for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
            if target as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    position: t,
                    token: target,
                    vocab,
                });
            }
            let row = lv.row(t);
            if w != 0.0 {
                let lp = log_softmax_row(row);
                total += w * -lp[target as usize];
            }
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.extend(p);
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::TokenNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let nn = bv.cols();
                if self.wants(*a) {
                    let da = matmul_bt(g, bv.data(), m, nn, k);
                    accumulate(&mut grads[a.0], m * k, &da);
                }
                if self.wants(*b) {
                    let db = matmul_at(av.data(), g, m, k, nn);
                    accumulate(&mut grads[b.0], k * nn, &db);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(*id) {
                        accumulate(&mut grads[id.0], g.len(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da: Vec<f32> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], g.len(), &da);
                }
                if self.wants(*b) {
                    let db: Vec<f32> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], g.len(), &db);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut grads[x.0], g.len(), &dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(0.0f32, |acc, (y, g)| acc + y * g);
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(&mut grads[x.0], g.len(), &dx);
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                accumulate(&mut grads[x.0], len, &vec![g[0]; len]);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let xv = self.value(*x);
                let sv = self.value(*scale).data();
                let cols = xv.cols();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xv.numel());
                    for ((xr, gr), &r) in xv.data().chunks(cols).zip(g.chunks(cols)).zip(inv_rms) {
                        let dot = xr
                            .iter()
                            .zip(gr)
                            .zip(sv)
                            .fold(0.0f32, |acc, ((x, g), s)| acc + g * s * x);
                        let coef = r * r * r * dot / cols as f32;
                        dx.extend(
                            xr.iter()
                                .zip(gr)
                                .zip(sv)
                                .map(|((x, g), s)| r * s * g - coef * x),
                        );
                    }
                    accumulate(&mut grads[x.0], xv.numel(), &dx);
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0f32; cols];
                    for ((xr, gr), &r) in xv.data().chunks(cols).zip(g.chunks(cols)).zip(inv_rms) {
                        for ((d, x), g) in ds.iter_mut().zip(xr).zip(gr) {
                            *d += g * x * r;
                        }
                    }
                    accumulate(&mut grads[scale.0], cols, &ds);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let buf = grads[table.0].get_or_insert_with(|| vec![0.0; tv.numel()]);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id as usize * d..(id as usize + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::Rope { x, table, n_heads } => {
                let mut dx = g.to_vec();
                rotate(&mut dx, node.value.cols(), table, *n_heads, true);
                accumulate(&mut grads[x.0], g.len(), &dx);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = node.value.cols();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    d,
                    *layout,
                );
                for (id, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(*id) {
                        accumulate(&mut grads[id.0], g.len(), &d);
                    }
                }
            }
            Op::TokenNll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let mut dl = vec![0.0f32; probs.len()];
                for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut dl[t * vocab..(t + 1) * vocab];
                    for (o, p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                        *o = scale * p;
                    }
                    row[target as usize] -= scale;
                }
                accumulate(&mut grads[logits.0], dl.len(), &dl);
            }
        }
    }
}

fn rotate(data: &mut [f32], d: usize, table: &RopeTable, n_heads: usize, inverse: bool) {
    let half = table.half;
    let head_dim = 2 * half;
    for (r, row) in data.chunks_mut(d).enumerate() {
        let pos = r % table.seq;
        let cos = &table.cos[pos * half..(pos + 1) * half];
        let sin = &table.sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn attention_forward(q: &[f32], k: &[f32], v: &[f32], d: usize, layout: AttnLayout) -> (Vec<f32>, Vec<f32>) {
    let AttnLayout { batch, seq, n_heads } = layout;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; batch * seq * d];
    let mut probs = vec![0.0f32; batch * n_heads * seq * seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let p_base = (b * n_heads + h) * seq * seq;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + h * dh..][..dh];
                let prow = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                for (j, p) in prow.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * seq + j) * d + h * dh..][..dh];
                    *p = qi.iter().zip(kj).fold(0.0f32, |acc, (a, b)| acc + a * b) * scale;
                }
                softmax_in_place(&mut prow[..=i]);
                let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                for (j, &p) in prow.iter().enumerate().take(i + 1) {
                    let vj = &v[(b * seq + j) * d + h * dh..][..dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    g: &[f32],
    d: usize,
    layout: AttnLayout,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let AttnLayout { batch, seq, n_heads } = layout;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let mut dp = vec![0.0f32; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let p_base = (b * n_heads + h) * seq * seq;
            for i in 0..seq {
                let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                let prow = &probs[p_base + i * seq..][..=i];
                for j in 0..=i {
                    let off = (b * seq + j) * d + h * dh;
                    let vj = &v[off..off + dh];
                    dp[j] = gi.iter().zip(vj).fold(0.0f32, |acc, (a, b)| acc + a * b);
                    for (o, x) in dv[off..off + dh].iter_mut().zip(gi) {
                        *o += prow[j] * x;
                    }
                }
                let dot = prow
                    .iter()
                    .zip(&dp[..=i])
                    .fold(0.0f32, |acc, (p, x)| acc + p * x);
                let qoff = (b * seq + i) * d + h * dh;
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let koff = (b * seq + j) * d + h * dh;
                    for t in 0..dh {
                        dq[qoff + t] += ds * k[koff + t];
                        dk[koff + t] += ds * q[qoff + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
