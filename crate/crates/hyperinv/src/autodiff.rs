//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a per-step arena of nodes. Forward calls append nodes;
//! [`Graph::backward`] walks the arena in reverse and accumulates
//! gradients. Graphs are built, differentiated and discarded once per
//! optimizer step.
//!
//! The distinguishing requirement is that layer weights may themselves be
//! non-leaf nodes: a conv kernel can be the reshaped output of another
//! network, and gradients flow through it into that network's inputs.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, par_rows, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRowBias { x: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Reshape(NodeId),
    ConcatRows(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanOf(Vec<NodeId>),
    RowL2Normalize { x: NodeId, norms: Vec<f64> },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Batch statistics produced by a train-mode batchnorm node, handed back
/// so the owning layer can update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalization mode for [`Graph::batchnorm2d`].
pub enum BnMode<'a> {
    Train,
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        id
    }

    /// Insert a leaf copied from a tensor; `requires_grad` is taken from it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, false, Op::Leaf)
    }

    #[inline]
    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    #[inline]
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Snapshot a node's value as a tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone()).unwrap()
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Elementwise and linear ops ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    /// x[R,C] + bias[C], broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::shape("add_row_bias", xs, bs));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(data, vec![r, c], rg, Op::AddRowBias { x, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Scale(a, factor))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    /// a[M,K] @ b[K,N] -> [M,N].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul(a, b)))
    }

    /// a[M,K] @ b[N,K]^T -> [M,N].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        matmul_nt_into(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![m, n], rg, Op::MatMulNT(a, b)))
    }

    /// linear(input[B,D], weight[D,O], bias[O]) -> logits [B,O].
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::shape("reshape", &shape, self.shape(a)));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Reshape(a)))
    }

    /// Concatenate along axis 0; trailing dims must match.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_rows", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::ConcatRows(a, b)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s / n], vec![1], rg, Op::MeanAll(a))
    }

    /// Elementwise mean of same-shape nodes.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("mean_of zero nodes"))?;
        let shape = self.nodes[first.0].shape.clone();
        for &x in xs {
            if self.nodes[x.0].shape != shape {
                return Err(Error::shape("mean_of", &shape, self.shape(x)));
            }
        }
        let m = xs.len() as f64;
        let mut data = vec![0.0; self.nodes[first.0].data.len()];
        for &x in xs {
            for (d, v) in data.iter_mut().zip(&self.nodes[x.0].data) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= m;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(data, shape, rg, Op::MeanOf(xs.to_vec())))
    }

    /// Row-wise L2 normalization of [R,C]; norms floored at 1e-12.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("row_l2_normalize", &[0, 0], sa));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut norms = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x / n;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![r, c], rg, Op::RowL2Normalize { x: a, norms }))
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// Cross-correlation of input[B,C,H,W] with kernel[F,C,kh,kw].
    ///
    /// The kernel may be any node, including the reshaped output of
    /// another computation; gradients flow into it.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", &[0, 0, 0, 0], &si));
        }
        if si[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "conv2d input channels {} != kernel channels {} (input {:?}, kernel {:?})",
                    si[1], sk[1], si, sk
                ),
                expected: sk.clone(),
                got: si.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::contract(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(bn) = bias {
            let sb = self.shape(bn);
            if sb != [f] {
                return Err(Error::shape("conv2d bias", &[f], sb));
            }
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let patch = h_out * w_out;
        let ckk = c * kh * kw;

        let cols = im2col(
            &self.nodes[input.0].data,
            b,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        );
        // out_mat[b*patch + p, f] = cols row . kernel row
        let mut out_mat = vec![0.0; b * patch * f];
        matmul_nt_into(&mut out_mat, &cols, &self.nodes[kernel.0].data, b * patch, ckk, f);

        // Rearrange [B*P, F] -> [B, F, P] and add bias.
        let mut data = vec![0.0; b * f * patch];
        let bias_data = bias.map(|bn| self.nodes[bn.0].data.clone());
        for bi in 0..b {
            for p in 0..patch {
                let src = &out_mat[(bi * patch + p) * f..(bi * patch + p + 1) * f];
                for (fi, &v) in src.iter().enumerate() {
                    let vb = match &bias_data {
                        Some(bd) => v + bd[fi],
                        None => v,
                    };
                    data[(bi * f + fi) * patch + p] = vb;
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.map(|bn| self.rg(bn)).unwrap_or(false);
        Ok(self.push(
            data,
            vec![b, f, h_out, w_out],
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Per-channel normalization of x[B,C,H,W]. Train mode normalizes by
    /// batch statistics (returned so the caller can update its running
    /// estimates); eval mode uses the provided running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("batchnorm2d", &[0, 0, 0, 0], &sx));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if b == 0 {
            return Err(Error::contract("batchnorm2d on an empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm2d gamma/beta", &[c], self.shape(gamma)));
        }
        let n = b * h * w;
        let plane = h * w;
        let src = &self.nodes[x.0].data;

        let (mean, var, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::contract(format!(
                        "batchnorm2d train mode needs at least 2 values per channel, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for v in &src[base..base + plane] {
                            s += v;
                        }
                    }
                    let mu = s / n as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for v in &src[base..base + plane] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = sq / n as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batchnorm2d running stats", &[c], &[running_mean.len()]));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], g[ci], bt[ci]);
                for (o, v) in data[base..base + plane].iter_mut().zip(&src[base..base + plane]) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            data,
            sx,
            rg,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        );
        Ok((id, stats))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean cross-entropy of softmax(logits[B,O]) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", &[0, 0], &sl));
        }
        let (b, o) = (sl[0], sl[1]);
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy labels", &[b], &[labels.len()]));
        }
        for &y in labels {
            if y >= o {
                return Err(Error::LabelOutOfRange { label: y, classes: o });
            }
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; b * o];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &src[i * o..(i + 1) * o];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * o..(i + 1) * o].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in probs[i * o..(i + 1) * o].iter_mut() {
                *p /= z;
            }
            loss -= row[labels[i]] - max - z.ln();
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate for every
    /// node with `requires_grad` that participated, leaves and
    /// intermediates (generated weights) alike.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward on non-scalar node of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward on a node with no differentiable inputs",
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;

        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(grads, nodes, *a, &g);
                    accumulate(grads, nodes, *b, &g);
                }
                Op::AddRowBias { x, bias } => {
                    accumulate(grads, nodes, *x, &g);
                    if nodes[bias.0].requires_grad {
                        let c = nodes[bias.0].data.len();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, nodes, *bias, &db);
                    }
                }
                Op::Scale(a, f) => {
                    let da: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(grads, nodes, *a, &da);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&nodes[b.0].data).map(|(v, y)| v * y).collect();
                        accumulate(grads, nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&nodes[a.0].data).map(|(v, x)| v * x).collect();
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_nt_into(&mut da, &g, &nodes[b.0].data, m, n, k);
                        accumulate(grads, nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_tn_into(&mut db, &nodes[a.0].data, &g, m, k, n);
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[0];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_into(&mut da, &g, &nodes[b.0].data, m, n, k);
                        accumulate(grads, nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; n * k];
                        matmul_tn_into(&mut db, &g, &nodes[a.0].data, m, n, k);
                        accumulate(grads, nodes, *b, &db);
                    }
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a.0].data)
                        .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                        .collect();
                    accumulate(grads, nodes, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[id].data)
                        .map(|(v, &y)| v * y * (1.0 - y))
                        .collect();
                    accumulate(grads, nodes, *a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[id].data)
                        .map(|(v, &y)| v * (1.0 - y * y))
                        .collect();
                    accumulate(grads, nodes, *a, &da);
                }
                Op::Reshape(a) => {
                    accumulate(grads, nodes, *a, &g);
                }
                Op::ConcatRows(a, b) => {
                    let na = nodes[a.0].data.len();
                    accumulate(grads, nodes, *a, &g[..na]);
                    accumulate(grads, nodes, *b, &g[na..]);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; nodes[a.0].data.len()];
                    accumulate(grads, nodes, *a, &da);
                }
                Op::MeanAll(a) => {
                    let v = g[0] / nodes[a.0].data.len() as f64;
                    let da = vec![v; nodes[a.0].data.len()];
                    accumulate(grads, nodes, *a, &da);
                }
                Op::MeanOf(xs) => {
                    let da: Vec<f64> = g.iter().map(|v| v / xs.len() as f64).collect();
                    for &x in xs {
                        accumulate(grads, nodes, x, &da);
                    }
                }
                Op::RowL2Normalize { x, norms } => {
                    let c = nodes[id].shape[1];
                    let y = &nodes[id].data;
                    let mut dx = vec![0.0; y.len()];
                    for (i, n) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dx[i * c..(i + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * dot) / n;
                        }
                    }
                    accumulate(grads, nodes, *x, &dx);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    conv2d_backward(grads, nodes, id, *input, *kernel, *bias, *stride, *padding, &g);
                }
                Op::BatchNorm2d {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    batchnorm_backward(grads, nodes, id, *x, *gamma, *beta, mean, inv_std, *train, &g);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let o = nodes[logits.0].shape[1];
                    let b = labels.len();
                    let scale = g[0] / b as f64;
                    let mut dl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * o + y] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(grads, nodes, *logits, &dl);
                }
            }
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: &[f64]) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].data.len()]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let patch = h_out * w_out;
    let ckk = c * kh * kw;
    let mut cols = vec![0.0; b * patch * ckk];
    par_rows(&mut cols, patch * ckk, 1, |b0, chunk| {
        for (local, dst) in chunk.chunks_mut(patch * ckk).enumerate() {
            let bi = b0 + local;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let p = oy * w_out + ox;
                    let row = &mut dst[p * ckk..(p + 1) * ckk];
                    for ci in 0..c {
                        for dy in 0..kh {
                            let y = (oy * stride + dy) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let src_base = ((bi * c + ci) * h + y as usize) * w;
                            for dx in 0..kw {
                                let x = (ox * stride + dx) as isize - padding as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                row[(ci * kh + dy) * kw + dx] = input[src_base + x as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    out: usize,
    input: NodeId,
    kernel: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    padding: usize,
    g: &[f64],
) {
    let si = &nodes[input.0].shape;
    let sk = &nodes[kernel.0].shape;
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (f, kh, kw) = (sk[0], sk[2], sk[3]);
    let (h_out, w_out) = (nodes[out].shape[2], nodes[out].shape[3]);
    let patch = h_out * w_out;
    let ckk = c * kh * kw;

    // g is [B, F, P]; flip to [B*P, F].
    let mut g_mat = vec![0.0; b * patch * f];
    for bi in 0..b {
        for fi in 0..f {
            let src = &g[(bi * f + fi) * patch..(bi * f + fi + 1) * patch];
            for (p, &v) in src.iter().enumerate() {
                g_mat[(bi * patch + p) * f + fi] = v;
            }
        }
    }

    if let Some(bn) = bias {
        if nodes[bn.0].requires_grad {
            let mut db = vec![0.0; f];
            for row in g_mat.chunks(f) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, bn, &db);
        }
    }

    let need_input = nodes[input.0].requires_grad;
    let need_kernel = nodes[kernel.0].requires_grad;
    if !need_input && !need_kernel {
        return;
    }

    if need_kernel {
        let cols = im2col(
            &nodes[input.0].data,
            b,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        );
        let mut dk = vec![0.0; f * ckk];
        matmul_tn_into(&mut dk, &g_mat, &cols, b * patch, f, ckk);
        accumulate(grads, nodes, kernel, &dk);
    }

    if need_input {
        // d_cols = g_mat @ kernel_mat, then scatter back (col2im).
        let mut d_cols = vec![0.0; b * patch * ckk];
        matmul_into(&mut d_cols, &g_mat, &nodes[kernel.0].data, b * patch, f, ckk);
        let mut dx = vec![0.0; b * c * h * w];
        par_rows(&mut dx, c * h * w, 1, |b0, chunk| {
            for (local, dst) in chunk.chunks_mut(c * h * w).enumerate() {
                let bi = b0 + local;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let p = oy * w_out + ox;
                        let row = &d_cols[((bi * patch) + p) * ckk..((bi * patch) + p + 1) * ckk];
                        for ci in 0..c {
                            for dy in 0..kh {
                                let y = (oy * stride + dy) as isize - padding as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for dx_i in 0..kw {
                                    let x = (ox * stride + dx_i) as isize - padding as isize;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    dst[(ci * h + y as usize) * w + x as usize] +=
                                        row[(ci * kh + dy) * kw + dx_i];
                                }
                            }
                        }
                    }
                }
            }
        });
        accumulate(grads, nodes, input, &dx);
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    _out: usize,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mean: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &[f64],
) {
    let s = &nodes[x.0].shape;
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let n = (b * plane) as f64;
    let src = &nodes[x.0].data;
    let gam = &nodes[gamma.0].data;

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (mu, is) = (mean[ci], inv_std[ci]);
            for (gv, xv) in g[base..base + plane].iter().zip(&src[base..base + plane]) {
                let xhat = (xv - mu) * is;
                dbeta[ci] += gv;
                dgamma[ci] += gv * xhat;
                sum_g[ci] += gv;
                sum_gx[ci] += gv * xhat;
            }
        }
    }

    if nodes[x.0].requires_grad {
        let mut dx = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, is, ga) = (mean[ci], inv_std[ci], gam[ci]);
                if train {
                    let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
                    for ((d, gv), xv) in dx[base..base + plane]
                        .iter_mut()
                        .zip(&g[base..base + plane])
                        .zip(&src[base..base + plane])
                    {
                        let xhat = (xv - mu) * is;
                        *d = ga * is * (gv - sg / n - xhat * sgx / n);
                    }
                } else {
                    for (d, gv) in dx[base..base + plane].iter_mut().zip(&g[base..base + plane]) {
                        *d = ga * is * gv;
                    }
                }
            }
        }
        accumulate(grads, nodes, x, &dx);
    }
    accumulate(grads, nodes, gamma, &dgamma);
    accumulate(grads, nodes, beta, &dbeta);
}

/// Normalized-temperature cross-entropy over two views of the same batch.
///
/// `z1` and `z2` are [B,D] embeddings of two augmentations of the same B
/// images. Embeddings are L2-normalized, the 2Bx2B cosine-similarity
/// matrix is scaled by 1/temperature, self-similarities are masked out,
/// and each row's positive is its counterpart in the other view.
pub fn nt_xent_loss(g: &mut Graph, z1: NodeId, z2: NodeId, temperature: f64) -> Result<NodeId> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape("nt_xent_loss", &s1, &s2));
    }
    let b = s1[0];
    if b < 2 {
        return Err(Error::contract(format!(
            "nt_xent_loss needs batch >= 2 (no negatives exist for batch {b})"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::contract("nt_xent_loss temperature must be positive"));
    }
    let z = g.concat_rows(z1, z2)?;
    let zn = g.row_l2_normalize(z)?;
    let sim = g.matmul_nt(zn, zn)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let m = 2 * b;
    let mut mask = vec![0.0; m * m];
    for i in 0..m {
        mask[i * m + i] = -1e9;
    }
    let mask = g.constant(vec![m, m], mask);
    let masked = g.add(logits, mask)?;
    let labels: Vec<usize> = (0..m).map(|r| (r + b) % m).collect();
    g.softmax_cross_entropy(masked, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, -2.0, 5.0]).with_grad());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_as_activations_grad_matches_chain_rule() {
        // loss = <w, x> with w = M . i  =>  d loss / d i = M^T x
        let mut g = Graph::new();
        let i = g.leaf(&t(&[1, 2], &[0.3, -0.7]).with_grad());
        let m = g.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = g.leaf(&t(&[3, 1], &[0.5, -1.5, 2.0]));
        let w = g.matmul(i, m).unwrap(); // [1,3]
        let loss_mat = g.matmul(w, x).unwrap(); // [1,1]
        let loss = g.sum_all(loss_mat);
        g.backward(loss).unwrap();
        // M^T x = [1*0.5+2*-1.5+3*2, 4*0.5+5*-1.5+6*2] = [3.5, 6.5]
        let gi = g.grad(i).unwrap();
        assert!((gi[0] - 3.5).abs() < 1e-12);
        assert!((gi[1] - 6.5).abs() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = g.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.data(y), &[1.0; 9]);
    }

    #[test]
    fn conv2d_known_strided_sum() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.leaf(&t(&[1, 1, 4, 4], &data));
        let k = g.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = g.conv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.data(y), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn conv2d_output_shape_formula() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 3, 28, 28]));
        let k = g.leaf(&Tensor::zeros(vec![16, 3, 5, 5]));
        let y = g.conv2d(x, k, None, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 14, 14]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![1, 2, 5, 5]));
        let k = g.leaf(&Tensor::zeros(vec![4, 3, 3, 3]));
        let err = g.conv2d(x, k, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn batchnorm_train_centers_channels() {
        let mut g = Graph::new();
        let mut rng = Rng::new(17);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.uniform(-2.0, 3.0)).collect();
        let x = g.leaf(&t(&[2, 3, 4, 4], &data));
        let gamma = g.leaf(&t(&[3], &[1.0; 3]));
        let beta = g.leaf(&t(&[3], &[0.0; 3]));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        let out = g.data(y);
        for c in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for p in 0..16 {
                    s += out[(b * 3 + c) * 16 + p];
                }
            }
            assert!((s / 32.0).abs() < 1e-9, "channel mean {}", s / 32.0);
        }
    }

    #[test]
    fn batchnorm_constant_input_collapses_to_beta() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 1, 2, 2], &[3.0; 8]));
        let gamma = g.leaf(&t(&[1], &[1.0]));
        let beta = g.leaf(&t(&[1], &[5.0]));
        let (y, _) = g.batchnorm2d(x, gamma, beta, BnMode::Train, 1e-5).unwrap();
        for v in g.data(y) {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 1, 1], &[4.0]));
        let gamma = g.leaf(&t(&[1], &[1.0]));
        let beta = g.leaf(&t(&[1], &[0.0]));
        let (y, stats) = g
            .batchnorm2d(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    running_mean: &[2.0],
                    running_var: &[4.0],
                },
                1e-5,
            )
            .unwrap();
        assert!(stats.is_none());
        let expect = (4.0 - 2.0) / (4.0_f64 + 1e-5).sqrt();
        assert!((g.data(y)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut g = Graph::new();
        let logits = g.leaf(&t(&[2, 5], &[0.7; 10]));
        let loss = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert_eq!(g.scalar(loss), (5.0_f64).ln());
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut g = Graph::new();
        let logits = g.leaf(&t(&[1, 3], &[50.0, 0.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(g.scalar(loss) < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut g = Graph::new();
        let logits = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let loss = g.softmax_cross_entropy(logits, &[1]).unwrap();
        let expect = -(2.0_f64.exp() / (1.0_f64.exp() + 2.0_f64.exp())).ln();
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
        assert!((g.scalar(loss) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(&t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    // Direct 4x4 similarity-matrix oracle for NT-Xent with B=2.
    fn nt_xent_oracle(z: &[[f64; 3]; 4], temp: f64) -> f64 {
        let norm = |v: &[f64; 3]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let zn: Vec<[f64; 3]> = z.iter().map(norm).collect();
        let mut loss = 0.0;
        for a in 0..4 {
            let pos = (a + 2) % 4;
            let mut denom = 0.0;
            let mut num = 0.0;
            for c in 0..4 {
                if c == a {
                    continue;
                }
                let s: f64 = (0..3).map(|d| zn[a][d] * zn[c][d]).sum();
                let e = (s / temp).exp();
                denom += e;
                if c == pos {
                    num = e;
                }
            }
            loss -= (num / denom).ln();
        }
        loss / 4.0
    }

    #[test]
    fn nt_xent_identical_embeddings_matches_oracle() {
        let e = [0.5, -0.25, 1.0];
        let z = [e, e, e, e];
        let expect = nt_xent_oracle(&z, 1.0);
        // All candidates tie, so the oracle value is ln(3).
        assert!((expect - 3.0_f64.ln()).abs() < 1e-12);
        let mut g = Graph::new();
        let z1 = g.leaf(&t(&[2, 3], &[e[0], e[1], e[2], e[0], e[1], e[2]]));
        let z2 = g.leaf(&t(&[2, 3], &[e[0], e[1], e[2], e[0], e[1], e[2]]));
        let loss = nt_xent_loss(&mut g, z1, z2, 1.0).unwrap();
        assert!((g.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn nt_xent_orthogonal_aligned_pairs_match_oracle() {
        // Positives aligned, negatives orthogonal, temperature 0.5.
        let z = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let expect = nt_xent_oracle(&z, 0.5);
        let mut g = Graph::new();
        let z1 = g.leaf(&t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let z2 = g.leaf(&t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let loss = nt_xent_loss(&mut g, z1, z2, 0.5).unwrap();
        assert!((g.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn nt_xent_swap_symmetry() {
        let mut rng = Rng::new(23);
        let a: Vec<f64> = (0..3 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..3 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let run = |x: &[f64], y: &[f64]| {
            let mut g = Graph::new();
            let z1 = g.leaf(&t(&[3, 4], x));
            let z2 = g.leaf(&t(&[3, 4], y));
            let loss = nt_xent_loss(&mut g, z1, z2, 0.7).unwrap();
            g.scalar(loss)
        };
        assert!((run(&a, &b) - run(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_batch_of_one_is_contract_error() {
        let mut g = Graph::new();
        let z1 = g.leaf(&t(&[1, 3], &[1.0, 0.0, 0.0]));
        let z2 = g.leaf(&t(&[1, 3], &[0.0, 1.0, 0.0]));
        assert!(matches!(
            nt_xent_loss(&mut g, z1, z2, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let build = || {
            let mut rng = Rng::new(99);
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::uniform(vec![2, 3, 8, 8], 1.0, &mut rng));
            let k = g.leaf(&Tensor::uniform(vec![4, 3, 3, 3], 0.5, &mut rng));
            let y = g.conv2d(x, k, None, 2, 1).unwrap();
            let gamma = g.leaf(&t(&[4], &[1.0; 4]));
            let beta = g.leaf(&t(&[4], &[0.0; 4]));
            let (bn, _) = g.batchnorm2d(y, gamma, beta, BnMode::Train, 1e-5).unwrap();
            let r = g.relu(bn);
            let m = g.mean_all(r);
            g.scalar(m)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    // ── Finite-difference checks for every differentiable op ────────

    #[test]
    fn gradcheck_elementwise_and_linear_ops() {
        let mut rng = Rng::new(7);
        let x = Tensor::uniform(vec![3, 4], 1.0, &mut rng).with_grad();
        let w = Tensor::uniform(vec![4, 2], 1.0, &mut rng).with_grad();
        let b = Tensor::uniform(vec![2], 1.0, &mut rng).with_grad();
        let params = vec![x, w, b];
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let x = g.leaf(&p[0]);
            let w = g.leaf(&p[1]);
            let b = g.leaf(&p[2]);
            let y = g.linear(x, w, Some(b))?;
            let s = g.sigmoid(y);
            let r = g.relu(s);
            let h = g.tanh(r);
            let sq = g.mul(h, h)?;
            let sc = g.scale(sq, 1.7);
            let loss = g.mean_all(sc);
            Ok(gradcheck::Built {
                graph: g,
                loss,
                params: vec![x, w, b],
            })
        };
        let report = gradcheck::check(f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_conv_bn_softmax_stack() {
        let mut rng = Rng::new(13);
        let x = Tensor::uniform(vec![2, 2, 6, 6], 1.0, &mut rng).with_grad();
        let k = Tensor::uniform(vec![3, 2, 3, 3], 0.5, &mut rng).with_grad();
        let cb = Tensor::uniform(vec![3], 0.5, &mut rng).with_grad();
        let gamma = Tensor::uniform(vec![3], 0.5, &mut rng).with_grad();
        let beta = Tensor::uniform(vec![3], 0.5, &mut rng).with_grad();
        let head = Tensor::uniform(vec![27, 4], 0.5, &mut rng).with_grad();
        let params = vec![x, k, cb, gamma, beta, head];
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = p.iter().map(|t| g.leaf(t)).collect();
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
            let (bn, _) = g.batchnorm2d(y, ids[3], ids[4], BnMode::Train, 1e-3)?;
            let r = g.relu(bn);
            let flat = g.reshape(r, vec![2, 27])?;
            let logits = g.matmul(flat, ids[5])?;
            let loss = g.softmax_cross_entropy(logits, &[1, 3])?;
            Ok(gradcheck::Built {
                graph: g,
                loss,
                params: ids,
            })
        };
        let report = gradcheck::check(f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_nt_xent_and_normalize() {
        let mut rng = Rng::new(29);
        let z1 = Tensor::uniform(vec![3, 5], 1.0, &mut rng).with_grad();
        let z2 = Tensor::uniform(vec![3, 5], 1.0, &mut rng).with_grad();
        let params = vec![z1, z2];
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let a = g.leaf(&p[0]);
            let b = g.leaf(&p[1]);
            let loss = nt_xent_loss(&mut g, a, b, 0.5)?;
            Ok(gradcheck::Built {
                graph: g,
                loss,
                params: vec![a, b],
            })
        };
        let report = gradcheck::check(f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_concat_mean_of_eval_bn() {
        let mut rng = Rng::new(31);
        let a = Tensor::uniform(vec![2, 1, 4, 4], 1.0, &mut rng).with_grad();
        let gamma = Tensor::uniform(vec![1], 0.5, &mut rng).with_grad();
        let beta = Tensor::uniform(vec![1], 0.5, &mut rng).with_grad();
        let params = vec![a, gamma, beta];
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let a = g.leaf(&p[0]);
            let gamma = g.leaf(&p[1]);
            let beta = g.leaf(&p[2]);
            let (bn, _) = g.batchnorm2d(
                a,
                gamma,
                beta,
                BnMode::Eval {
                    running_mean: &[0.3],
                    running_var: &[1.4],
                },
                1e-5,
            )?;
            let flat = g.reshape(bn, vec![2, 16])?;
            let flat2 = g.relu(flat);
            let catted = g.concat_rows(flat, flat2)?;
            let halves = [catted, catted];
            let avg = g.mean_of(&halves)?;
            let loss = g.mean_all(avg);
            Ok(gradcheck::Built {
                graph: g,
                loss,
                params: vec![a, gamma, beta],
            })
        };
        let report = gradcheck::check(f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
