//! Tape-style compute graph.
//!
//! Operations append nodes in construction order, so the node list is a
//! topological order by construction and [`Graph::backward`] is a single
//! reverse sweep. Gradients accumulate with `+=` into each node's grad
//! buffer; a tensor used k times in the graph therefore ends up with the
//! sum of its k single-use gradients. That accumulation is what makes a
//! recurrently applied (weight-tied) layer trainable without any extra
//! bookkeeping.
//!
//! Matrix products are backed by the `matrixmultiply` GEMM kernels; all
//! other kernels are plain sequential loops, so results are bitwise
//! reproducible for a given build and input.

use super::{broadcast_shapes, strides_for, Rng, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
pub enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: T,
    },
    Relu {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    Reshape {
        x: TensorId,
    },
    Permute {
        x: TensorId,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        gold: Vec<usize>,
        epsilon: f64,
        pad_id: usize,
        probs: Vec<T>,
        n_active: usize,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Acyclic record of tensor operations; inputs always precede outputs.
/// One graph is confined to a single thread of execution.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes of the given op kind, e.g. `"layer_norm"`.
    pub fn op_count(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Insert a tensor as a graph input. Gradient is tracked iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Insert a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn out(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, needs_grad))
    }

    // ── forward operations ─────────────────────────────────────────────

    /// Matrix product with broadcasting over leading (batch) dimensions.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b.T` over the last two dimensions; used for attention scores
    /// and tied output projections without materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(
        &mut self,
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    ) -> Result<TensorId, TensorError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (brows, bcols) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let (bk, n) = if trans_b { (bcols, brows) } else { (brows, bcols) };
        if k != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let a_lead = &ashape[..ashape.len() - 2];
        let b_lead = &bshape[..bshape.len() - 2];
        let lead = broadcast_shapes("matmul", a_lead, b_lead)?;
        let mut out_shape = lead.clone();
        out_shape.extend_from_slice(&[m, n]);

        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        batched_gemm(
            self.value(a).data(),
            a_lead,
            m,
            k,
            false,
            self.value(b).data(),
            b_lead,
            brows,
            bcols,
            trans_b,
            &mut data,
            &lead,
            &lead,
            m,
            n,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        self.out(out_shape, data, Op::Matmul { a, b, trans_b }, needs)
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (shape, data) = binary_broadcast(
            "add",
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            |x, y| x + y,
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.out(shape, data, Op::Add { a, b }, needs)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (shape, data) = binary_broadcast(
            "mul",
            self.value(a).data(),
            self.shape(a),
            self.value(b).data(),
            self.shape(b),
            |x, y| x * y,
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.out(shape, data, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let factor = T::from_f64(factor);
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Scale { x, factor }, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Relu { x }, needs)
    }

    /// Max-subtracted softmax along `axis`. Rows sum to one; NaN input is
    /// rejected rather than propagated.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let xv = self.value(x).data();
        if xv.iter().any(|v| v.is_nan_val()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut m = xv[base];
                for l in 1..lane {
                    m = m.maximum(xv[base + l * inner]);
                }
                let mut z = T::ZERO;
                for l in 0..lane {
                    let e = (xv[base + l * inner] - m).exp();
                    data[base + l * inner] = e;
                    z += e;
                }
                for l in 0..lane {
                    data[base + l * inner] = data[base + l * inner] / z;
                }
            }
        }
        let needs = self.needs(x);
        self.out(shape, data, Op::Softmax { x, axis }, needs)
    }

    /// Normalize the last dimension to zero mean and unit variance
    /// (variance regularized by `eps`), then apply gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.shape(id) != [d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        let eps_t = T::from_f64(eps);
        let xv = self.value(x).data();
        let lanes = xv.len() / d;
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; lanes];
        let inv_d = T::from_f64(1.0 / d as f64);
        for lane in 0..lanes {
            let row = &xv[lane * d..(lane + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let r = T::ONE / (var + eps_t).sqrt();
            rstd[lane] = r;
            for (j, &v) in row.iter().enumerate() {
                xhat[lane * d + j] = (v - mean) * r;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = vec![T::ZERO; xv.len()];
        for lane in 0..lanes {
            for j in 0..d {
                data[lane * d + j] = xhat[lane * d + j] * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.out(
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); outside
    /// training (or at p = 0) this is the identity and adds no node.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        train: bool,
        rng: &mut Rng,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x).data();
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.bernoulli(p) { T::ZERO } else { keep_scale })
            .collect();
        let data: Vec<T> = xv.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Dropout { x, mask }, needs)
    }

    /// Row lookup into a `[vocab, width]` table; gradient scatters (and
    /// accumulates) into the looked-up rows.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: tshape,
                rhs: vec![ids.len()],
            });
        }
        let (vocab, width) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::IndexOutOfVocab { id: bad, vocab });
        }
        let tv = self.value(table).data();
        let mut data = vec![T::ZERO; ids.len() * width];
        for (row, &id) in ids.iter().enumerate() {
            data[row * width..(row + 1) * width].copy_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let needs = self.needs(table);
        self.out(
            vec![ids.len(), width],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::NumelMismatch {
                op: "reshape",
                shape,
                len: self.value(x).numel(),
            });
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Reshape { x }, needs)
    }

    /// Reorder dimensions by `perm` (out dim i comes from in dim perm[i]).
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidPermutation {
                op: "permute",
                perm: perm.to_vec(),
                rank,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.value(x).data(), &in_shape, perm);
        let needs = self.needs(x);
        self.out(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        )
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::InvalidPermutation {
                op: "transpose",
                perm: vec![],
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; out_shape.iter().product()];
        let mut col = 0usize;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let pv = self.value(p).data();
            for o in 0..outer {
                let src = &pv[o * pa * inner..(o + 1) * pa * inner];
                let dst = &mut data[(o * axis_total + col) * inner..];
                dst[..pa * inner].copy_from_slice(src);
            }
            col += pa;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.out(
            out_shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.out(vec![], vec![acc], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.value(x).numel();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.out(
            vec![],
            vec![acc * T::from_f64(1.0 / n as f64)],
            Op::Mean { x },
            needs,
        )
    }

    /// Label-smoothed cross entropy over `[positions, vocab]` logits,
    /// averaged over positions whose gold id is not `pad_id`. The target
    /// distribution puts 1-epsilon on the gold id and epsilon/(vocab-1)
    /// on every other id.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: TensorId,
        gold: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != gold.len() || shape[1] < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![gold.len()],
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(TensorError::InvalidProbability(epsilon));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if let Some(&bad) = gold.iter().find(|&&g| g >= vocab) {
            return Err(TensorError::IndexOutOfVocab {
                id: bad,
                vocab,
            });
        }
        let n_active = gold.iter().filter(|&&g| g != pad_id).count();
        if n_active == 0 {
            return Err(TensorError::AllPositionsPadded);
        }
        let xv = self.value(logits).data();
        let mut probs = vec![T::ZERO; xv.len()];
        let off_mass = epsilon / (vocab as f64 - 1.0);
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &xv[r * vocab..(r + 1) * vocab];
            let mut m = row[0];
            for &v in &row[1..] {
                m = m.maximum(v);
            }
            let mut z = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] = probs[r * vocab + j] / z;
            }
            if gold[r] == pad_id {
                continue;
            }
            let lse = m.to_f64() + z.to_f64().ln();
            let mut sum_x = 0.0f64;
            for &v in row {
                sum_x += v.to_f64();
            }
            let logp_gold = row[gold[r]].to_f64() - lse;
            let sum_logp = sum_x - vocab as f64 * lse;
            total -= (1.0 - epsilon) * logp_gold + off_mass * (sum_logp - logp_gold);
        }
        let loss = total / n_active as f64;
        let needs = self.needs(logits);
        self.out(
            vec![],
            vec![T::from_f64(loss)],
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                epsilon,
                pad_id,
                probs,
                n_active,
            },
            needs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    fn ensure_grad(tensor: &mut Tensor<T>) -> &mut [T] {
        if tensor.grad.is_none() {
            tensor.grad = Some(vec![T::ZERO; tensor.numel()]);
        }
        tensor.grad.as_deref_mut().unwrap()
    }

    /// Reverse sweep from a scalar loss. Each call seeds a fresh unit
    /// gradient at the loss and adds the resulting gradients into the
    /// `grad` buffer of every reachable tensor with `requires_grad`, so
    /// repeated calls accumulate. Intermediate gradients live only for
    /// the duration of the sweep.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        {
            let t = &self.nodes[loss.0].tensor;
            if !t.is_scalar() {
                return Err(TensorError::NotScalar {
                    shape: t.shape().to_vec(),
                });
            }
        }
        let mut ws: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        ws[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(dout) = ws[i].take() else { continue };
            let dout = &dout[..];
            {
                let t = &mut self.nodes[i].tensor;
                if t.requires_grad {
                    for (gi, &d) in Self::ensure_grad(t).iter_mut().zip(dout) {
                        *gi += d;
                    }
                }
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b, trans_b } => {
                    let (a, b, trans_b) = (*a, *b, *trans_b);
                    let a_shape = nodes[a.0].tensor.shape();
                    let b_shape = nodes[b.0].tensor.shape();
                    let out_shape = node.tensor.shape();
                    let lead = &out_shape[..out_shape.len() - 2];
                    let (m, n) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let k = a_shape[a_shape.len() - 1];
                    let a_lead = &a_shape[..a_shape.len() - 2];
                    let b_lead = &b_shape[..b_shape.len() - 2];
                    let (brows, bcols) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
                    if nodes[a.0].needs_grad {
                        // dA = dC @ B^T (or dC @ B when B was transposed)
                        let ga = ws_buf(&mut ws, nodes, a);
                        batched_gemm(
                            dout,
                            lead,
                            m,
                            n,
                            false,
                            nodes[b.0].tensor.data(),
                            b_lead,
                            brows,
                            bcols,
                            !trans_b,
                            ga,
                            a_lead,
                            lead,
                            m,
                            k,
                            true,
                        );
                    }
                    if nodes[b.0].needs_grad {
                        let gb = ws_buf(&mut ws, nodes, b);
                        let a_data = nodes[a.0].tensor.data();
                        if trans_b {
                            // dB = dC^T @ A
                            batched_gemm(
                                dout, lead, m, n, true, a_data, a_lead, m, k, false, gb, b_lead,
                                lead, n, k, true,
                            );
                        } else {
                            // dB = A^T @ dC
                            batched_gemm(
                                a_data, a_lead, m, k, true, dout, lead, m, n, false, gb, b_lead,
                                lead, k, n, true,
                            );
                        }
                    }
                }
                Op::Add { a, b } => {
                    let out_shape = node.tensor.shape();
                    for side in [*a, *b] {
                        if nodes[side.0].needs_grad {
                            let target_shape = nodes[side.0].tensor.shape().to_vec();
                            let g = ws_buf(&mut ws, nodes, side);
                            reduce_into(dout, out_shape, g, &target_shape);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let out_shape = node.tensor.shape();
                    for (side, other) in [(*a, *b), (*b, *a)] {
                        if nodes[side.0].needs_grad {
                            let target_shape = nodes[side.0].tensor.shape().to_vec();
                            let g = ws_buf(&mut ws, nodes, side);
                            mul_backward_into(
                                dout,
                                out_shape,
                                nodes[other.0].tensor.data(),
                                nodes[other.0].tensor.shape(),
                                g,
                                &target_shape,
                            );
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    if nodes[x.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, x);
                        for (gi, &d) in g.iter_mut().zip(dout) {
                            *gi += d * factor;
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, x);
                        for ((gi, &d), &v) in g.iter_mut().zip(dout).zip(nodes[x.0].tensor.data())
                        {
                            if v > T::ZERO {
                                *gi += d;
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    if nodes[x.0].needs_grad {
                        let y = node.tensor.data();
                        let shape = node.tensor.shape();
                        let lane = shape[axis];
                        let inner: usize = shape[axis + 1..].iter().product();
                        let outer: usize = shape[..axis].iter().product();
                        let g = ws_buf(&mut ws, nodes, x);
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = T::ZERO;
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    dot += dout[idx] * y[idx];
                                }
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    g[idx] += y[idx] * (dout[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = *node.tensor.shape().last().unwrap();
                    let lanes = xhat.len() / d;
                    let inv_d = T::from_f64(1.0 / d as f64);
                    if nodes[bias.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, bias);
                        for lane in 0..lanes {
                            for j in 0..d {
                                g[j] += dout[lane * d + j];
                            }
                        }
                    }
                    if nodes[gain.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, gain);
                        for lane in 0..lanes {
                            for j in 0..d {
                                g[j] += dout[lane * d + j] * xhat[lane * d + j];
                            }
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let gv = nodes[gain.0].tensor.data();
                        let g = ws_buf(&mut ws, nodes, x);
                        for lane in 0..lanes {
                            let base = lane * d;
                            let mut m1 = T::ZERO;
                            let mut m2 = T::ZERO;
                            for j in 0..d {
                                let dxh = dout[base + j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat[base + j];
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            let r = rstd[lane];
                            for j in 0..d {
                                let dxh = dout[base + j] * gv[j];
                                g[base + j] += r * (dxh - m1 - xhat[base + j] * m2);
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, x);
                        for ((gi, &d), &m) in g.iter_mut().zip(dout).zip(mask.iter()) {
                            *gi += d * m;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    if nodes[table.0].needs_grad {
                        let width = *node.tensor.shape().last().unwrap();
                        let g = ws_buf(&mut ws, nodes, table);
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..width {
                                g[id * width + j] += dout[row * width + j];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let g = ws_buf(&mut ws, nodes, x);
                        for (gi, &d) in g.iter_mut().zip(dout) {
                            *gi += d;
                        }
                    }
                }
                Op::Permute { x, perm } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let out_shape = node.tensor.shape();
                        let in_strides = strides_for(nodes[x.0].tensor.shape());
                        let g = ws_buf(&mut ws, nodes, x);
                        scatter_permuted(dout, out_shape, perm, &in_strides, g);
                    }
                }
                Op::Concat { parts, axis } => {
                    let axis = *axis;
                    let out_shape = node.tensor.shape();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut col = 0usize;
                    for &p in parts {
                        let pa = nodes[p.0].tensor.shape()[axis];
                        if nodes[p.0].needs_grad {
                            let g = ws_buf(&mut ws, nodes, p);
                            for o in 0..outer {
                                for r in 0..pa * inner {
                                    g[o * pa * inner + r] +=
                                        dout[(o * axis_total + col) * inner + r];
                                }
                            }
                        }
                        col += pa;
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let d = dout[0];
                        let g = ws_buf(&mut ws, nodes, x);
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    }
                }
                Op::Mean { x } => {
                    let x = *x;
                    if nodes[x.0].needs_grad {
                        let n = nodes[x.0].tensor.numel();
                        let d = dout[0] * T::from_f64(1.0 / n as f64);
                        let g = ws_buf(&mut ws, nodes, x);
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    gold,
                    epsilon,
                    pad_id,
                    probs,
                    n_active,
                } => {
                    let logits = *logits;
                    if nodes[logits.0].needs_grad {
                        let vocab = *nodes[logits.0].tensor.shape().last().unwrap();
                        let scale = dout[0] * T::from_f64(1.0 / *n_active as f64);
                        let on = T::from_f64(1.0 - epsilon);
                        let off = T::from_f64(epsilon / (vocab as f64 - 1.0));
                        let pad_id = *pad_id;
                        let g = ws_buf(&mut ws, nodes, logits);
                        for (r, &gid) in gold.iter().enumerate() {
                            if gid == pad_id {
                                continue;
                            }
                            for j in 0..vocab {
                                let target = if j == gid { on } else { off };
                                g[r * vocab + j] += scale * (probs[r * vocab + j] - target);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zero-initialized sweep gradient buffer for `id`.
fn ws_buf<'w, T: Scalar>(
    ws: &'w mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: TensorId,
) -> &'w mut [T] {
    ws[id.0].get_or_insert_with(|| vec![T::ZERO; nodes[id.0].tensor.numel()])
}

/// out[o] = a_mat(o) x b_mat(o) for each index of `loop_lead`, with the
/// operand and output leading dims broadcast against the loop space.
/// `accumulate` adds into `out` instead of overwriting.
#[allow(clippy::too_many_arguments)]
fn batched_gemm<T: Scalar>(
    a: &[T],
    a_lead: &[usize],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[T],
    b_lead: &[usize],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [T],
    out_lead: &[usize],
    loop_lead: &[usize],
    m: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::ONE } else { T::ZERO };
    let k = if trans_a { a_rows } else { a_cols };
    let a_mat = a_rows * a_cols;
    let b_mat = b_rows * b_cols;
    let o_mat = m * n;

    // strides for a stored row-major matrix, with optional transposition
    let (rsa, csa) = if trans_a {
        (1isize, a_cols as isize)
    } else {
        (a_cols as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b_cols as isize)
    } else {
        (b_cols as isize, 1isize)
    };

    let batches: usize = loop_lead.iter().product();
    if batches == 1 {
        debug_assert!(a.len() == a_mat && b.len() == b_mat);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    // fast path: plain-weight product, collapse batch x rows into one GEMM
    if b_lead.is_empty() && !trans_a && a_lead == loop_lead && out_lead == loop_lead {
        let big_m = batches * m;
        unsafe {
            T::gemm(
                big_m,
                k,
                n,
                T::ONE,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    // fast path: weight gradient, collapse batch x rows into one GEMM
    if out_lead.is_empty() && trans_a && !trans_b && a_lead == loop_lead && b_lead == loop_lead {
        let big_rows = batches * a_rows;
        unsafe {
            T::gemm(
                m,
                big_rows,
                n,
                T::ONE,
                a.as_ptr(),
                1,
                a_cols as isize,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    // general path: one GEMM per batch index, broadcast via zero strides.
    // Repeated output slices accumulate sequentially, which keeps the
    // result deterministic.
    let a_proj = lead_projection(a_lead, loop_lead, a_mat);
    let b_proj = lead_projection(b_lead, loop_lead, b_mat);
    let o_proj = lead_projection(out_lead, loop_lead, o_mat);
    let loop_strides = strides_for(loop_lead);
    let needs_acc_zero = !accumulate && o_proj.iter().any(|&s| s == 0) && batches > 1;
    if needs_acc_zero {
        for v in out.iter_mut() {
            *v = T::ZERO;
        }
    }
    let beta = if accumulate || needs_acc_zero {
        T::ONE
    } else {
        T::ZERO
    };
    for flat in 0..batches {
        let mut a_off = 0usize;
        let mut b_off = 0usize;
        let mut o_off = 0usize;
        for (d, &ls) in loop_strides.iter().enumerate() {
            let idx = (flat / ls) % loop_lead[d];
            a_off += idx * a_proj[d];
            b_off += idx * b_proj[d];
            o_off += idx * o_proj[d];
        }
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr().add(b_off),
                rsb,
                csb,
                beta,
                out.as_mut_ptr().add(o_off),
                n as isize,
                1,
            );
        }
    }
}

/// Per-loop-dim element offsets of an operand whose lead shape broadcasts
/// against the loop space; broadcast dims get stride zero.
fn lead_projection(lead: &[usize], loop_lead: &[usize], mat: usize) -> Vec<usize> {
    let mut proj = vec![0usize; loop_lead.len()];
    let offset = loop_lead.len() - lead.len();
    let own = strides_for(lead);
    for (i, &dim) in lead.iter().enumerate() {
        if dim != 1 {
            proj[offset + i] = own[i] * mat;
        }
    }
    proj
}

fn binary_broadcast<T: Scalar>(
    op: &'static str,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>), TensorError> {
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a_shape.to_vec(), data));
    }
    let out_shape = broadcast_shapes(op, a_shape, b_shape)?;
    // suffix fast path: the smaller operand tiles the larger one
    if out_shape == a_shape && a_shape.ends_with(b_shape) {
        let bn = b.len();
        let data = a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % bn]))
            .collect();
        return Ok((out_shape, data));
    }
    if out_shape == b_shape && b_shape.ends_with(a_shape) {
        let an = a.len();
        let data = b
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a[i % an], y))
            .collect();
        return Ok((out_shape, data));
    }
    let numel: usize = out_shape.iter().product();
    let a_proj = element_projection(a_shape, &out_shape);
    let b_proj = element_projection(b_shape, &out_shape);
    let out_strides = strides_for(&out_shape);
    let mut data = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut ao = 0usize;
        let mut bo = 0usize;
        for (d, &os) in out_strides.iter().enumerate() {
            let idx = (flat / os) % out_shape[d];
            ao += idx * a_proj[d];
            bo += idx * b_proj[d];
        }
        data.push(f(a[ao], b[bo]));
    }
    Ok((out_shape, data))
}

/// Element strides of `shape` right-aligned inside `out_shape`, zero on
/// broadcast dims.
fn element_projection(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut proj = vec![0usize; out_shape.len()];
    let offset = out_shape.len() - shape.len();
    let own = strides_for(shape);
    for (i, &dim) in shape.iter().enumerate() {
        if dim != 1 {
            proj[offset + i] = own[i];
        }
    }
    proj
}

/// target[proj(i)] += src[i], reducing over broadcast dims.
fn reduce_into<T: Scalar>(src: &[T], src_shape: &[usize], target: &mut [T], target_shape: &[usize]) {
    if src_shape == target_shape {
        for (t, &s) in target.iter_mut().zip(src) {
            *t += s;
        }
        return;
    }
    if src_shape.ends_with(target_shape) {
        let tn = target.len();
        for (i, &s) in src.iter().enumerate() {
            target[i % tn] += s;
        }
        return;
    }
    let proj = element_projection(target_shape, src_shape);
    let src_strides = strides_for(src_shape);
    for (flat, &s) in src.iter().enumerate() {
        let mut off = 0usize;
        for (d, &st) in src_strides.iter().enumerate() {
            let idx = (flat / st) % src_shape[d];
            off += idx * proj[d];
        }
        target[off] += s;
    }
}

/// target[proj(i)] += dout[i] * other[proj_other(i)] for the mul backward.
fn mul_backward_into<T: Scalar>(
    dout: &[T],
    out_shape: &[usize],
    other: &[T],
    other_shape: &[usize],
    target: &mut [T],
    target_shape: &[usize],
) {
    if out_shape == target_shape && out_shape == other_shape {
        for ((t, &d), &o) in target.iter_mut().zip(dout).zip(other) {
            *t += d * o;
        }
        return;
    }
    let t_proj = element_projection(target_shape, out_shape);
    let o_proj = element_projection(other_shape, out_shape);
    let out_strides = strides_for(out_shape);
    for (flat, &d) in dout.iter().enumerate() {
        let mut to = 0usize;
        let mut oo = 0usize;
        for (dim, &st) in out_strides.iter().enumerate() {
            let idx = (flat / st) % out_shape[dim];
            to += idx * t_proj[dim];
            oo += idx * o_proj[dim];
        }
        target[to] += d * other[oo];
    }
}

fn permute_data<T: Scalar>(data: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    if data.is_empty() {
        return Vec::new();
    }
    let in_strides = strides_for(in_shape);
    let out_strides = strides_for(&out_shape);
    let mut out = vec![data[0]; data.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for (d, &os) in out_strides.iter().enumerate() {
            let idx = (flat / os) % out_shape[d];
            src += idx * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    out
}

fn scatter_permuted<T: Scalar>(
    dout: &[T],
    out_shape: &[usize],
    perm: &[usize],
    in_strides: &[usize],
    grad: &mut [T],
) {
    let out_strides = strides_for(out_shape);
    for (flat, &d) in dout.iter().enumerate() {
        let mut src = 0usize;
        for (dim, &os) in out_strides.iter().enumerate() {
            let idx = (flat / os) % out_shape[dim];
            src += idx * in_strides[perm[dim]];
        }
        grad[src] += d;
    }
}
