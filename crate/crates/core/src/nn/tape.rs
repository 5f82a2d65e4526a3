//! Reverse-mode tape over the kernels in [`super::ops`].

use std::sync::Arc;

use super::ops::{self, AttentionCache, LayerNormCache};
use super::{ParamGrads, ParamId, ParameterStore, Real, Tensor};
use crate::tokenize::AttentionMaskSpec;
use crate::{LumError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows `offset .. offset + mask.len()` of an attention input form one
/// independently masked sequence.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub offset: usize,
    pub mask: Arc<AttentionMaskSpec>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<AttentionBlock>,
        caches: Vec<AttentionCache<T>>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    EmbeddingBag {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Records a computation so gradients can be propagated back through it.
pub struct Tape<'s, T: Real> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameters are stored out of line"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients flow into it but nowhere further.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(y, Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(LumError::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu_forward(self.value(x));
        self.push(y, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Multi-head attention applied independently to each block of rows.
    /// Rows outside every block output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttentionBlock>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols();
        let mut out = Tensor::zeros(&[qv.rows(), dim]);
        let mut caches = Vec::with_capacity(blocks.len());
        for block in &blocks {
            let n = block.mask.len();
            if block.offset + n > qv.rows() {
                return Err(LumError::Mask(format!(
                    "block at {} of length {n} exceeds {} rows",
                    block.offset,
                    qv.rows()
                )));
            }
            let qs = slice_rows(qv, block.offset, n);
            let ks = slice_rows(kv, block.offset, n);
            let vs = slice_rows(vv, block.offset, n);
            let (o, cache) = ops::masked_attention_forward(&qs, &ks, &vs, heads, &block.mask)?;
            out.data_mut()[block.offset * dim..(block.offset + n) * dim].copy_from_slice(o.data());
            caches.push(cache);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                caches,
            },
        ))
    }

    pub fn embedding(&mut self, table: Var, indices: Vec<usize>, field: &'static str) -> Result<Var> {
        let y = ops::embedding_forward(self.value(table), &indices, field)?;
        Ok(self.push(y, Op::Embedding { table, indices }))
    }

    pub fn embedding_bag(
        &mut self,
        table: Var,
        bags: Vec<Vec<usize>>,
        field: &'static str,
    ) -> Result<Var> {
        let y = ops::embedding_bag_forward(self.value(table), &bags, field)?;
        Ok(self.push(y, Op::EmbeddingBag { table, bags }))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| LumError::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(LumError::Shape("concat over differing row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let src = self.value(p).row(r);
                y.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(y, Op::ConcatCols { parts }))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut y = Tensor::zeros(&[indices.len(), xv.cols()]);
        for (r, &i) in indices.iter().enumerate() {
            if i >= xv.rows() {
                return Err(LumError::Shape(format!(
                    "gather row {i} of {} rows",
                    xv.rows()
                )));
            }
            y.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(y, Op::GatherRows { x, indices }))
    }

    /// Builds a `[rows, cols]` tensor whose row `idx[j]` is row `j` of the
    /// matching part. Unassigned rows are zero.
    pub fn scatter_rows(
        &mut self,
        rows: usize,
        cols: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut y = Tensor::zeros(&[rows, cols]);
        for (v, idx) in &parts {
            let pv = self.value(*v);
            if idx.is_empty() {
                continue;
            }
            if pv.cols() != cols || pv.rows() != idx.len() {
                return Err(LumError::Shape(format!(
                    "scatter part {:?} into {} target rows of width {cols}",
                    pv.shape(),
                    idx.len()
                )));
            }
            for (j, &r) in idx.iter().enumerate() {
                y.row_mut(r).copy_from_slice(pv.row(j));
            }
        }
        Ok(self.push(y, Op::ScatterRows { parts }))
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(LumError::ZeroNorm("row normalization"));
            }
            for v in y.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(y, Op::L2Normalize { x, norms }))
    }

    /// Sum over rows of `logsumexp(valid logits) - logit[target]`.
    ///
    /// `valid` is a row-major `[rows, cols]` flag matrix; each target column
    /// must be valid.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        valid: Vec<bool>,
        targets: Vec<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if valid.len() != rows * cols || targets.len() != rows {
            return Err(LumError::Shape(format!(
                "cross entropy over {:?} with {} flags and {} targets",
                lv.shape(),
                valid.len(),
                targets.len()
            )));
        }
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut loss = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols || !valid[r * cols + t] {
                return Err(LumError::InvalidInput(format!(
                    "target column {t} of row {r} is not a valid logit"
                )));
            }
            let row = lv.row(r);
            let flags = &valid[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(flags)
                .filter(|(_, &f)| f)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let prow = probs.row_mut(r);
            for c in 0..cols {
                if flags[c] {
                    prow[c] = (row[c] - max).exp();
                    total += prow[c];
                }
            }
            for p in prow.iter_mut() {
                *p /= total;
            }
            loss += total.ln() + max - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Sum of binary cross-entropy terms over `[rows, 1]` logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(LumError::Shape(format!(
                "{} logits for {} labels",
                lv.len(),
                labels.len()
            )));
        }
        let loss = lv
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, labels }))
    }

    /// `sum(x * weights)`, a scalar probe used to test kernels.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(LumError::Shape(format!(
                "weighted sum of {:?} with {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Propagates d(loss)/d(node) for every node. `loss` must be a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(LumError::Shape("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g)?;
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::MatMulNt { a, b } => {
                // y = a b^T: da = g b, db = g^T a
                acc(*a, g.matmul(self.value(*b))?);
                acc(*b, g.matmul_tn(self.value(*a))?);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, factor } => acc(*x, g.map(|v| v * *factor)),
            Op::Gelu { x } => acc(*x, ops::gelu_backward(self.value(*x), g)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gamma), g);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                caches,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.cols();
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for (block, cache) in blocks.iter().zip(caches) {
                    let n = block.mask.len();
                    let (a, b) = (block.offset * dim, (block.offset + n) * dim);
                    let (gq, gk, gv) = ops::masked_attention_backward(
                        &slice_rows(qv, block.offset, n),
                        &slice_rows(kv, block.offset, n),
                        &slice_rows(vv, block.offset, n),
                        cache,
                        &slice_rows(g, block.offset, n),
                    )?;
                    dq.data_mut()[a..b].copy_from_slice(gq.data());
                    dk.data_mut()[a..b].copy_from_slice(gk.data());
                    dv.data_mut()[a..b].copy_from_slice(gv.data());
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Embedding { table, indices } => {
                let shape = self.value(*table).shape().to_vec();
                acc(*table, ops::embedding_backward(&shape, indices, g));
            }
            Op::EmbeddingBag { table, bags } => {
                let shape = self.value(*table).shape().to_vec();
                acc(*table, ops::embedding_bag_backward(&shape, bags, g));
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Tensor::zeros(pv.shape());
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, d);
                }
            }
            Op::GatherRows { x, indices } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                acc(*x, d);
            }
            Op::ScatterRows { parts } => {
                for (v, idx) in parts {
                    let mut d = Tensor::zeros(self.value(*v).shape());
                    for (j, &r) in idx.iter().enumerate() {
                        d.row_mut(j).copy_from_slice(g.row(r));
                    }
                    acc(*v, d);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = self.nodes[idx].value.as_ref().expect("owned");
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(*x, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let up = g.data()[0];
                let mut d = probs.map(|p| p * up);
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= up;
                }
                acc(*logits, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let up = g.data()[0];
                let lv = self.value(*logits);
                let data = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * up)
                    .collect();
                acc(*logits, Tensor::new(lv.shape().to_vec(), data)?);
            }
            Op::WeightedSum { x, weights } => {
                let up = g.data()[0];
                acc(*x, weights.map(|w| w * up));
            }
        }
        Ok(())
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn slice_rows<T: Real>(x: &Tensor<T>, start: usize, n: usize) -> Tensor<T> {
    let c = x.cols();
    Tensor::new(vec![n, c], x.data()[start * c..(start + n) * c].to_vec()).expect("in range")
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Sums the gradients of every use of each parameter.
    pub fn param_grads(&self, tape: &Tape<'_, T>) -> ParamGrads<T> {
        let mut out: ParamGrads<T> = (0..tape.store.len()).map(|_| None).collect();
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[id.0] {
                    Some(existing) => existing.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
