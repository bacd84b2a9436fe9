//! Reverse-mode differentiation over a linear operation tape.
//!
//! Ops are recorded in execution order, which is automatically topological:
//! every input of a recorded op already lives on the tape. The backward pass
//! walks the records once, in reverse, accumulating (never overwriting)
//! gradients into per-node buffers.
//!
//! Broadcasting is deliberately narrow: two operands are compatible when
//! their shapes are equal or one shape is a trailing suffix of the other
//! (leading batch dims). Anything else requires an explicit reshape.

use std::sync::Arc;

use super::array::{strides_of, DiffArray, Scalar};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // (mean, rstd) per row
        stats: Arc<Vec<(T, T)>>,
    },
    Softmax(Var),
    EmbeddingLookup {
        table: Var,
        ids: Arc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<i64>>,
        probs: Arc<Vec<T>>,
        ignore_index: i64,
        kept: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear record of executed operations plus their values.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind an array as a tape leaf. Shares the underlying buffer.
    pub fn leaf(&mut self, arr: &DiffArray<T>) -> Var {
        self.nodes.push(Node {
            shape: arr.shape().to_vec(),
            data: arr.data_arc(),
            requires_grad: arr.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let arr = DiffArray::from_vec(shape, data)?;
        Ok(self.leaf(&arr))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise binary ops ──────────────────────────────────────

    fn broadcast_out(&self, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb || sb.len() < sa.len() && sa.ends_with(sb) {
            Ok(a)
        } else if sa.len() < sb.len() && sb.ends_with(sa) {
            Ok(b)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary_ew(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let big = self.broadcast_out(op_name, a, b)?;
        let small = if big == a { b } else { a };
        let out_shape = self.nodes[big.0].shape.clone();
        let big_data = Arc::clone(&self.nodes[big.0].data);
        let small_data = Arc::clone(&self.nodes[small.0].data);
        let sn = small_data.len();
        let data: Vec<T> = if big == a {
            big_data
                .iter()
                .enumerate()
                .map(|(i, &av)| f(av, small_data[i % sn]))
                .collect()
        } else {
            big_data
                .iter()
                .enumerate()
                .map(|(i, &bv)| f(small_data[i % sn], bv))
                .collect()
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, data, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_ew("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_ew("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_ew("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, data, rg, Op::Scale(x, c))
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Matrix product with up to two leading batch dims on either side.
    /// An unbatched operand is shared across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if sa.len() < 2 || sa.len() > 4 || sb.len() < 2 || sb.len() > 4 {
            return Err(Error::ShapeMismatch {
                op: "matmul (rank must be 2..=4)",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch_ok = batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty();
        if ka != kb || !batch_ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = ka;
        let batch: Vec<usize> = if batch_a.is_empty() {
            batch_b.to_vec()
        } else {
            batch_a.to_vec()
        };
        let nb: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let ad = Arc::clone(&self.nodes[a.0].data);
        let bd = Arc::clone(&self.nodes[b.0].data);
        let mut out = vec![T::ZERO; nb * m * n];
        for ib in 0..nb {
            let ao = if batch_a.is_empty() { 0 } else { ib * m * k };
            let bo = if batch_b.is_empty() { 0 } else { ib * k * n };
            gemm_nn(
                &ad[ao..ao + m * k],
                &bd[bo..bo + k * n],
                &mut out[ib * m * n..(ib + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Matmul(a, b)))
    }

    // ── activations and normalization ───────────────────────────────

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let s = T::ONE / (T::ONE + (-v).exp());
                v * s
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, data, rg, Op::Silu(x))
    }

    /// Layer normalization over the last dim with learnable gain and bias.
    /// Zero-variance rows normalize to zero, so the output there is `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or(Error::AxisOutOfRange {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.nodes[v.0].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: shape,
                    rhs: self.nodes[v.0].shape.clone(),
                });
            }
        }
        let xd = Arc::clone(&self.nodes[x.0].data);
        let gd = Arc::clone(&self.nodes[gain.0].data);
        let bd = Arc::clone(&self.nodes[bias.0].data);
        let rows = xd.len() / d;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let mut out = vec![T::ZERO; xd.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
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
            let rstd = T::ONE / (var + eps).sqrt();
            stats.push((mean, rstd));
            let orow = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                orow[i] = (row[i] - mean) * rstd * gd[i] + bd[i];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats: Arc::new(stats),
            },
        ))
    }

    /// Softmax over the last dim, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or(Error::AxisOutOfRange {
            op: "softmax",
            axis: 0,
            rank: 0,
        })?;
        let xd = Arc::clone(&self.nodes[x.0].data);
        let rows = xd.len() / d;
        let mut out = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxs(v);
            }
            let orow = &mut out[r * d..(r + 1) * d];
            let mut sum = T::ZERO;
            for i in 0..d {
                let e = (row[i] - mx).exp();
                orow[i] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for v in orow.iter_mut() {
                *v = *v * inv;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Softmax(x)))
    }

    // ── lookup, shape and slicing ops ───────────────────────────────

    /// Row lookup into the first axis of `table`; also serves as a
    /// position gather. Backward scatter-adds rows.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tshape = self.nodes[table.0].shape.clone();
        if tshape.len() < 2 {
            return Err(Error::Invalid {
                what: "embedding_lookup",
                expected: "table of rank >= 2".into(),
                got: format!("{tshape:?}"),
            });
        }
        let rows = tshape[0];
        let rowlen: usize = tshape[1..].iter().product();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid {
                what: "embedding_lookup",
                expected: format!("ids < {rows}"),
                got: format!("{bad}"),
            });
        }
        let td = Arc::clone(&self.nodes[table.0].data);
        let mut out = Vec::with_capacity(ids.len() * rowlen);
        for &i in ids {
            out.extend_from_slice(&td[i * rowlen..(i + 1) * rowlen]);
        }
        let mut out_shape = vec![ids.len()];
        out_shape.extend_from_slice(&tshape[1..]);
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::EmbeddingLookup {
                table,
                ids: Arc::new(ids.to_vec()),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                what: "concat",
                expected: "at least one part".into(),
                got: "0 parts".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let out_block = axis_total * inner;
        let mut cursor = 0usize;
        for &p in parts {
            let plen = self.nodes[p.0].shape[axis];
            let pd = Arc::clone(&self.nodes[p.0].data);
            let pblock = plen * inner;
            for o in 0..outer {
                let src = &pd[o * pblock..(o + 1) * pblock];
                let dst = &mut out[o * out_block + cursor..o * out_block + cursor + pblock];
                dst.copy_from_slice(src);
            }
            cursor += pblock;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::Invalid {
                what: "slice",
                expected: format!("nonempty range within 0..{}", shape[axis]),
                got: format!("{start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_block = shape[axis] * inner;
        let out_block = len * inner;
        let xd = Arc::clone(&self.nodes[x.0].data);
        let mut out = vec![T::ZERO; outer * out_block];
        for o in 0..outer {
            let src = &xd[o * in_block + start * inner..o * in_block + (start + len) * inner];
            out[o * out_block..(o + 1) * out_block].copy_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = Arc::clone(&self.nodes[x.0].data);
        let rg = self.nodes[x.0].requires_grad;
        self.nodes.push(Node {
            shape: new_shape,
            data,
            requires_grad: rg,
            op: Op::Reshape(x),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Invalid {
                what: "permute",
                expected: format!("permutation of 0..{rank}"),
                got: format!("{axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_copy(&self.nodes[x.0].data, &shape, axes);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    fn reduce_shape(&self, op: &'static str, x: Var, axis: Option<usize>) -> Result<Vec<usize>> {
        let shape = &self.nodes[x.0].shape;
        match axis {
            None => {
                if self.nodes[x.0].data.is_empty() {
                    return Err(Error::EmptyReduction { op, axis: 0 });
                }
                Ok(vec![1])
            }
            Some(a) => {
                if a >= shape.len() {
                    return Err(Error::AxisOutOfRange {
                        op,
                        axis: a,
                        rank: shape.len(),
                    });
                }
                if shape[a] == 0 {
                    return Err(Error::EmptyReduction { op, axis: a });
                }
                let mut s = shape.clone();
                s.remove(a);
                if s.is_empty() {
                    s.push(1);
                }
                Ok(s)
            }
        }
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name: &'static str = if mean { "mean" } else { "sum" };
        let out_shape = self.reduce_shape(name, x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let xd = Arc::clone(&self.nodes[x.0].data);
        let data = match axis {
            None => {
                let mut acc = T::ZERO;
                for &v in xd.iter() {
                    acc += v;
                }
                if mean {
                    acc = acc / T::from_f64(xd.len() as f64);
                }
                vec![acc]
            }
            Some(a) => {
                let outer: usize = shape[..a].iter().product();
                let alen = shape[a];
                let inner: usize = shape[a + 1..].iter().product();
                let mut out = vec![T::ZERO; outer * inner];
                for o in 0..outer {
                    for j in 0..alen {
                        let src = &xd[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
                if mean {
                    let inv = T::ONE / T::from_f64(alen as f64);
                    for v in out.iter_mut() {
                        *v = *v * inv;
                    }
                }
                out
            }
        };
        let rg = self.nodes[x.0].requires_grad;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(out_shape, data, rg, op))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean negative log-softmax over positions whose target is not
    /// `ignore_index`. All-ignored input yields 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Invalid {
                what: "cross_entropy",
                expected: format!("logits [{}, V]", targets.len()),
                got: format!("{shape:?}"),
            });
        }
        let v = shape[1];
        for &t in targets {
            if t != ignore_index && (t < 0 || t as usize >= v) {
                return Err(Error::Invalid {
                    what: "cross_entropy targets",
                    expected: format!("in [0, {v}) or {ignore_index}"),
                    got: format!("{t}"),
                });
            }
        }
        let xd = Arc::clone(&self.nodes[logits.0].data);
        let n = targets.len();
        let mut probs = vec![T::ZERO; n * v];
        let mut loss = T::ZERO;
        let mut kept = 0usize;
        for r in 0..n {
            let row = &xd[r * v..(r + 1) * v];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maxs(x);
            }
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut sum = T::ZERO;
            for i in 0..v {
                let e = (row[i] - mx).exp();
                prow[i] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for p in prow.iter_mut() {
                *p = *p * inv;
            }
            if targets[r] != ignore_index {
                kept += 1;
                loss += -(prow[targets[r] as usize].ln());
            }
        }
        if kept > 0 {
            loss = loss / T::from_f64(kept as f64);
        } else {
            loss = T::ZERO;
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                probs: Arc::new(probs),
                ignore_index,
                kept,
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let pd = &self.nodes[pred.0].data;
        let td = &self.nodes[target.0].data;
        let mut acc = T::ZERO;
        for (&p, &t) in pd.iter().zip(td.iter()) {
            let d = p - t;
            acc += d * d;
        }
        let loss = acc / T::from_f64(pd.len() as f64);
        let rg = self.nodes[pred.0].requires_grad || self.nodes[target.0].requires_grad;
        Ok(self.push(vec![1], vec![loss], rg, Op::Mse { pred, target }))
    }

    // ── backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.nodes[v.0].data.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
    }

    /// Reverse sweep from a scalar root. Visits each recorded op exactly
    /// once, newest to oldest; gradients accumulate across shared uses.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Invalid {
                what: "backward root",
                expected: "scalar".into(),
                got: format!("{:?}", self.nodes[root.0].shape),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::ONE]);

        for idx in (0..=root.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.step_backward(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass for `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn step_backward(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // Taking the op out avoids aliasing node borrows against grad_buf.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_ew(*a, g, |gv, _| gv, idx);
                self.accum_ew(*b, g, |gv, _| gv, idx);
            }
            Op::Sub(a, b) => {
                self.accum_ew(*a, g, |gv, _| gv, idx);
                self.accum_ew(*b, g, |gv, _| -gv, idx);
            }
            Op::Mul(a, b) => {
                let bd = Arc::clone(&self.nodes[b.0].data);
                let ad = Arc::clone(&self.nodes[a.0].data);
                let out_len = self.nodes[idx].data.len();
                if self.nodes[a.0].requires_grad {
                    let bn = bd.len();
                    let contrib: Vec<T> = (0..out_len).map(|i| g[i] * bd[i % bn]).collect();
                    self.accum_reduced(*a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let an = ad.len();
                    let contrib: Vec<T> = (0..out_len).map(|i| g[i] * ad[i % an]).collect();
                    self.accum_reduced(*b, &contrib);
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[x.0].requires_grad {
                    let c = *c;
                    let contrib: Vec<T> = g.iter().map(|&gv| gv * c).collect();
                    self.accum_reduced(*x, &contrib);
                }
            }
            Op::Matmul(a, b) => self.backward_matmul(*a, *b, idx, g),
            Op::Silu(x) => {
                if self.nodes[x.0].requires_grad {
                    let xd = Arc::clone(&self.nodes[x.0].data);
                    let contrib: Vec<T> = xd
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let s = T::ONE / (T::ONE + (-v).exp());
                            gv * s * (T::ONE + v * (T::ONE - s))
                        })
                        .collect();
                    self.accum_reduced(*x, &contrib);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => self.backward_layer_norm(*x, *gain, *bias, stats, g),
            Op::Softmax(x) => {
                if self.nodes[x.0].requires_grad {
                    let yd = Arc::clone(&self.nodes[idx].data);
                    let d = *self.nodes[idx].shape.last().unwrap();
                    let rows = yd.len() / d;
                    let mut contrib = vec![T::ZERO; yd.len()];
                    for r in 0..rows {
                        let y = &yd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = T::ZERO;
                        for i in 0..d {
                            dot += gr[i] * y[i];
                        }
                        let crow = &mut contrib[r * d..(r + 1) * d];
                        for i in 0..d {
                            crow[i] = y[i] * (gr[i] - dot);
                        }
                    }
                    self.accum_reduced(*x, &contrib);
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let rowlen: usize = self.nodes[table.0].shape[1..].iter().product();
                    let buf = self.grad_buf(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * rowlen..(r + 1) * rowlen];
                        let dst = &mut buf[id * rowlen..(id + 1) * rowlen];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_block = out_shape[*axis] * inner;
                let mut cursor = 0usize;
                for &p in parts {
                    let plen = self.nodes[p.0].shape[*axis];
                    let pblock = plen * inner;
                    if self.nodes[p.0].requires_grad {
                        let buf = self.grad_buf(p);
                        for o in 0..outer {
                            let src = &g[o * out_block + cursor..o * out_block + cursor + pblock];
                            let dst = &mut buf[o * pblock..(o + 1) * pblock];
                            for (dv, &sv) in dst.iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    cursor += pblock;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.nodes[x.0].requires_grad {
                    let in_shape = self.nodes[x.0].shape.clone();
                    let out_len_axis = self.nodes[idx].shape[*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let in_block = in_shape[*axis] * inner;
                    let out_block = out_len_axis * inner;
                    let start = *start;
                    let buf = self.grad_buf(*x);
                    for o in 0..outer {
                        let src = &g[o * out_block..(o + 1) * out_block];
                        let dst = &mut buf[o * in_block + start * inner
                            ..o * in_block + (start + out_len_axis) * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    let mean = matches!(op, Op::Mean { .. });
                    let in_shape = self.nodes[x.0].shape.clone();
                    let in_len = self.nodes[x.0].data.len();
                    match axis {
                        None => {
                            let scale = if mean {
                                T::ONE / T::from_f64(in_len as f64)
                            } else {
                                T::ONE
                            };
                            let gv = g[0] * scale;
                            let buf = self.grad_buf(*x);
                            for v in buf.iter_mut() {
                                *v += gv;
                            }
                        }
                        Some(a) => {
                            let outer: usize = in_shape[..*a].iter().product();
                            let alen = in_shape[*a];
                            let inner: usize = in_shape[*a + 1..].iter().product();
                            let scale = if mean {
                                T::ONE / T::from_f64(alen as f64)
                            } else {
                                T::ONE
                            };
                            let buf = self.grad_buf(*x);
                            for o in 0..outer {
                                for j in 0..alen {
                                    let dst = &mut buf
                                        [(o * alen + j) * inner..(o * alen + j + 1) * inner];
                                    let src = &g[o * inner..(o + 1) * inner];
                                    for (dv, &sv) in dst.iter_mut().zip(src) {
                                        *dv += sv * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.nodes[x.0].requires_grad {
                    let buf = self.grad_buf(*x);
                    for (dv, &sv) in buf.iter_mut().zip(g) {
                        *dv += sv;
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.nodes[x.0].requires_grad {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let out_shape = self.nodes[idx].shape.clone();
                    let contrib = permute_copy(g, &out_shape, &inverse);
                    self.accum_reduced(*x, &contrib);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                ignore_index,
                kept,
            } => {
                if self.nodes[logits.0].requires_grad && *kept > 0 {
                    let v = self.nodes[logits.0].shape[1];
                    let scale = g[0] / T::from_f64(*kept as f64);
                    let targets = Arc::clone(targets);
                    let probs = Arc::clone(probs);
                    let ignore = *ignore_index;
                    let buf = self.grad_buf(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == ignore {
                            continue;
                        }
                        let prow = &probs[r * v..(r + 1) * v];
                        let brow = &mut buf[r * v..(r + 1) * v];
                        for i in 0..v {
                            brow[i] += scale * prow[i];
                        }
                        brow[t as usize] += -scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pd = Arc::clone(&self.nodes[pred.0].data);
                let td = Arc::clone(&self.nodes[target.0].data);
                let scale = g[0] * T::from_f64(2.0 / pd.len() as f64);
                if self.nodes[pred.0].requires_grad {
                    let buf = self.grad_buf(*pred);
                    for ((bv, &p), &t) in buf.iter_mut().zip(pd.iter()).zip(td.iter()) {
                        *bv += scale * (p - t);
                    }
                }
                if self.nodes[target.0].requires_grad {
                    let buf = self.grad_buf(*target);
                    for ((bv, &p), &t) in buf.iter_mut().zip(pd.iter()).zip(td.iter()) {
                        *bv += -scale * (p - t);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }

    /// Accumulate `g` (shaped like the output of an identity-jacobian op)
    /// into `v`'s grad, mapping through the broadcast if shapes differ.
    fn accum_ew(&mut self, v: Var, g: &[T], f: impl Fn(T, usize) -> T, _idx: usize) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let contrib: Vec<T> = g.iter().enumerate().map(|(i, &gv)| f(gv, i)).collect();
        self.accum_reduced(v, &contrib);
    }

    /// Add `contrib` (output-shaped) into `v`'s grad buffer, folding the
    /// leading broadcast dims when `v` is the smaller operand.
    fn accum_reduced(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let vn = self.nodes[v.0].data.len();
        let buf = self.grad_buf(v);
        if contrib.len() == vn {
            for (bv, &cv) in buf.iter_mut().zip(contrib) {
                *bv += cv;
            }
        } else {
            for (i, &cv) in contrib.iter().enumerate() {
                buf[i % vn] += cv;
            }
        }
    }

    fn backward_matmul(&mut self, a: Var, b: Var, idx: usize, g: &[T]) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let nb = batch_a.max(batch_b);
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;

        if self.nodes[a.0].requires_grad {
            let bd = Arc::clone(&self.nodes[b.0].data);
            let buf = self.grad_buf(a);
            for ib in 0..nb {
                let go = ib * m * n;
                let bo = if b_batched { ib * k * n } else { 0 };
                let ao = if a_batched { ib * m * k } else { 0 };
                gemm_nt(
                    &g[go..go + m * n],
                    &bd[bo..bo + k * n],
                    &mut buf[ao..ao + m * k],
                    m,
                    n,
                    k,
                );
            }
        }
        if self.nodes[b.0].requires_grad {
            let ad = Arc::clone(&self.nodes[a.0].data);
            let buf = self.grad_buf(b);
            for ib in 0..nb {
                let go = ib * m * n;
                let ao = if a_batched { ib * m * k } else { 0 };
                let bo = if b_batched { ib * k * n } else { 0 };
                gemm_tn(
                    &ad[ao..ao + m * k],
                    &g[go..go + m * n],
                    &mut buf[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let _ = idx;
    }

    fn backward_layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &Arc<Vec<(T, T)>>,
        g: &[T],
    ) {
        let d = *self.nodes[x.0].shape.last().unwrap();
        let rows = self.nodes[x.0].data.len() / d;
        let xd = Arc::clone(&self.nodes[x.0].data);
        let gd = Arc::clone(&self.nodes[gain.0].data);
        let inv_d = T::ONE / T::from_f64(d as f64);

        if self.nodes[x.0].requires_grad {
            let mut contrib = vec![T::ZERO; xd.len()];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = T::ZERO;
                let mut sum_dxhat_xhat = T::ZERO;
                for i in 0..d {
                    let xhat = (xr[i] - mean) * rstd;
                    let dxhat = gr[i] * gd[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let crow = &mut contrib[r * d..(r + 1) * d];
                for i in 0..d {
                    let xhat = (xr[i] - mean) * rstd;
                    let dxhat = gr[i] * gd[i];
                    crow[i] =
                        rstd * (dxhat - sum_dxhat * inv_d - xhat * (sum_dxhat_xhat * inv_d));
                }
            }
            self.accum_reduced(x, &contrib);
        }
        if self.nodes[gain.0].requires_grad {
            let buf = self.grad_buf(gain);
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                for i in 0..d {
                    buf[i] += gr[i] * (xr[i] - mean) * rstd;
                }
            }
        }
        if self.nodes[bias.0].requires_grad {
            let buf = self.grad_buf(bias);
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                for i in 0..d {
                    buf[i] += gr[i];
                }
            }
        }
    }
}

fn permute_copy<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::ZERO; data.len()];
    let mut idx = vec![0usize; rank];
    for &v in data {
        // walk input in row-major order; compute matching output offset
        let mut out_off = 0;
        for (o, &a) in axes.iter().enumerate() {
            out_off += idx[a] * out_strides[o];
        }
        out[out_off] = v;
        // increment multi-index
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}
