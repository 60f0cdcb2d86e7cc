//! Operation tape and reverse-mode gradient propagation.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{Real, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

/// A scalar-valued primitive defined outside this module (e.g. the CTC loss).
///
/// `gradient` returns d(output)/d(input) with the input's shape; the tape
/// multiplies it by the upstream scalar gradient.
pub trait CustomScalarOp<T: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, x: &Tensor<T>) -> Result<T, TensorError>;
    fn gradient(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError>;
}

enum Op<T: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    MatMul,
    Transpose,
    /// `a[m x n] + bias[n]` broadcast over rows.
    AddRow,
    Relu,
    /// Row-wise softmax over unmasked entries; masked entries are exactly 0.
    MaskedSoftmax,
    LogSoftmax,
    LayerNorm { eps: T },
    Embed { ids: Vec<usize> },
    SliceRows { start: usize },
    SliceCols { start: usize, end: usize },
    ConcatCols,
    Reshape,
    SumAll,
    /// 3x3 SAME patch extraction over a (t, f) grid with c channels.
    Im2Col { t: usize, f: usize, c: usize },
    /// 2x2 max pooling (stride 2, ceil) over a (t, f) grid with c channels.
    MaxPool2 { t: usize, f: usize, c: usize, argmax: Vec<usize> },
    Custom(Box<dyn CustomScalarOp<T>>),
}

struct Node<T: Real> {
    op: Op<T>,
    parents: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by tensor id.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    map: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.map.get(&id.0)
    }

    /// Gradient for `id`; inputs the loss never touched get zeros.
    pub fn wrt(&self, tape: &Tape<T>, id: TensorId) -> Tensor<T> {
        match self.map.get(&id.0) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

/// Ordered record of primitive applications. Confined to one thread; the
/// tensors it yields are immutable values.
pub struct Tape<T: Real> {
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

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, parents: Vec<usize>, value: Tensor<T>) -> TensorId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node { op, parents, value, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        self.push(Op::Leaf, vec![], t)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.push(Op::Leaf, vec![], t.detached())
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        out.check_finite("add")?;
        Ok(self.push(Op::Add, vec![a.0, b.0], out))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        out.check_finite("sub")?;
        Ok(self.push(Op::Sub, vec![a.0, b.0], out))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        out.check_finite("mul")?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], out))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        out.check_finite("scale")?;
        Ok(self.push(Op::Scale(c), vec![a.0], out))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        out.check_finite("matmul")?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], out))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("rank-2 required, got {:?}", va.shape()),
            });
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::Transpose, vec![a.0], out))
    }

    /// Broadcast a bias vector over every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.last_dim();
        if vb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("rows of {:?} vs bias {:?}", va.shape(), vb.shape()),
            });
        }
        let mut data = va.data().to_vec();
        for r in 0..va.n_rows() {
            for j in 0..n {
                data[r * n + j] = data[r * n + j] + vb.data()[j];
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        out.check_finite("add_row")?;
        Ok(self.push(Op::AddRow, vec![a.0, bias.0], out))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Relu, vec![a.0], out))
    }

    /// Row-wise softmax restricted to unmasked entries. Masked entries are
    /// written as exact zeros and never read, so the output is bitwise
    /// independent of masked inputs. The row maximum (over unmasked entries
    /// only) is subtracted before exponentiation.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId, TensorError> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} vs {} elements", mask.len(), vx.numel()),
            });
        }
        let n = vx.last_dim();
        let rows = vx.n_rows();
        let mut data = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::EmptyRow { row: r });
            }
            let mut sum = T::zero();
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if mrow[j] {
                    data[r * n + j] = data[r * n + j] / sum;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        out.check_finite("masked_softmax")?;
        Ok(self.push(Op::MaskedSoftmax, vec![x.0], out))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "log_softmax",
                detail: "empty rows".into(),
            });
        }
        let rows = vx.n_rows();
        let mut data = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..n {
                data[r * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        out.check_finite("log_softmax")?;
        Ok(self.push(Op::LogSoftmax, vec![x.0], out))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an affine transform with `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "row width {d} vs gain {:?} / bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        let eps_t = T::of(eps);
        let vx = self.value(x);
        let rows = vx.n_rows();
        let mut data = vec![T::zero(); vx.numel()];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let inv_sigma = T::one() / (var + eps_t).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv_sigma;
                data[r * d + j] = xh * self.value(gain).data()[j] + self.value(bias).data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        out.check_finite("layer_norm")?;
        Ok(self.push(Op::LayerNorm { eps: eps_t }, vec![x.0, gain.0, bias.0], out))
    }

    /// Row lookup into an embedding table: output row `l` is `table[ids[l]]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("table must be rank-2, got {:?}", vt.shape()),
            });
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::InvalidArgument {
                    op: "embed",
                    detail: format!("id {id} out of table size {v}"),
                });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::Embed { ids: ids.to_vec() }, vec![table.0], out))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        let n = va.last_dim();
        let rows = va.n_rows();
        if start > end || end > rows {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                detail: format!("{start}..{end} of {rows} rows"),
            });
        }
        let data = va.data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(Op::SliceRows { start }, vec![a.0], out))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("rank-2 required, got {:?}", va.shape()),
            });
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        if start > end || end > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                detail: format!("{start}..{end} of {n} cols"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(Op::SliceCols { start, end }, vec![a.0], out))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.shape().len() != 2 || vp.shape()[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("part {:?} vs {rows} rows", vp.shape()),
                });
            }
            total += vp.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let vp = self.value(p);
                let n = vp.shape()[1];
                data.extend_from_slice(&vp.data()[r * n..(r + 1) * n]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols, parts.iter().map(|p| p.0).collect(), out))
    }

    /// Reinterpret the shape; the row-major data is unchanged.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let out = Tensor::new(shape, va.data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![a.0], out))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let out = Tensor::scalar(s);
        out.check_finite("sum_all")?;
        Ok(self.push(Op::SumAll, vec![a.0], out))
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument { op: "mean_all", detail: "empty".into() });
        }
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Extract 3x3 SAME-padded patches from a (t, f) grid stored as a
    /// `[t*f, c]` tensor. Output is `[t*f, 9*c]`, patch entries ordered by
    /// kernel position then channel; out-of-grid taps are zero.
    pub fn im2col(
        &mut self,
        a: TensorId,
        t: usize,
        f: usize,
    ) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.shape()[0] != t * f {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                detail: format!("{:?} vs grid {t}x{f}", va.shape()),
            });
        }
        let c = va.shape()[1];
        let mut data = vec![T::zero(); t * f * 9 * c];
        for ti in 0..t {
            for fi in 0..f {
                let orow = ti * f + fi;
                for ki in 0..3usize {
                    for kj in 0..3usize {
                        let si = ti as isize + ki as isize - 1;
                        let sj = fi as isize + kj as isize - 1;
                        if si < 0 || sj < 0 || si >= t as isize || sj >= f as isize {
                            continue;
                        }
                        let irow = si as usize * f + sj as usize;
                        let dst = orow * 9 * c + (ki * 3 + kj) * c;
                        data[dst..dst + c]
                            .copy_from_slice(&va.data()[irow * c..(irow + 1) * c]);
                    }
                }
            }
        }
        let out = Tensor::new(vec![t * f, 9 * c], data)?;
        Ok(self.push(Op::Im2Col { t, f, c }, vec![a.0], out))
    }

    /// 2x2 max pooling with stride 2 (ceil semantics at the edges) over a
    /// (t, f) grid stored as `[t*f, c]`. Ties keep the first cell in scan
    /// order, so pooling is deterministic.
    pub fn maxpool2(
        &mut self,
        a: TensorId,
        t: usize,
        f: usize,
    ) -> Result<TensorId, TensorError> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.shape()[0] != t * f {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2",
                detail: format!("{:?} vs grid {t}x{f}", va.shape()),
            });
        }
        let c = va.shape()[1];
        let to = t.div_ceil(2);
        let fo = f.div_ceil(2);
        let mut data = vec![T::zero(); to * fo * c];
        let mut argmax = vec![0usize; to * fo * c];
        for pi in 0..to {
            for pj in 0..fo {
                let orow = pi * fo + pj;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for di in 0..2usize {
                        for dj in 0..2usize {
                            let si = pi * 2 + di;
                            let sj = pj * 2 + dj;
                            if si >= t || sj >= f {
                                continue;
                            }
                            let idx = (si * f + sj) * c + ch;
                            if va.data()[idx] > best {
                                best = va.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data[orow * c + ch] = best;
                    argmax[orow * c + ch] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![to * fo, c], data)?;
        Ok(self.push(Op::MaxPool2 { t, f, c, argmax }, vec![a.0], out))
    }

    /// Record a scalar-valued custom primitive (see [`CustomScalarOp`]).
    pub fn custom_scalar(
        &mut self,
        x: TensorId,
        op: Box<dyn CustomScalarOp<T>>,
    ) -> Result<TensorId, TensorError> {
        let v = op.forward(self.value(x))?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let out = Tensor::scalar(v);
        Ok(self.push(Op::Custom(op), vec![x.0], out))
    }

    /// Reverse-mode sweep from a scalar loss. Visits each node exactly once,
    /// accumulating gradients by summation where a tensor fans out.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar);
        }
        let mut grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        grads.insert(loss.0, Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads.get(&i).cloned() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        // keep gradients only for differentiable leaves
        grads.retain(|&i, _| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad);
        Ok(Gradients { map: grads })
    }

    fn accumulate(&self, grads: &mut BTreeMap<usize, Tensor<T>>, parent: usize, delta: &[T]) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        let entry = grads
            .entry(parent)
            .or_insert_with(|| Tensor::zeros(self.nodes[parent].value.shape().to_vec()));
        for (dst, &d) in entry.data_mut().iter_mut().zip(delta.iter()) {
            *dst += d;
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut BTreeMap<usize, Tensor<T>>,
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let parents = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.accumulate(grads, parents[0], g.data());
                self.accumulate(grads, parents[1], g.data());
            }
            Op::Sub => {
                self.accumulate(grads, parents[0], g.data());
                let neg: Vec<T> = g.data().iter().map(|&v| -v).collect();
                self.accumulate(grads, parents[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[parents[0]].value, &self.nodes[parents[1]].value);
                let da: Vec<T> = g.data().iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(grads, parents[0], &da);
                self.accumulate(grads, parents[1], &db);
            }
            Op::Scale(c) => {
                let da: Vec<T> = g.data().iter().map(|&gv| gv * *c).collect();
                self.accumulate(grads, parents[0], &da);
            }
            Op::MatMul => {
                let (a, b) = (&self.nodes[parents[0]].value, &self.nodes[parents[1]].value);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                // dA = g . B^T
                let mut da = vec![T::zero(); m * k];
                for r in 0..m {
                    for p in 0..k {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += g.data()[r * n + j] * b.data()[p * n + j];
                        }
                        da[r * k + p] = s;
                    }
                }
                // dB = A^T . g
                let mut db = vec![T::zero(); k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = T::zero();
                        for r in 0..m {
                            s += a.data()[r * k + p] * g.data()[r * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                self.accumulate(grads, parents[0], &da);
                self.accumulate(grads, parents[1], &db);
            }
            Op::Transpose => {
                let a = &self.nodes[parents[0]].value;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![T::zero(); m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        da[i2 * n + j] = g.data()[j * m + i2];
                    }
                }
                self.accumulate(grads, parents[0], &da);
            }
            Op::AddRow => {
                self.accumulate(grads, parents[0], g.data());
                let n = self.nodes[parents[1]].value.numel();
                let rows = g.numel() / n;
                let mut db = vec![T::zero(); n];
                for r in 0..rows {
                    for j in 0..n {
                        db[j] += g.data()[r * n + j];
                    }
                }
                self.accumulate(grads, parents[1], &db);
            }
            Op::Relu => {
                let a = &self.nodes[parents[0]].value;
                let da: Vec<T> = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&gv, &av)| if av > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, parents[0], &da);
            }
            Op::MaskedSoftmax => {
                // y is zero at masked entries, so dx = y * (g - sum(g*y)) per
                // row yields exact zeros there as well.
                let y = &node.value;
                let n = y.last_dim();
                let rows = y.n_rows();
                let mut dx = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let mut s = T::zero();
                    for j in 0..n {
                        s += g.data()[r * n + j] * y.data()[r * n + j];
                    }
                    for j in 0..n {
                        let yv = y.data()[r * n + j];
                        dx[r * n + j] = yv * (g.data()[r * n + j] - s);
                    }
                }
                self.accumulate(grads, parents[0], &dx);
            }
            Op::LogSoftmax => {
                let y = &node.value;
                let n = y.last_dim();
                let rows = y.n_rows();
                let mut dx = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let mut s = T::zero();
                    for j in 0..n {
                        s += g.data()[r * n + j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = g.data()[r * n + j] - y.data()[r * n + j].exp() * s;
                    }
                }
                self.accumulate(grads, parents[0], &dx);
            }
            Op::LayerNorm { eps } => {
                let x = &self.nodes[parents[0]].value;
                let gain = &self.nodes[parents[1]].value;
                let d = x.last_dim();
                let rows = x.n_rows();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = vec![T::zero(); x.numel()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = T::zero();
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var = var * inv_d;
                    let inv_sigma = T::one() / (var + *eps).sqrt();
                    let mut mean_gy = T::zero();
                    let mut mean_gyx = T::zero();
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_sigma;
                        let gy = grow[j] * gain.data()[j];
                        mean_gy += gy;
                        mean_gyx += gy * xh;
                        dgain[j] += grow[j] * xh;
                        dbias[j] += grow[j];
                    }
                    mean_gy = mean_gy * inv_d;
                    mean_gyx = mean_gyx * inv_d;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_sigma;
                        let gy = grow[j] * gain.data()[j];
                        dx[r * d + j] = (gy - mean_gy - xh * mean_gyx) * inv_sigma;
                    }
                }
                self.accumulate(grads, parents[0], &dx);
                self.accumulate(grads, parents[1], &dgain);
                self.accumulate(grads, parents[2], &dbias);
            }
            Op::Embed { ids } => {
                let table = &self.nodes[parents[0]].value;
                let d = table.shape()[1];
                let mut dt = vec![T::zero(); table.numel()];
                for (l, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[l * d + j];
                    }
                }
                self.accumulate(grads, parents[0], &dt);
            }
            Op::SliceRows { start } => {
                let a = &self.nodes[parents[0]].value;
                let n = a.last_dim();
                let mut da = vec![T::zero(); a.numel()];
                da[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, parents[0], &da);
            }
            Op::SliceCols { start, end } => {
                let a = &self.nodes[parents[0]].value;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let w = end - start;
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    da[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, parents[0], &da);
            }
            Op::ConcatCols => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parents {
                    let n = self.nodes[p].value.shape()[1];
                    let mut dp = vec![T::zero(); rows * n];
                    for r in 0..rows {
                        dp[r * n..(r + 1) * n]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + n]);
                    }
                    self.accumulate(grads, p, &dp);
                    offset += n;
                }
            }
            Op::Reshape => {
                self.accumulate(grads, parents[0], g.data());
            }
            Op::SumAll => {
                let a = &self.nodes[parents[0]].value;
                let da = vec![g.data()[0]; a.numel()];
                self.accumulate(grads, parents[0], &da);
            }
            Op::Im2Col { t, f, c } => {
                let (t, f, c) = (*t, *f, *c);
                let mut da = vec![T::zero(); t * f * c];
                for ti in 0..t {
                    for fi in 0..f {
                        let orow = ti * f + fi;
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let si = ti as isize + ki as isize - 1;
                                let sj = fi as isize + kj as isize - 1;
                                if si < 0 || sj < 0 || si >= t as isize || sj >= f as isize {
                                    continue;
                                }
                                let irow = si as usize * f + sj as usize;
                                let src = orow * 9 * c + (ki * 3 + kj) * c;
                                for ch in 0..c {
                                    da[irow * c + ch] += g.data()[src + ch];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, parents[0], &da);
            }
            Op::MaxPool2 { t, f, c, argmax } => {
                let mut da = vec![T::zero(); t * f * c];
                for (o, &src) in argmax.iter().enumerate() {
                    da[src] += g.data()[o];
                }
                self.accumulate(grads, parents[0], &da);
            }
            Op::Custom(op) => {
                let x = &self.nodes[parents[0]].value;
                let gx = op.gradient(x)?;
                let scale = g.data()[0];
                let da: Vec<T> = gx.data().iter().map(|&v| v * scale).collect();
                self.accumulate(grads, parents[0], &da);
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Plain triple-loop matrix product on raw row-major slices.
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                out[r * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}
