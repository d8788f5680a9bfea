//! Forward kernels. Each method computes its output eagerly and records the
//! matching backward rule on the tape.

use std::rc::Rc;

use super::tape::{BatchStats, Op};
use super::{gemm, split_axis, IndexMatrix, ReduceMode, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Normalization source for [`Var::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the rows being processed.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn value(&self) -> Tensor {
        self.tape.tensor(*self)
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.with_value(self.id, |t| t.data().to_vec())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |t| t.data()[0])
    }

    fn check_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op}: operands live on different tapes")))
        }
    }

    fn unary(self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'t> {
        self.tape.push(shape, data, op, &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        self.tape.with_value(self.id, |a| {
            other
                .tape
                .with_value(other.id, |b| gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false))
        });
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.tape.with_value(self.id, |t| {
            let x = t.data();
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
            out
        });
        Ok(self.unary(vec![cols, rows], data, Op::Transpose { a: self.id, rows, cols }))
    }

    fn zip_same(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_tape(&other, name)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::dim(name, format!("shapes {sa:?} and {sb:?} differ")));
        }
        let data = self.tape.with_value(self.id, |a| {
            other
                .tape
                .with_value(other.id, |b| a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        });
        Ok((sa, data))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(shape, data, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(shape, data, Op::Sub { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(shape, data, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    fn row_broadcast(self, row: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, usize, Vec<f64>)> {
        self.check_tape(&row, name)?;
        let (sa, sb) = (self.shape(), row.shape());
        let cols = *sa.last().unwrap_or(&0);
        if sa.is_empty() || sb != [cols] {
            return Err(Error::dim(name, format!("cannot broadcast {sb:?} over rows of {sa:?}")));
        }
        let data = self.tape.with_value(self.id, |a| {
            row.tape.with_value(row.id, |b| {
                let b = b.data();
                a.data()
                    .chunks_exact(cols.max(1))
                    .flat_map(|r| r.iter().zip(b).map(|(&x, &y)| f(x, y)))
                    .collect()
            })
        });
        Ok((sa, cols, data))
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, cols, data) = self.row_broadcast(row, "add_row", |a, b| a + b)?;
        Ok(self.tape.push(shape, data, Op::AddRow { a: self.id, b: row.id, cols }, &[self.id, row.id]))
    }

    /// Multiplies every row (last axis) elementwise by a vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, cols, data) = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        Ok(self.tape.push(shape, data, Op::MulRow { a: self.id, b: row.id, cols }, &[self.id, row.id]))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let data = self.tape.with_value(self.id, |t| t.data().iter().map(|x| x * factor).collect());
        self.unary(self.shape(), data, Op::Scale { a: self.id, factor })
    }

    pub fn relu(self) -> Var<'t> {
        let data = self.tape.with_value(self.id, |t| t.data().iter().map(|&x| x.max(0.0)).collect());
        self.unary(self.shape(), data, Op::Relu { a: self.id })
    }

    /// Multiplies elementwise by a constant (non-differentiable) factor; used
    /// for dropout masks.
    pub fn mul_const(self, factor: Vec<f64>) -> Result<Var<'t>> {
        let shape = self.shape();
        let data = self.tape.with_value(self.id, |t| {
            if t.numel() != factor.len() {
                return Err(Error::dim("mul_const", format!("{} factors for shape {shape:?}", factor.len())));
            }
            Ok(t.data().iter().zip(&factor).map(|(x, f)| x * f).collect())
        })?;
        Ok(self.unary(shape, data, Op::MulConst { a: self.id, factor }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat needs at least one operand"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_tape(p, "concat")?;
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("cannot join {base:?} with {s:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            first.tape.with_value(p.id, |t| {
                let chunk = w * inner;
                for o in 0..outer {
                    out[(o * total + offset) * inner..][..chunk].copy_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            });
            offset += w;
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            parts: ids.iter().copied().zip(widths).collect(),
            outer,
            inner,
        };
        Ok(first.tape.push(shape, out, op, &ids))
    }

    fn axis_extents(&self, axis: usize, op: &'static str) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::dim(op, format!("axis {axis} out of range for shape {s:?}")));
        }
        let ext = split_axis(&s, axis);
        Ok((s, ext))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (shape, (outer, len, inner)) = self.axis_extents(axis, "softmax")?;
        let data = self.tape.with_value(self.id, |t| {
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for l in 0..len {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        y[at(l)] /= sum;
                    }
                }
            }
            y
        });
        Ok(self.unary(shape, data, Op::Softmax { a: self.id, outer, len, inner }))
    }

    /// Reduces `axis` away. Max routes its gradient to the first maximum.
    pub fn reduce(self, axis: usize, mode: ReduceMode) -> Result<Var<'t>> {
        let (mut shape, (outer, len, inner)) = self.axis_extents(axis, "reduce")?;
        if len == 0 {
            return Err(Error::dim("reduce", "cannot reduce an empty axis"));
        }
        let mut argmax = Vec::new();
        let data = self.tape.with_value(self.id, |t| {
            let x = t.data();
            let mut out = vec![0.0; outer * inner];
            if mode == ReduceMode::Max {
                argmax = vec![0; outer * inner];
            }
            for o in 0..outer {
                let base = o * len * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                match mode {
                    ReduceMode::Max => {
                        let arg = &mut argmax[o * inner..(o + 1) * inner];
                        dst.copy_from_slice(&x[base..base + inner]);
                        for (i, a) in arg.iter_mut().enumerate() {
                            *a = base + i;
                        }
                        for l in 1..len {
                            let row = &x[base + l * inner..][..inner];
                            for i in 0..inner {
                                if row[i] > dst[i] {
                                    dst[i] = row[i];
                                    arg[i] = base + l * inner + i;
                                }
                            }
                        }
                    }
                    ReduceMode::Mean | ReduceMode::Sum => {
                        for l in 0..len {
                            let row = &x[base + l * inner..][..inner];
                            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        if mode == ReduceMode::Mean {
                            dst.iter_mut().for_each(|d| *d /= len as f64);
                        }
                    }
                }
            }
            out
        });
        shape.remove(axis);
        Ok(self.unary(
            shape,
            data,
            Op::Reduce {
                a: self.id,
                mode,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let total = self.tape.with_value(self.id, |t| t.data().iter().sum());
        self.unary(vec![], vec![total], Op::SumAll { a: self.id })
    }

    /// `out[i][k] = x[idx[i][k]]` for an `N×F` input, giving `rows×K×F`.
    pub fn gather_rows(self, idx: &Rc<IndexMatrix>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("needs an N×F input, got {s:?}")));
        }
        let (n, width) = (s[0], s[1]);
        if let Some(&bad) = idx.as_slice().iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let data = self.tape.with_value(self.id, |t| {
            let x = t.data();
            let mut out = Vec::with_capacity(idx.as_slice().len() * width);
            for &src in idx.as_slice() {
                out.extend_from_slice(&x[src * width..(src + 1) * width]);
            }
            out
        });
        Ok(self.unary(
            vec![idx.rows(), idx.cols(), width],
            data,
            Op::GatherRows {
                x: self.id,
                idx: Rc::clone(idx),
                width,
            },
        ))
    }

    /// Fused per-edge sum `out[i·K + k] = p[i] + q[idx[i][k]]`, shape
    /// `(N·K)×C`. This is the affine part of a shared MLP applied to
    /// `[x_i, x_j − x_i]` once the weight is split into its two halves.
    pub fn edge_combine(p: Var<'t>, q: Var<'t>, idx: &Rc<IndexMatrix>) -> Result<Var<'t>> {
        p.check_tape(&q, "edge_combine")?;
        let (sp, sq) = (p.shape(), q.shape());
        if sp.len() != 2 || sp != sq || sp[0] != idx.rows() {
            return Err(Error::dim(
                "edge_combine",
                format!("p {sp:?}, q {sq:?}, index {}x{}", idx.rows(), idx.cols()),
            ));
        }
        let (n, width) = (sp[0], sp[1]);
        if let Some(&bad) = idx.as_slice().iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "edge_combine",
                index: bad,
                bound: n,
            });
        }
        let k = idx.cols();
        let data = p.tape.with_value(p.id, |pt| {
            q.tape.with_value(q.id, |qt| {
                let (pv, qv) = (pt.data(), qt.data());
                let mut out = vec![0.0; n * k * width];
                for i in 0..n {
                    let prow = &pv[i * width..(i + 1) * width];
                    for (j, &src) in idx.row(i).iter().enumerate() {
                        let qrow = &qv[src * width..(src + 1) * width];
                        let dst = &mut out[(i * k + j) * width..][..width];
                        for c in 0..width {
                            dst[c] = prow[c] + qrow[c];
                        }
                    }
                }
                out
            })
        });
        Ok(p.tape.push(
            vec![n * k, width],
            data,
            Op::EdgeCombine {
                p: p.id,
                q: q.id,
                idx: Rc::clone(idx),
                width,
            },
            &[p.id, q.id],
        ))
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Var<'t>> {
        let (shape, (outer, len, inner)) = self.axis_extents(axis, "l2_normalize")?;
        let mut norms = vec![0.0; outer * inner];
        let data = self.tape.with_value(self.id, |t| {
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let norm = (0..len).map(|l| x[at(l)] * x[at(l)]).sum::<f64>().sqrt();
                    norms[o * inner + i] = norm;
                    let denom = norm.max(eps);
                    for l in 0..len {
                        y[at(l)] = x[at(l)] / denom;
                    }
                }
            }
            y
        });
        Ok(self.unary(
            shape,
            data,
            Op::L2Normalize {
                a: self.id,
                outer,
                len,
                inner,
                eps,
                norms,
            },
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let old = self.shape();
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::dim("reshape", format!("cannot view {old:?} as {shape:?}")));
        }
        let data = self.data();
        Ok(self.unary(shape, data, Op::Reshape { a: self.id }))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || start > end || end > s[0] {
            return Err(Error::dim("slice_rows", format!("rows {start}..{end} of {s:?}")));
        }
        let cols = s[1];
        let data = self.tape.with_value(self.id, |t| t.data()[start * cols..end * cols].to_vec());
        Ok(self.unary(vec![end - start, cols], data, Op::SliceRows { a: self.id, start, cols }))
    }

    /// Multiplies row `r` of a 2-D tensor by `s[r]`.
    pub fn scale_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&s, "scale_rows")?;
        let (sa, ss) = (self.shape(), s.shape());
        if sa.len() != 2 || ss != [sa[0]] {
            return Err(Error::dim("scale_rows", format!("cannot scale rows of {sa:?} by {ss:?}")));
        }
        let cols = sa[1];
        let data = self.tape.with_value(self.id, |a| {
            s.tape.with_value(s.id, |f| {
                a.data()
                    .chunks_exact(cols.max(1))
                    .zip(f.data())
                    .flat_map(|(row, sc)| row.iter().map(move |x| x * sc))
                    .collect()
            })
        });
        Ok(self.tape.push(sa, data, Op::ScaleRows { a: self.id, s: s.id, cols }, &[self.id, s.id]))
    }

    /// Repeats row `b` of a `B×D` tensor `lens[b]` times, stacking the copies.
    pub fn repeat_segments(self, lens: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != lens.len() {
            return Err(Error::dim("repeat_segments", format!("{} segments for shape {s:?}", lens.len())));
        }
        let cols = s[1];
        let data = self.tape.with_value(self.id, |t| {
            let mut out = Vec::with_capacity(lens.iter().sum::<usize>() * cols);
            for (b, &n) in lens.iter().enumerate() {
                for _ in 0..n {
                    out.extend_from_slice(t.row(b));
                }
            }
            out
        });
        Ok(self.unary(
            vec![lens.iter().sum(), cols],
            data,
            Op::RepeatSegments {
                a: self.id,
                lens: lens.to_vec(),
                cols,
            },
        ))
    }

    /// Per-channel batch normalization of an `R×C` input followed by the
    /// affine `gamma`, `beta`. With [`NormStats::Batch`] the biased batch
    /// variance normalizes and the returned statistics (with unbiased
    /// variance) feed the running estimates.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        self.check_tape(&gamma, "batch_norm")?;
        self.check_tape(&beta, "batch_norm")?;
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("batch_norm", format!("needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::dim(
                "batch_norm",
                format!("affine {:?}/{:?} for {cols} channels", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let (mean, var_biased, batch_stats) = match stats {
            NormStats::Batch => {
                if rows < 2 {
                    return Err(Error::contract(format!(
                        "batch statistics need at least 2 rows, got {rows}"
                    )));
                }
                let mut mean = vec![0.0; cols];
                for row in x.chunks_exact(cols) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut ss = vec![0.0; cols];
                for row in x.chunks_exact(cols) {
                    for c in 0..cols {
                        let d = row[c] - mean[c];
                        ss[c] += d * d;
                    }
                }
                let var: Vec<f64> = ss.iter().map(|v| v / rows as f64).collect();
                let unbiased = ss.iter().map(|v| v / (rows - 1) as f64).collect();
                let bs = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(bs))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::dim("batch_norm", "running statistics width mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for (hrow, xrow) in xhat.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
            for c in 0..cols {
                hrow[c] = (xrow[c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (gamma.data(), beta.data());
        let mut y = vec![0.0; x.len()];
        for (yrow, hrow) in y.chunks_exact_mut(cols).zip(xhat.chunks_exact(cols)) {
            for c in 0..cols {
                yrow[c] = g[c] * hrow[c] + b[c];
            }
        }
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            rows,
            cols,
            xhat,
            inv_std,
            batch: batch_stats.is_some(),
        };
        let out = self.tape.push(s, y, op, &[self.id, gamma.id, beta.id]);
        Ok((out, batch_stats))
    }

    /// Weighted mean cross-entropy of `N×L` logits against integer labels.
    /// Rows with weight 0 are ignored; the mean divides by the weight sum.
    pub fn cross_entropy(self, labels: &[usize], weights: Option<&[f64]>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} against {} labels", labels.len()),
            ));
        }
        let (n, classes) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::data(format!("label {l} at point {i} is outside 0..{classes}")));
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::dim("cross_entropy", format!("{} weights for {n} points", w.len())));
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::contract("cross_entropy needs at least one weighted point"));
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..classes {
                probs[i * classes + c] = (row[c] - log_z).exp();
            }
            if weights[i] != 0.0 {
                loss += weights[i] * (log_z - row[labels[i]]);
            }
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
            weights,
            probs,
            classes,
            total_weight,
        };
        Ok(self.unary(vec![], vec![loss / total_weight], op))
    }
}
