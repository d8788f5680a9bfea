use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{gemm, IndexMatrix, ReduceMode, Tensor};
use crate::error::{Error, Result};

/// Kind of a recorded operation, used to inspect an execution trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    Relu,
    Concat,
    Softmax,
    Reduce,
    GatherRows,
    EdgeCombine,
    L2Normalize,
    Reshape,
    SliceRows,
    ScaleRows,
    RepeatSegments,
    BatchNorm,
    MulConst,
    CrossEntropy,
    SumAll,
}

impl OpKind {
    /// True for operations that read features of other points through a
    /// neighbor table.
    pub fn is_neighbor_gather(self) -> bool {
        matches!(self, OpKind::GatherRows | OpKind::EdgeCombine)
    }
}

/// Per-channel statistics of a batch-normalized input, used to update the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1) variance.
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        b: usize,
        cols: usize,
    },
    MulRow {
        a: usize,
        b: usize,
        cols: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reduce {
        a: usize,
        mode: ReduceMode,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: usize,
        idx: Rc<IndexMatrix>,
        width: usize,
    },
    EdgeCombine {
        p: usize,
        q: usize,
        idx: Rc<IndexMatrix>,
        width: usize,
    },
    L2Normalize {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        cols: usize,
    },
    ScaleRows {
        a: usize,
        s: usize,
        cols: usize,
    },
    RepeatSegments {
        a: usize,
        lens: Vec<usize>,
        cols: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    MulConst {
        a: usize,
        factor: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        classes: usize,
        total_weight: f64,
    },
    SumAll {
        a: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::MulRow { .. } => OpKind::MulRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::EdgeCombine { .. } => OpKind::EdgeCombine,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::RepeatSegments { .. } => OpKind::RepeatSegments,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumAll { .. } => OpKind::SumAll,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records an input tensor. Gradients are kept for it after `backward`
    /// when its `requires_grad` flag is set.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let tracked = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, tracked)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The kinds of every recorded operation, in recording order.
    pub fn trace(&self) -> Vec<OpKind> {
        self.nodes.borrow().iter().map(|n| n.op.kind()).collect()
    }

    /// Snapshot of the tensor behind `var`, including its gradient once
    /// `backward` has run.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[var.id].value.grad().map(<[f64]>::to_vec)
    }

    pub(crate) fn push_node(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a derived tensor; it is tracked when any input is tracked.
    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'_> {
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push_node(value, op, tracked)
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Runs the reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::contract(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_rule(&nodes, id, &g, &mut grads);
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn backward_rule(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            accumulate(nodes, grads, a, |da| gemm(m, n, k, g, false, val(b), true, da, true));
            accumulate(nodes, grads, b, |db| gemm(k, m, n, val(a), true, g, false, db, true));
        }
        &Op::Transpose { a, rows, cols } => accumulate(nodes, grads, a, |da| {
            for r in 0..rows {
                for c in 0..cols {
                    da[r * cols + c] += g[c * rows + r];
                }
            }
        }),
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, |da| add_into(da, g));
            accumulate(nodes, grads, b, |db| add_into(db, g));
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, |da| add_into(da, g));
            accumulate(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, |da| {
                for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, b, |db| {
                for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            });
        }
        &Op::AddRow { a, b, cols } => {
            accumulate(nodes, grads, a, |da| add_into(da, g));
            accumulate(nodes, grads, b, |db| {
                for row in g.chunks_exact(cols) {
                    add_into(db, row);
                }
            });
        }
        &Op::MulRow { a, b, cols } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, |da| {
                for (drow, grow) in da.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                    for ((d, g), s) in drow.iter_mut().zip(grow).zip(bv) {
                        *d += g * s;
                    }
                }
            });
            accumulate(nodes, grads, b, |db| {
                for (grow, arow) in g.chunks_exact(cols).zip(av.chunks_exact(cols)) {
                    for ((d, g), x) in db.iter_mut().zip(grow).zip(arow) {
                        *d += g * x;
                    }
                }
            });
        }
        &Op::Scale { a, factor } => accumulate(nodes, grads, a, |da| {
            da.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor)
        }),
        &Op::Relu { a } => {
            let av = val(a);
            accumulate(nodes, grads, a, |da| {
                for ((d, g), x) in da.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, width) in parts {
                accumulate(nodes, grads, p, |dp| {
                    let chunk = width * inner;
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..][..chunk];
                        add_into(&mut dp[o * chunk..(o + 1) * chunk], src);
                    }
                });
                offset += width;
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = nodes[id].value.data();
            accumulate(nodes, grads, a, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            da[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            });
        }
        Op::Reduce {
            a,
            mode,
            outer,
            len,
            inner,
            argmax,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            accumulate(nodes, grads, *a, |da| match mode {
                ReduceMode::Max => {
                    for (&src, g) in argmax.iter().zip(g) {
                        da[src] += g;
                    }
                }
                ReduceMode::Mean | ReduceMode::Sum => {
                    let scale = if *mode == ReduceMode::Mean { 1.0 / len as f64 } else { 1.0 };
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..][..inner];
                            for (d, g) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += g * scale;
                            }
                        }
                    }
                }
            });
        }
        Op::GatherRows { x, idx, width } => accumulate(nodes, grads, *x, |dx| {
            for (slot, &src) in idx.as_slice().iter().enumerate() {
                add_into(&mut dx[src * width..(src + 1) * width], &g[slot * width..(slot + 1) * width]);
            }
        }),
        Op::EdgeCombine { p, q, idx, width } => {
            let (k, w) = (idx.cols(), *width);
            accumulate(nodes, grads, *p, |dp| {
                for (i, drow) in dp.chunks_exact_mut(w).enumerate() {
                    for j in 0..k {
                        add_into(drow, &g[(i * k + j) * w..][..w]);
                    }
                }
            });
            accumulate(nodes, grads, *q, |dq| {
                for (slot, &src) in idx.as_slice().iter().enumerate() {
                    add_into(&mut dq[src * w..(src + 1) * w], &g[slot * w..(slot + 1) * w]);
                }
            });
        }
        Op::L2Normalize {
            a,
            outer,
            len,
            inner,
            eps,
            norms,
        } => {
            let y = nodes[id].value.data();
            let (outer, len, inner, eps) = (*outer, *len, *inner, *eps);
            accumulate(nodes, grads, *a, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm >= eps {
                            let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] += (g[at(l)] - y[at(l)] * dot) / norm;
                            }
                        } else {
                            for l in 0..len {
                                da[at(l)] += g[at(l)] / eps;
                            }
                        }
                    }
                }
            });
        }
        &Op::Reshape { a } => accumulate(nodes, grads, a, |da| add_into(da, g)),
        &Op::SliceRows { a, start, cols } => accumulate(nodes, grads, a, |da| {
            add_into(&mut da[start * cols..start * cols + g.len()], g)
        }),
        &Op::ScaleRows { a, s, cols } => {
            let (av, sv) = (val(a), val(s));
            accumulate(nodes, grads, a, |da| {
                for ((drow, grow), sc) in da.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(sv) {
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * sc);
                }
            });
            accumulate(nodes, grads, s, |ds| {
                for ((d, grow), arow) in ds.iter_mut().zip(g.chunks_exact(cols)).zip(av.chunks_exact(cols)) {
                    *d += grow.iter().zip(arow).map(|(g, x)| g * x).sum::<f64>();
                }
            });
        }
        Op::RepeatSegments { a, lens, cols } => accumulate(nodes, grads, *a, |da| {
            let mut row = 0;
            for (b, &n) in lens.iter().enumerate() {
                for _ in 0..n {
                    add_into(&mut da[b * cols..(b + 1) * cols], &g[row * cols..(row + 1) * cols]);
                    row += 1;
                }
            }
        }),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            rows,
            cols,
            xhat,
            inv_std,
            batch,
        } => {
            let (rows, cols) = (*rows, *cols);
            let gam = val(*gamma);
            let mut sum_g = vec![0.0; cols];
            let mut sum_gx = vec![0.0; cols];
            for (grow, xrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                for c in 0..cols {
                    sum_g[c] += grow[c];
                    sum_gx[c] += grow[c] * xrow[c];
                }
            }
            accumulate(nodes, grads, *gamma, |d| add_into(d, &sum_gx));
            accumulate(nodes, grads, *beta, |d| add_into(d, &sum_g));
            accumulate(nodes, grads, *x, |dx| {
                let n = rows as f64;
                for ((drow, grow), xrow) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        let s = gam[c] * inv_std[c];
                        drow[c] += if *batch {
                            s * (grow[c] - sum_g[c] / n - xrow[c] * sum_gx[c] / n)
                        } else {
                            s * grow[c]
                        };
                    }
                }
            });
        }
        Op::MulConst { a, factor } => accumulate(nodes, grads, *a, |da| {
            for ((d, g), f) in da.iter_mut().zip(g).zip(factor) {
                *d += g * f;
            }
        }),
        Op::CrossEntropy {
            logits,
            labels,
            weights,
            probs,
            classes,
            total_weight,
        } => accumulate(nodes, grads, *logits, |dl| {
            let scale = g[0] / total_weight;
            for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &mut dl[i * classes..(i + 1) * classes];
                let p = &probs[i * classes..(i + 1) * classes];
                for c in 0..*classes {
                    let target = if c == label { 1.0 } else { 0.0 };
                    row[c] += scale * w * (p[c] - target);
                }
            }
        }),
        &Op::SumAll { a } => accumulate(nodes, grads, a, |da| da.iter_mut().for_each(|d| *d += g[0])),
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
