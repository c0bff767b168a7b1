use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::{KernelError, Result, Shape};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    SegmentSum { x: usize, seg: Rc<[usize]> },
    SegmentMax { x: usize, winner: Vec<usize> },
    Gather { x: usize, idx: Rc<[usize]> },
    L1Rows(usize, usize),
    SoftmaxXent { logits: usize, targets: Rc<[usize]>, probs: Tensor },
    Hinge { x: usize, m: f64 },
    Sum(usize),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Rec {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it
/// in reverse. A tape supports a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    recs: Vec<Rec>,
    done: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    /// Gradient of the loss with respect to `v`; `None` if `v` did not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

const NONE: usize = usize::MAX;

fn mismatch(op: &'static str, left: Shape, right: Shape) -> KernelError {
    KernelError::ShapeMismatch { op, left, right }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.recs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recs.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.recs[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.recs[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.recs[i].needs_grad),
        };
        self.recs.push(Rec {
            value,
            op,
            needs_grad,
        });
        Var(self.recs.len() - 1)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A free input whose gradient is reported in [`Grads`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.recs[v.0].needs_grad = true;
        v
    }

    /// Binds a stored parameter; its gradient accumulates into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.recs[v.0].value
    }

    /// a·b, or a·bᵀ when `transpose_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (k_b, n) = if tb { (sb.1, sb.0) } else { sb };
        if sa.1 != k_b {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, n);
        gemm(self.val(a), false, self.val(b), tb, out.data_mut(), false);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, tb }, &[a.0, b.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a·bᵀ.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let out = self.zip("add", a, b, |p, q| p + q)?;
            return Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]));
        }
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(mismatch("add", sa, sb));
        }
        let mut out = self.val(a).clone();
        let row = self.val(b).data().to_vec();
        for i in 0..sa.0 {
            for (o, r) in out.row_mut(i).iter_mut().zip(&row) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.val(a).map(|v| v * f);
        self.push(out, Op::Scale(a.0, f), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::tanh);
        self.push(out, Op::Tanh(a.0), &[a.0])
    }

    fn check_segments(&self, op: &'static str, x: Var, seg: &[usize], n: usize) -> Result<()> {
        let rows = self.shape(x).0;
        if seg.len() != rows {
            return Err(mismatch(op, self.shape(x), (seg.len(), 1)));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
            return Err(KernelError::Contract {
                op,
                message: format!("segment id {bad} out of range for {n} segments"),
            });
        }
        Ok(())
    }

    /// Row i of `x` is added into output row `seg[i]`; output has `n` rows.
    pub fn segment_sum(&mut self, x: Var, seg: impl Into<Rc<[usize]>>, n: usize) -> Result<Var> {
        let seg: Rc<[usize]> = seg.into();
        self.check_segments("segment_sum", x, &seg, n)?;
        let xv = self.val(x);
        let mut out = Tensor::zeros(n, xv.cols());
        for (i, &s) in seg.iter().enumerate() {
            let src = xv.row(i);
            for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum { x: x.0, seg }, &[x.0]))
    }

    /// Elementwise maximum over the rows of each segment. Empty segments
    /// yield zero; ties go to the lowest row index.
    pub fn segment_max(&mut self, x: Var, seg: impl Into<Rc<[usize]>>, n: usize) -> Result<Var> {
        let seg: Rc<[usize]> = seg.into();
        self.check_segments("segment_max", x, &seg, n)?;
        let xv = self.val(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(n, d);
        let mut winner = vec![NONE; n * d];
        for (i, &s) in seg.iter().enumerate() {
            let src = xv.row(i);
            for j in 0..d {
                let w = &mut winner[s * d + j];
                if *w == NONE || src[j] > out.get(s, j) {
                    *w = i;
                    out.row_mut(s)[j] = src[j];
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax { x: x.0, winner }, &[x.0]))
    }

    /// Output row k is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let xv = self.val(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(KernelError::Contract {
                op: "gather_rows",
                message: format!("row {bad} out of range for shape {:?}", xv.shape()),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(idx.len(), xv.cols(), data)?;
        Ok(self.push(out, Op::Gather { x: x.0, idx }, &[x.0]))
    }

    /// Row-wise L1 distance; the result is a column.
    pub fn l1_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() != y.shape() {
            return Err(mismatch("l1_rows", x.shape(), y.shape()));
        }
        let data = (0..x.rows())
            .map(|i| x.row(i).iter().zip(y.row(i)).map(|(p, q)| (p - q).abs()).sum())
            .collect();
        let out = Tensor::new(x.rows(), 1, data)?;
        Ok(self.push(out, Op::L1Rows(a.0, b.0), &[a.0, b.0]))
    }

    /// Per-row cross-entropy of softmax(logits) against class `targets[i]`;
    /// the result is a column.
    pub fn softmax_xent(&mut self, logits: Var, targets: impl Into<Rc<[usize]>>) -> Result<Var> {
        let targets: Rc<[usize]> = targets.into();
        let lv = self.val(logits);
        let (r, c) = lv.shape();
        if targets.len() != r {
            return Err(mismatch("softmax_xent", lv.shape(), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(KernelError::Contract {
                op: "softmax_xent",
                message: format!("target class {bad} out of range for {c} classes"),
            });
        }
        let mut probs = Tensor::zeros(r, c);
        let mut loss = Vec::with_capacity(r);
        for i in 0..r {
            let row = lv.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss.push(z.ln() + m - row[targets[i]]);
        }
        let out = Tensor::new(r, 1, loss)?;
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits: logits.0,
                targets,
                probs,
            },
            &[logits.0],
        ))
    }

    /// max(x + m, 0) elementwise.
    pub fn hinge(&mut self, x: Var, m: f64) -> Var {
        let out = self.val(x).map(|v| (v + m).max(0.0));
        self.push(out, Op::Hinge { x: x.0, m }, &[x.0])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).data().len();
        let s = self.sum(a);
        self.scale(s, if n == 0 { 0.0 } else { 1.0 / n as f64 })
    }

    /// Stacks tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => {
                return Err(KernelError::Contract {
                    op: "concat_rows",
                    message: "no inputs".into(),
                })
            }
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.val(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added
    /// into `store`; all gradients are also returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.done {
            return Err(KernelError::BackwardTwice);
        }
        if self.shape(loss) != (1, 1) {
            return Err(KernelError::Contract {
                op: "backward",
                message: format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.recs.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.recs[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let recs = &self.recs;
        let mut acc = |j: usize, t: Tensor| {
            if !recs[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |j: usize| &recs[j].value;
        let out = &recs[i].value;
        match &recs[i].op {
            Op::Leaf => {}
            Op::Param(id) => store.grad_mut(*id).add_assign(g),
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if recs[*a].needs_grad {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    // c = a·b: ga = g·bᵀ; c = a·bᵀ: ga = g·b
                    gemm(g, false, bv, !tb, ga.data_mut(), false);
                    acc(*a, ga);
                }
                if recs[*b].needs_grad {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm(g, true, av, false, gb.data_mut(), false);
                    } else {
                        gemm(av, true, g, false, gb.data_mut(), false);
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*b, gb);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, elementwise(g, bv, |p, q| p * q));
                acc(*b, elementwise(g, av, |p, q| p * q));
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::Sigmoid(a) => acc(*a, elementwise(g, out, |p, s| p * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, elementwise(g, out, |p, t| p * (1.0 - t * t))),
            Op::SegmentSum { x, seg } => {
                let mut gx = Tensor::zeros(seg.len(), g.cols());
                for (r, &s) in seg.iter().enumerate() {
                    gx.row_mut(r).copy_from_slice(g.row(s));
                }
                acc(*x, gx);
            }
            Op::SegmentMax { x, winner } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), d);
                for (k, &w) in winner.iter().enumerate() {
                    if w != NONE {
                        gx.row_mut(w)[k % d] += g.data()[k];
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::L1Rows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    for ((o, p), q) in ga.row_mut(r).iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                        *o = gr * sign(p - q);
                    }
                }
                acc(*b, ga.map(|v| -v));
                acc(*a, ga);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl.row_mut(r)[t] -= 1.0;
                    let gr = g.get(r, 0);
                    gl.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                }
                acc(*logits, gl);
            }
            Op::Hinge { x, m } => {
                acc(*x, elementwise(g, val(*x), |p, v| if v + m > 0.0 { p } else { 0.0 }));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                let av = val(*a);
                acc(*a, Tensor::filled(av.rows(), av.cols(), s));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    start += r;
                    acc(p, Tensor::new(r, c, data).expect("slice matches part shape"));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("operands share a shape")
}
