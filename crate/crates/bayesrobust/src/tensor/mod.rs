//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs require gradients.
//! Calling [`Tensor::backward`] on a scalar loss walks the tape in
//! reverse and accumulates `d loss / d leaf` for every leaf created
//! with [`Tape::leaf`]. Tensors built with [`Tensor::constant`] are
//! treated as fixed data and receive no gradient.
//!
//! The op set is what a small convolutional classifier and
//! gradient-based input attacks need: matmul, conv2d, maxpool2d, relu,
//! elementwise arithmetic, softplus/exp/ln/sqrt, reductions, flatten
//! and a fused softmax cross-entropy. All values are 64-bit reals and
//! all forward results are deterministic functions of their inputs.
//!
//! A tape is single-threaded (`Rc` internally); independent tapes may
//! live on independent threads.

mod conv;
mod gradcheck;

pub use gradcheck::finite_difference_check;

use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub(crate) type Value = ArrayD<f64>;

/// Records operations for one forward pass; consumed by one backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Value>>,
    consumed: bool,
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// One operand of a recorded node: the forward value plus, when the
/// operand is itself tracked, its node id for gradient accumulation.
struct Input {
    id: Option<usize>,
    value: Rc<Value>,
}

enum Op {
    Leaf,
    Add(Input, Input),
    Sub(Input, Input),
    Mul(Input, Input),
    Neg(Input),
    Scale(Input, f64),
    AddScalar(Input),
    Exp(Input, Rc<Value>),
    Ln(Input),
    Sqrt(Input, Rc<Value>),
    Softplus(Input),
    Relu(Input),
    Sum(Input),
    Mean(Input),
    Matmul(Input, Input),
    AddBias(Input, Input),
    Flatten(Input),
    Conv2d(conv::ConvNode),
    MaxPool2d(conv::PoolNode),
    SoftmaxCe {
        logits: Input,
        probs: Value,
        labels: Vec<usize>,
    },
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Creates a tracked tensor (a gradient leaf) on this tape.
    pub fn leaf(&self, value: Value) -> Tensor {
        let id = self.push(Op::Leaf, value.shape().to_vec());
        Tensor {
            data: Rc::new(value),
            track: Some((self.clone(), id)),
        }
    }

    fn push(&self, op: Op, shape: Vec<usize>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, shape });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, queried per leaf.
pub struct Gradients {
    tape: Tape,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when `t`
    /// never influenced the loss. Errors if `t` is untracked or lives
    /// on a different tape.
    pub fn get(&self, t: &Tensor) -> Result<Option<Value>> {
        match &t.track {
            None => Err(Error::Detached),
            Some((tape, id)) => {
                if !tape.same_tape(&self.tape) {
                    return Err(Error::TapeMismatch { op: "gradients" });
                }
                Ok(self.tape.inner.borrow().grads[*id].clone())
            }
        }
    }
}

/// Dense n-dimensional tensor of 64-bit reals, optionally tracked on a tape.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<Value>,
    track: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Untracked tensor; receives no gradient.
    pub fn constant(value: Value) -> Tensor {
        Tensor {
            data: Rc::new(value),
            track: None,
        }
    }

    /// Untracked tensor from a flat row-major vector.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| Error::ShapeMismatch { op: "from_vec", detail: e.to_string() })?;
        Ok(Tensor::constant(arr))
    }

    /// Untracked scalar.
    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn data(&self) -> &Value {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.track.is_some()
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        Ok(*self.data.iter().next().expect("len checked"))
    }

    fn as_input(&self) -> Input {
        Input {
            id: self.track.as_ref().map(|(_, id)| *id),
            value: Rc::clone(&self.data),
        }
    }

    /// The tape shared by `parts`, or `None` when all are constants.
    /// Errors if two distinct tapes are mixed.
    fn joint_tape(op: &'static str, parts: &[&Tensor]) -> Result<Option<Tape>> {
        let mut found: Option<Tape> = None;
        for p in parts {
            if let Some((tape, _)) = &p.track {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(t) if t.same_tape(tape) => {}
                    Some(_) => return Err(Error::TapeMismatch { op }),
                }
            }
        }
        Ok(found)
    }

    fn emit(tape: Option<Tape>, op: Op, value: Value) -> Tensor {
        match tape {
            None => Tensor::constant(value),
            Some(tape) => {
                let id = tape.push(op, value.shape().to_vec());
                Tensor {
                    data: Rc::new(value),
                    track: Some((tape, id)),
                }
            }
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let tape = Tensor::joint_tape("add", &[self, other])?;
        let out = &*self.data + &*other.data;
        Ok(Tensor::emit(tape, Op::Add(self.as_input(), other.as_input()), out))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let tape = Tensor::joint_tape("sub", &[self, other])?;
        let out = &*self.data - &*other.data;
        Ok(Tensor::emit(tape, Op::Sub(self.as_input(), other.as_input()), out))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let tape = Tensor::joint_tape("mul", &[self, other])?;
        let out = &*self.data * &*other.data;
        Ok(Tensor::emit(tape, Op::Mul(self.as_input(), other.as_input()), out))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same tensor")
    }

    pub fn neg(&self) -> Tensor {
        let out = self.data.mapv(|v| -v);
        Tensor::emit(self.track_tape(), Op::Neg(self.as_input()), out)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data.mapv(|v| v * c);
        Tensor::emit(self.track_tape(), Op::Scale(self.as_input(), c), out)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data.mapv(|v| v + c);
        Tensor::emit(self.track_tape(), Op::AddScalar(self.as_input()), out)
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data.mapv(f64::exp);
        let out_rc = Rc::new(out);
        let t = Tensor {
            data: Rc::clone(&out_rc),
            track: None,
        };
        match self.track_tape() {
            None => t,
            Some(tape) => {
                let id = tape.push(Op::Exp(self.as_input(), out_rc), t.shape().to_vec());
                Tensor { data: t.data, track: Some((tape, id)) }
            }
        }
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: "requires strictly positive entries".into(),
            });
        }
        let out = self.data.mapv(f64::ln);
        Ok(Tensor::emit(self.track_tape(), Op::Ln(self.as_input()), out))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "requires non-negative entries".into(),
            });
        }
        let out = self.data.mapv(f64::sqrt);
        let out_rc = Rc::new(out);
        let data = Rc::clone(&out_rc);
        Ok(match self.track_tape() {
            None => Tensor { data, track: None },
            Some(tape) => {
                let id = tape.push(Op::Sqrt(self.as_input(), out_rc), data.shape().to_vec());
                Tensor { data, track: Some((tape, id)) }
            }
        })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor {
        let out = self.data.mapv(softplus_stable);
        Tensor::emit(self.track_tape(), Op::Softplus(self.as_input()), out)
    }

    /// Elementwise max(x, 0). The subgradient at 0 is taken to be 0.
    pub fn relu(&self) -> Tensor {
        let out = self.data.mapv(|v| if v > 0.0 { v } else { 0.0 });
        Tensor::emit(self.track_tape(), Op::Relu(self.as_input()), out)
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let out = ArrayD::from_elem(IxDyn(&[]), self.data.sum());
        Tensor::emit(self.track_tape(), Op::Sum(self.as_input()), out)
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), self.data.sum() / n);
        Tensor::emit(self.track_tape(), Op::Mean(self.as_input()), out)
    }

    // ── linear algebra / shape ──────────────────────────────────────

    /// Matrix product of two rank-2 tensors, `(n,k) x (k,m) -> (n,m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let a = self
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| shape_err("matmul", format!("lhs must be rank 2, got {:?}", self.shape())))?;
        let b = other
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| shape_err("matmul", format!("rhs must be rank 2, got {:?}", other.shape())))?;
        if a.ncols() != b.nrows() {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions {} and {} differ", a.ncols(), b.nrows()),
            ));
        }
        let tape = Tensor::joint_tape("matmul", &[self, other])?;
        let out = a.dot(&b).into_dyn();
        Ok(Tensor::emit(tape, Op::Matmul(self.as_input(), other.as_input()), out))
    }

    /// Adds a rank-1 bias along axis 1: `(n,f)+(f)` or `(n,c,h,w)+(c)`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.shape().len() != 1 {
            return Err(shape_err("add_bias", format!("bias must be rank 1, got {:?}", bias.shape())));
        }
        let feat = *self
            .shape()
            .get(1)
            .ok_or_else(|| shape_err("add_bias", format!("input must have rank >= 2, got {:?}", self.shape())))?;
        if feat != bias.len() {
            return Err(shape_err(
                "add_bias",
                format!("axis-1 size {} does not match bias length {}", feat, bias.len()),
            ));
        }
        let tape = Tensor::joint_tape("add_bias", &[self, bias])?;
        let mut out = (*self.data).clone();
        let b = &bias.data;
        for mut lane in out.axis_iter_mut(Axis(0)) {
            for (i, mut sub) in lane.axis_iter_mut(Axis(0)).enumerate() {
                sub.mapv_inplace(|v| v + b[i]);
            }
        }
        Ok(Tensor::emit(tape, Op::AddBias(self.as_input(), bias.as_input()), out))
    }

    /// Collapses all axes after the first: `(n, ...) -> (n, prod)`.
    pub fn flatten(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(shape_err("flatten", "scalar input".into()));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = self
            .data
            .to_shape(IxDyn(&[n, rest]))
            .expect("flatten preserves element count")
            .to_owned();
        Ok(Tensor::emit(self.track_tape(), Op::Flatten(self.as_input()), out))
    }

    /// 2-D cross-correlation over `(n,c,h,w)` with kernel `(oc,c,kh,kw)`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        conv::conv2d(self, kernel, stride, padding)
    }

    /// Non-overlapping max pooling with square window `size`.
    pub fn maxpool2d(&self, size: usize) -> Result<Tensor> {
        conv::maxpool2d(self, size)
    }

    /// Mean softmax cross-entropy over a batch of logits `(n,k)` with
    /// integer class labels, computed with log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let logits = self
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| shape_err("softmax_cross_entropy", format!("logits must be rank 2, got {:?}", self.shape())))?;
        let (n, k) = logits.dim();
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for a batch of {}", labels.len(), n),
            ));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::InvalidLabel { label: y, classes: k });
            }
        }
        let mut probs = logits.to_owned();
        let mut total = 0.0;
        for (row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let row = row.into_slice().expect("contiguous row");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            let p = row[y];
            // propagate NaN instead of masking it behind the clamp
            total += if p.is_nan() { f64::NAN } else { -(p.max(f64::MIN_POSITIVE)).ln() };
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
        Ok(Tensor::emit(
            self.track_tape(),
            Op::SoftmaxCe {
                logits: self.as_input(),
                probs: probs.into_dyn(),
                labels: labels.to_vec(),
            },
            out,
        ))
    }

    fn track_tape(&self) -> Option<Tape> {
        self.track.as_ref().map(|(t, _)| t.clone())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each tape supports exactly one
    /// backward; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&self) -> Result<Gradients> {
        let (tape, loss_id) = match &self.track {
            Some((t, id)) => (t.clone(), *id),
            None => return Err(Error::Detached),
        };
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        {
            let mut inner = tape.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            inner.consumed = true;
            let seed_shape = inner.nodes[loss_id].shape.clone();
            inner.grads[loss_id] = Some(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
            for id in (0..=loss_id).rev() {
                let go = match inner.grads[id].clone() {
                    Some(g) => g,
                    None => continue,
                };
                let node = &inner.nodes[id];
                let updates = node.op.backward(&go);
                for (target, grad) in updates {
                    accumulate(&mut inner.grads, target, grad);
                }
            }
        }
        Ok(Gradients { tape })
    }
}

fn accumulate(grads: &mut [Option<Value>], target: usize, grad: Value) {
    match &mut grads[target] {
        Some(existing) => *existing += &grad,
        slot @ None => *slot = Some(grad),
    }
}

impl Op {
    /// Gradient contributions `(input node id, d loss/d input)` for
    /// every tracked input, given the output gradient.
    fn backward(&self, go: &Value) -> Vec<(usize, Value)> {
        let mut out = Vec::new();
        let mut push = |input: &Input, grad: Value| {
            if let Some(id) = input.id {
                out.push((id, grad));
            }
        };
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, go.clone());
                push(b, go.clone());
            }
            Op::Sub(a, b) => {
                push(a, go.clone());
                push(b, go.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                push(a, go * &*b.value);
                push(b, go * &*a.value);
            }
            Op::Neg(a) => push(a, go.mapv(|v| -v)),
            Op::Scale(a, c) => push(a, go.mapv(|v| v * c)),
            Op::AddScalar(a) => push(a, go.clone()),
            Op::Exp(a, saved_out) => push(a, go * &**saved_out),
            Op::Ln(a) => push(a, go / &*a.value),
            Op::Sqrt(a, saved_out) => {
                // subgradient 0 where the output is exactly 0
                let mut g = go.clone();
                ndarray::Zip::from(&mut g).and(&**saved_out).for_each(|gi, &s| {
                    *gi = if s > 0.0 { *gi * 0.5 / s } else { 0.0 };
                });
                push(a, g);
            }
            Op::Softplus(a) => {
                let sig = a.value.mapv(sigmoid_stable);
                push(a, go * &sig);
            }
            Op::Relu(a) => {
                let mask = a.value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                push(a, go * &mask);
            }
            Op::Sum(a) => {
                let g = *go.iter().next().expect("scalar");
                push(a, ArrayD::from_elem(a.value.raw_dim(), g));
            }
            Op::Mean(a) => {
                let g = *go.iter().next().expect("scalar") / a.value.len().max(1) as f64;
                push(a, ArrayD::from_elem(a.value.raw_dim(), g));
            }
            Op::Matmul(a, b) => {
                let av = a.value.view().into_dimensionality::<Ix2>().expect("checked");
                let bv = b.value.view().into_dimensionality::<Ix2>().expect("checked");
                let g = go.view().into_dimensionality::<Ix2>().expect("matmul grad");
                push(a, g.dot(&bv.t()).into_dyn());
                push(b, av.t().dot(&g).into_dyn());
            }
            Op::AddBias(a, b) => {
                push(a, go.clone());
                if b.id.is_some() {
                    let feat = b.value.len();
                    let mut db = vec![0.0; feat];
                    for lane in go.axis_iter(Axis(0)) {
                        for (i, sub) in lane.axis_iter(Axis(0)).enumerate() {
                            db[i] += sub.sum();
                        }
                    }
                    push(b, ArrayD::from_shape_vec(IxDyn(&[feat]), db).expect("bias grad"));
                }
            }
            Op::Flatten(a) => {
                let g = go
                    .to_shape(a.value.raw_dim())
                    .expect("flatten grad reshape")
                    .to_owned();
                push(a, g);
            }
            Op::Conv2d(node) => node.backward(go, &mut push),
            Op::MaxPool2d(node) => node.backward(go, &mut push),
            Op::SoftmaxCe { logits, probs, labels } => {
                if logits.id.is_some() {
                    let g = *go.iter().next().expect("scalar");
                    let n = labels.len() as f64;
                    let mut dl = probs.clone();
                    {
                        let mut view = dl.view_mut().into_dimensionality::<Ix2>().expect("probs rank 2");
                        for (mut row, &y) in view.rows_mut().into_iter().zip(labels) {
                            row[y] -= 1.0;
                        }
                    }
                    dl.mapv_inplace(|v| v * g / n);
                    push(logits, dl);
                }
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise stabilized softmax of a logit matrix.
pub fn softmax_rows(logits: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}
