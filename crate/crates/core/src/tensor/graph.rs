//! The tape: eager forward execution with recorded nodes, reverse-mode
//! backward, and an `f64` shadow re-evaluation used by gradient checks.
//!
//! Nodes are appended in forward execution order, so iterating the tape in
//! reverse is a valid topological order for backpropagation. Gradient
//! accumulation follows that fixed order, which keeps results bit-identical
//! across runs.

use super::kernels::{self, Real};
use super::{Shape, Tensor};
use crate::error::{Result, RoseError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    AddScalar { x: Var, c: f32 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Glu { x: Var },
    GlobalAvgPool { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Frames { x: Var, window: usize, hop: usize },
    Square { x: Var },
    Sqrt { x: Var },
    Abs { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    LogFloor { x: Var, floor: f32 },
    Magnitude { re: Var, im: Var },
}

impl Op {
    fn inputs(&self, out: &mut Vec<Var>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose1d { x, w, b, .. } => {
                out.extend([*x, *w, *b])
            }
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                out.extend([*a, *b])
            }
            Op::Concat { xs, .. } => out.extend(xs.iter().copied()),
            Op::Magnitude { re, im } => out.extend([*re, *im]),
            Op::Scale { x, .. }
            | Op::AddScalar { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Glu { x }
            | Op::GlobalAvgPool { x }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x }
            | Op::Frames { x, .. }
            | Op::Square { x }
            | Op::Sqrt { x }
            | Op::Abs { x }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::LogFloor { x, .. } => out.push(*x),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops execute eagerly on creation; `backward` replays
/// the tape in reverse, accumulating gradients for every node that
/// (transitively) depends on a parameter leaf.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

// How the rhs of an elementwise binary op is broadcast against the lhs.
#[derive(Clone, Copy, PartialEq)]
enum Bc {
    Same,
    /// rhs is [C x 1] against lhs [C x L]
    Col,
    /// rhs is [1 x L] against lhs [C x L]
    Row,
}

fn broadcast_kind(a: Shape, b: Shape) -> Result<Bc> {
    if a == b {
        return Ok(Bc::Same);
    }
    if a.rank() == 2 && b.rank() == 2 {
        let (ar, ac) = (a.dims()[0], a.dims()[1]);
        let (br, bc) = (b.dims()[0], b.dims()[1]);
        if br == ar && bc == 1 {
            return Ok(Bc::Col);
        }
        if br == 1 && bc == ac {
            return Ok(Bc::Row);
        }
    }
    Err(RoseError::Dimension(format!(
        "cannot broadcast {:?} against {:?} (only a size-1 axis may broadcast)",
        b, a
    )))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value that does not take gradients (inputs, fixed bases).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Insert a trainable leaf; `backward` will accumulate its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.rg(a) || self.rg(b)
    }

    // ---- op constructors -------------------------------------------------

    /// Valid (no implicit padding) strided 1-D convolution.
    /// x: [Cin x Lin], w: [Cout x Cin x K], b: [Cout] -> [Cout x Lout].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if stride == 0 {
            return Err(RoseError::Config("conv1d stride must be >= 1".into()));
        }
        if xs.rank() != 2 || ws.rank() != 3 || bs.rank() != 1 {
            return Err(RoseError::Dimension(format!(
                "conv1d expects x rank 2, w rank 3, b rank 1; got {:?}/{:?}/{:?}",
                xs, ws, bs
            )));
        }
        let (cin, lin) = (xs.dims()[0], xs.dims()[1]);
        let (cout, wcin, k) = (ws.dims()[0], ws.dims()[1], ws.dims()[2]);
        if wcin != cin || bs.dims()[0] != cout {
            return Err(RoseError::Dimension(format!(
                "conv1d channel mismatch: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        if lin < k {
            return Err(RoseError::Length(format!(
                "conv1d input length {} shorter than kernel {}",
                lin, k
            )));
        }
        let lout = (lin - k) / stride + 1;
        let y = run_conv1d::<f32>(self.data(x), cin, lin, self.data(w), cout, k, self.data(b), stride);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Op::Conv1d { x, w, b, stride },
            Tensor::new(Shape::r2(cout, lout), y)?,
            rg,
        ))
    }

    /// Transposed 1-D convolution, the adjoint of [`Graph::conv1d`].
    /// x: [Cin x Lin], w: [Cin x Cout x K], b: [Cout] -> [Cout x (Lin-1)*stride + K].
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if stride == 0 {
            return Err(RoseError::Config("conv_transpose1d stride must be >= 1".into()));
        }
        if xs.rank() != 2 || ws.rank() != 3 || bs.rank() != 1 {
            return Err(RoseError::Dimension(format!(
                "conv_transpose1d expects x rank 2, w rank 3, b rank 1; got {:?}/{:?}/{:?}",
                xs, ws, bs
            )));
        }
        let (cin, lin) = (xs.dims()[0], xs.dims()[1]);
        let (wcin, cout, k) = (ws.dims()[0], ws.dims()[1], ws.dims()[2]);
        if wcin != cin || bs.dims()[0] != cout {
            return Err(RoseError::Dimension(format!(
                "conv_transpose1d channel mismatch: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        let lout = (lin - 1) * stride + k;
        let y = run_conv_transpose1d::<f32>(
            self.data(x),
            cin,
            lin,
            self.data(w),
            cout,
            k,
            self.data(b),
            stride,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Op::ConvTranspose1d { x, w, b, stride },
            Tensor::new(Shape::r2(cout, lout), y)?,
            rg,
        ))
    }

    /// a: [M x K] @ b: [K x N] -> [M x N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.dims()[1] != sb.dims()[0] {
            return Err(RoseError::Dimension(format!(
                "matmul shape mismatch: {:?} @ {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
        let mut y = vec![0.0f32; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut y, m, k, n);
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(Shape::r2(m, n), y)?, rg))
    }

    /// Elementwise sum; the rhs may broadcast along one size-1 axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))?;
        let y = run_binary::<f32>(self.data(a), self.data(b), self.shape(a), bc, |x, v| x.add(v));
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(self.shape(a), y)?, rg))
    }

    /// Elementwise difference (same shapes only).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(RoseError::Dimension(format!(
                "sub shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = run_binary::<f32>(self.data(a), self.data(b), self.shape(a), Bc::Same, |x, v| {
            x.sub(v)
        });
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new(self.shape(a), y)?, rg))
    }

    /// Elementwise (term-wise) product; the rhs may broadcast along one
    /// size-1 axis — the two patterns the attention blocks use.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))?;
        let y = run_binary::<f32>(self.data(a), self.data(b), self.shape(a), bc, |x, v| x.mul(v));
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(self.shape(a), y)?, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, t, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v + c).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::AddScalar { x, c }, t, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Relu { x }, t, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x }, t, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Tanh { x }, t, rg)
    }

    /// Gated linear unit over the channel axis: [2C x L] -> [C x L],
    /// out[c,t] = x[c,t] * sigmoid(x[C+c,t]).
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 || s.dims()[0] % 2 != 0 {
            return Err(RoseError::Dimension(format!(
                "glu needs an even channel count, got {:?}",
                s
            )));
        }
        let y = run_glu::<f32>(self.data(x), s.dims()[0], s.dims()[1]);
        let rg = self.rg(x);
        Ok(self.push(
            Op::Glu { x },
            Tensor::new(Shape::r2(s.dims()[0] / 2, s.dims()[1]), y)?,
            rg,
        ))
    }

    /// Global average pooling over the length axis: [C x L] -> [C x 1].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(RoseError::Dimension(format!("global_avg_pool expects rank 2, got {:?}", s)));
        }
        let (c, l) = (s.dims()[0], s.dims()[1]);
        if l == 0 {
            return Err(RoseError::Length("global_avg_pool over empty length".into()));
        }
        let y = run_gap::<f32>(self.data(x), c, l);
        let rg = self.rg(x);
        Ok(self.push(Op::GlobalAvgPool { x }, Tensor::new(Shape::r2(c, 1), y)?, rg))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(RoseError::Dimension("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(RoseError::Dimension(format!("concat axis {} out of range", axis)));
        }
        let first = self.shape(xs[0]);
        if first.rank() != 2 {
            return Err(RoseError::Dimension("concat expects rank-2 tensors".into()));
        }
        let other_axis = 1 - axis;
        let fixed = first.dims()[other_axis];
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.rank() != 2 || s.dims()[other_axis] != fixed {
                return Err(RoseError::Dimension(format!(
                    "concat mismatch on axis {}: {:?} vs {:?}",
                    other_axis, first, s
                )));
            }
            total += s.dims()[axis];
        }
        let out_shape = if axis == 0 {
            Shape::r2(total, fixed)
        } else {
            Shape::r2(fixed, total)
        };
        let parts: Vec<(&[f32], Shape)> = xs.iter().map(|&v| (self.data(v), self.shape(v))).collect();
        let y = run_concat::<f32>(&parts, axis, out_shape);
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, Tensor::new(out_shape, y)?, rg))
    }

    /// Contiguous slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 || axis > 1 {
            return Err(RoseError::Dimension(format!(
                "narrow expects rank 2 and axis 0|1, got {:?} axis {}",
                s, axis
            )));
        }
        if start + len > s.dims()[axis] || len == 0 {
            return Err(RoseError::Dimension(format!(
                "narrow range {}..{} out of bounds for axis {} of {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let out_shape = if axis == 0 {
            Shape::r2(len, s.dims()[1])
        } else {
            Shape::r2(s.dims()[0], len)
        };
        let y = run_narrow::<f32>(self.data(x), s, axis, start, len);
        let rg = self.rg(x);
        Ok(self.push(Op::Narrow { x, axis, start, len }, Tensor::new(out_shape, y)?, rg))
    }

    /// Reinterpret the element buffer under a new shape with equal size.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        if shape.numel() != self.shape(x).numel() {
            return Err(RoseError::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let y = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, Tensor::new(shape, y)?, rg))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(RoseError::Dimension(format!("transpose expects rank 2, got {:?}", s)));
        }
        let (r, c) = (s.dims()[0], s.dims()[1]);
        let mut y = vec![0.0f32; r * c];
        kernels::transpose(self.data(x), &mut y, r, c);
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose { x }, Tensor::new(Shape::r2(c, r), y)?, rg))
    }

    /// Split a rank-1 signal into overlapping frames (rows), no padding:
    /// [N] -> [F x window] with F = 1 + (N - window) / hop.
    pub fn frames(&mut self, x: Var, window: usize, hop: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 1 {
            return Err(RoseError::Dimension(format!("frames expects rank 1, got {:?}", s)));
        }
        if hop == 0 || window == 0 {
            return Err(RoseError::Config("frames window and hop must be >= 1".into()));
        }
        let n = s.dims()[0];
        if n < window {
            return Err(RoseError::Length(format!(
                "signal length {} shorter than one window {}",
                n, window
            )));
        }
        let f = 1 + (n - window) / hop;
        let y = run_frames::<f32>(self.data(x), window, hop, f);
        let rg = self.rg(x);
        Ok(self.push(Op::Frames { x, window, hop }, Tensor::new(Shape::r2(f, window), y)?, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v * v).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Square { x }, t, rg)
    }

    /// Elementwise square root. The gradient at exactly 0 is taken to be 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v.sqrt()).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Sqrt { x }, t, rg)
    }

    /// Elementwise absolute value. The subgradient at 0 is taken to be 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v.abs()).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Abs { x }, t, rg)
    }

    /// Sum of all elements, accumulated in f64, returned as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = kernels::sum_f64(self.data(x)) as f32;
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg)
    }

    /// Mean of all elements, accumulated in f64, returned as a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s = (kernels::sum_f64(self.data(x)) / n as f64) as f32;
        let rg = self.rg(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), rg)
    }

    /// ln(max(x, floor)); gradient is 1/x above the floor, 0 at or below it.
    pub fn log_floor(&mut self, x: Var, floor: f32) -> Var {
        let y: Vec<f32> = self.data(x).iter().map(|&v| v.max(floor).ln()).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::LogFloor { x, floor }, t, rg)
    }

    /// sqrt(re^2 + im^2) elementwise; gradient at magnitude 0 is taken as 0.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.shape(re) != self.shape(im) {
            return Err(RoseError::Dimension(format!(
                "magnitude parts have different shapes: {:?} vs {:?}",
                self.shape(re),
                self.shape(im)
            )));
        }
        let y: Vec<f32> = self
            .data(re)
            .iter()
            .zip(self.data(im))
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        let t = Tensor::new(self.shape(re), y).expect("same shape");
        let rg = self.rg2(re, im);
        Ok(self.push(Op::Magnitude { re, im }, t, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of a scalar `loss` into every node that requires
    /// them. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(RoseError::Contract(
                "backward already ran on this tape; build a fresh graph".into(),
            ));
        }
        if !self.shape(loss).is_scalar() {
            return Err(RoseError::Contract(format!(
                "backward requires a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            backward_op(&self.nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    // ---- f64 shadow evaluation --------------------------------------------

    /// Recompute the value of `target` in 64-bit arithmetic, overriding the
    /// values of selected leaves. This drives the central finite-difference
    /// gradient checks independently of the f32 forward results.
    pub fn eval_f64(&self, target: Var, overrides: &[(Var, &[f64])]) -> Vec<f64> {
        // Collect the ancestor set of `target`.
        let mut needed = vec![false; target.0 + 1];
        needed[target.0] = true;
        let mut stack = vec![target.0];
        let mut inputs = Vec::new();
        while let Some(id) = stack.pop() {
            self.nodes[id].op.inputs(&mut inputs);
            for v in &inputs {
                if !needed[v.0] {
                    needed[v.0] = true;
                    stack.push(v.0);
                }
            }
        }

        let mut vals: Vec<Option<Vec<f64>>> = (0..=target.0).map(|_| None).collect();
        for id in 0..=target.0 {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let value = if let Op::Leaf = node.op {
                if let Some((_, ov)) = overrides.iter().find(|(v, _)| v.0 == id) {
                    assert_eq!(ov.len(), node.value.numel(), "override size mismatch");
                    ov.to_vec()
                } else {
                    node.value.data().iter().map(|&v| v as f64).collect()
                }
            } else {
                let get = |v: Var| -> &[f64] { vals[v.0].as_deref().expect("inputs precede outputs") };
                run_op_f64(&node.op, &self.nodes, &get)
            };
            vals[id] = Some(value);
        }
        vals[target.0].take().expect("target computed")
    }
}

// ---- generic op runners ----------------------------------------------------

fn run_conv1d<T: Real>(
    x: &[T],
    cin: usize,
    lin: usize,
    w: &[T],
    cout: usize,
    k: usize,
    b: &[T],
    stride: usize,
) -> Vec<T> {
    let lout = (lin - k) / stride + 1;
    let mut cols = vec![T::ZERO; cin * k * lout];
    kernels::gather_windows(x, &mut cols, cin, lin, k, stride, lout);
    let mut y = vec![T::ZERO; cout * lout];
    kernels::matmul_acc(w, &cols, &mut y, cout, cin * k, lout);
    for o in 0..cout {
        let bo = b[o];
        for v in &mut y[o * lout..(o + 1) * lout] {
            *v = v.add(bo);
        }
    }
    y
}

fn run_conv_transpose1d<T: Real>(
    x: &[T],
    cin: usize,
    lin: usize,
    w: &[T],
    cout: usize,
    k: usize,
    b: &[T],
    stride: usize,
) -> Vec<T> {
    let lout = (lin - 1) * stride + k;
    // w is [Cin x (Cout*K)] row-major; transpose to [(Cout*K) x Cin].
    let mut wt = vec![T::ZERO; cin * cout * k];
    kernels::transpose(w, &mut wt, cin, cout * k);
    let mut spread = vec![T::ZERO; cout * k * lin];
    kernels::matmul_acc(&wt, x, &mut spread, cout * k, cin, lin);
    let mut y = vec![T::ZERO; cout * lout];
    kernels::scatter_windows_add(&spread, &mut y, cout, lout, k, stride, lin);
    for o in 0..cout {
        let bo = b[o];
        for v in &mut y[o * lout..(o + 1) * lout] {
            *v = v.add(bo);
        }
    }
    y
}

fn run_binary<T: Real>(a: &[T], b: &[T], ashape: Shape, bc: Bc, f: impl Fn(T, T) -> T) -> Vec<T> {
    match bc {
        Bc::Same => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Bc::Col => {
            let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
            let mut y = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let bv = b[r];
                y.extend(a[r * cols..(r + 1) * cols].iter().map(|&x| f(x, bv)));
            }
            y
        }
        Bc::Row => {
            let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
            let mut y = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                y.extend(
                    a[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(b.iter())
                        .map(|(&x, &bv)| f(x, bv)),
                );
            }
            y
        }
    }
}

fn run_glu<T: Real>(x: &[T], channels2: usize, l: usize) -> Vec<T> {
    let c = channels2 / 2;
    let mut y = Vec::with_capacity(c * l);
    for ch in 0..c {
        let val = &x[ch * l..(ch + 1) * l];
        let gate = &x[(c + ch) * l..(c + ch + 1) * l];
        y.extend(val.iter().zip(gate.iter()).map(|(&v, &g)| v.mul(kernels::sigmoid(g))));
    }
    y
}

fn run_gap<T: Real>(x: &[T], c: usize, l: usize) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let s = kernels::sum_f64(&x[ch * l..(ch + 1) * l]);
            from_f64::<T>(s / l as f64)
        })
        .collect()
}

fn from_f64<T: Real>(v: f64) -> T {
    // f32 storage rounds here; the f64 shadow keeps full precision.
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f64>() {
        // Safety: T == f64 checked above.
        unsafe { std::mem::transmute_copy(&v) }
    } else {
        T::from_f32(v as f32)
    }
}

fn run_concat<T: Real>(parts: &[(&[T], Shape)], axis: usize, out: Shape) -> Vec<T> {
    let (orows, ocols) = (out.dims()[0], out.dims()[1]);
    let mut y = vec![T::ZERO; orows * ocols];
    if axis == 0 {
        let mut row = 0;
        for (data, s) in parts {
            let n = s.dims()[0] * s.dims()[1];
            y[row * ocols..row * ocols + n].copy_from_slice(data);
            row += s.dims()[0];
        }
    } else {
        let mut col = 0;
        for (data, s) in parts {
            let pcols = s.dims()[1];
            for r in 0..orows {
                y[r * ocols + col..r * ocols + col + pcols]
                    .copy_from_slice(&data[r * pcols..(r + 1) * pcols]);
            }
            col += pcols;
        }
    }
    y
}

fn run_narrow<T: Real>(x: &[T], s: Shape, axis: usize, start: usize, len: usize) -> Vec<T> {
    let (_rows, cols) = (s.dims()[0], s.dims()[1]);
    if axis == 0 {
        x[start * cols..(start + len) * cols].to_vec()
    } else {
        let rows = s.dims()[0];
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        y
    }
}

fn run_frames<T: Real>(x: &[T], window: usize, hop: usize, f: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(f * window);
    for t in 0..f {
        y.extend_from_slice(&x[t * hop..t * hop + window]);
    }
    y
}

/// f64 shadow dispatch: recompute one node from its (already shadowed) inputs.
fn run_op_f64<'a>(op: &Op, nodes: &[Node], get: &impl Fn(Var) -> &'a [f64]) -> Vec<f64> {
    let shape = |v: Var| nodes[v.0].value.shape();
    match op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::Conv1d { x, w, b, stride } => {
            let (xs, ws) = (shape(*x), shape(*w));
            run_conv1d::<f64>(
                get(*x),
                xs.dims()[0],
                xs.dims()[1],
                get(*w),
                ws.dims()[0],
                ws.dims()[2],
                get(*b),
                *stride,
            )
        }
        Op::ConvTranspose1d { x, w, b, stride } => {
            let (xs, ws) = (shape(*x), shape(*w));
            run_conv_transpose1d::<f64>(
                get(*x),
                xs.dims()[0],
                xs.dims()[1],
                get(*w),
                ws.dims()[1],
                ws.dims()[2],
                get(*b),
                *stride,
            )
        }
        Op::Matmul { a, b } => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
            let mut y = vec![0.0f64; m * n];
            kernels::matmul_acc(get(*a), get(*b), &mut y, m, k, n);
            y
        }
        Op::Add { a, b } => {
            let bc = broadcast_kind(shape(*a), shape(*b)).expect("validated at creation");
            run_binary::<f64>(get(*a), get(*b), shape(*a), bc, |x, v| x + v)
        }
        Op::Sub { a, b } => run_binary::<f64>(get(*a), get(*b), shape(*a), Bc::Same, |x, v| x - v),
        Op::Mul { a, b } => {
            let bc = broadcast_kind(shape(*a), shape(*b)).expect("validated at creation");
            run_binary::<f64>(get(*a), get(*b), shape(*a), bc, |x, v| x * v)
        }
        Op::Scale { x, c } => get(*x).iter().map(|&v| v * *c as f64).collect(),
        Op::AddScalar { x, c } => get(*x).iter().map(|&v| v + *c as f64).collect(),
        Op::Relu { x } => get(*x).iter().map(|&v| v.max(0.0)).collect(),
        Op::Sigmoid { x } => get(*x).iter().map(|&v| kernels::sigmoid(v)).collect(),
        Op::Tanh { x } => get(*x).iter().map(|&v| v.tanh()).collect(),
        Op::Glu { x } => {
            let s = shape(*x);
            run_glu::<f64>(get(*x), s.dims()[0], s.dims()[1])
        }
        Op::GlobalAvgPool { x } => {
            let s = shape(*x);
            run_gap::<f64>(get(*x), s.dims()[0], s.dims()[1])
        }
        Op::Concat { xs, axis } => {
            let parts: Vec<(&[f64], Shape)> = xs.iter().map(|&v| (get(v), shape(v))).collect();
            let out =
                Shape::r2(nodes_shape_dim(nodes, xs, *axis, 0), nodes_shape_dim(nodes, xs, *axis, 1));
            run_concat::<f64>(&parts, *axis, out)
        }
        Op::Narrow { x, axis, start, len } => run_narrow::<f64>(get(*x), shape(*x), *axis, *start, *len),
        Op::Reshape { x } => get(*x).to_vec(),
        Op::Transpose { x } => {
            let s = shape(*x);
            let mut y = vec![0.0f64; s.numel()];
            kernels::transpose(get(*x), &mut y, s.dims()[0], s.dims()[1]);
            y
        }
        Op::Frames { x, window, hop } => {
            let n = shape(*x).dims()[0];
            let f = 1 + (n - window) / hop;
            run_frames::<f64>(get(*x), *window, *hop, f)
        }
        Op::Square { x } => get(*x).iter().map(|&v| v * v).collect(),
        Op::Sqrt { x } => get(*x).iter().map(|&v| v.sqrt()).collect(),
        Op::Abs { x } => get(*x).iter().map(|&v| v.abs()).collect(),
        Op::SumAll { x } => vec![get(*x).iter().sum::<f64>()],
        Op::MeanAll { x } => {
            let xs = get(*x);
            vec![xs.iter().sum::<f64>() / xs.len() as f64]
        }
        Op::LogFloor { x, floor } => get(*x).iter().map(|&v| v.max(*floor as f64).ln()).collect(),
        Op::Magnitude { re, im } => get(*re)
            .iter()
            .zip(get(*im))
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect(),
    }
}

fn nodes_shape_dim(nodes: &[Node], xs: &[Var], axis: usize, dim: usize) -> usize {
    if dim == axis {
        xs.iter().map(|&v| nodes[v.0].value.shape().dims()[dim]).sum()
    } else {
        nodes[xs[0].0].value.shape().dims()[dim]
    }
}

// ---- backward rules ---------------------------------------------------------

fn acc_into<'a>(
    grads: &'a mut [Option<Vec<f32>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut [f32]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: usize, g: &[f32]) {
    let shape = |v: Var| nodes[v.0].value.shape();
    let data = |v: Var| nodes[v.0].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv1d { x, w, b, stride } => {
            let (xs, ws) = (shape(*x), shape(*w));
            let (cin, lin) = (xs.dims()[0], xs.dims()[1]);
            let (cout, k) = (ws.dims()[0], ws.dims()[2]);
            let lout = (lin - k) / stride + 1;
            if nodes[w.0].requires_grad {
                let mut cols = vec![0.0f32; cin * k * lout];
                kernels::gather_windows(data(*x), &mut cols, cin, lin, k, *stride, lout);
                let dw = acc_into(grads, nodes, *w).expect("requires_grad checked");
                kernels::matmul_bt_acc(g, &cols, dw, cout, lout, cin * k);
            }
            if nodes[b.0].requires_grad {
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                for o in 0..cout {
                    db[o] += kernels::sum_f64(&g[o * lout..(o + 1) * lout]) as f32;
                }
            }
            if nodes[x.0].requires_grad {
                let mut wt = vec![0.0f32; cout * cin * k];
                kernels::transpose(data(*w), &mut wt, cout, cin * k);
                let mut dcols = vec![0.0f32; cin * k * lout];
                kernels::matmul_acc(&wt, g, &mut dcols, cin * k, cout, lout);
                let dx = acc_into(grads, nodes, *x).expect("requires_grad checked");
                kernels::scatter_windows_add(&dcols, dx, cin, lin, k, *stride, lout);
            }
        }
        Op::ConvTranspose1d { x, w, b, stride } => {
            let (xs, ws) = (shape(*x), shape(*w));
            let (cin, lin) = (xs.dims()[0], xs.dims()[1]);
            let (cout, k) = (ws.dims()[1], ws.dims()[2]);
            let lout = (lin - 1) * stride + k;
            // dG[(o,k), t] = dY[o, t*stride + k]
            let mut dspread = vec![0.0f32; cout * k * lin];
            kernels::gather_windows(g, &mut dspread, cout, lout, k, *stride, lin);
            if nodes[x.0].requires_grad {
                let dx = acc_into(grads, nodes, *x).expect("requires_grad checked");
                kernels::matmul_acc(data(*w), &dspread, dx, cin, cout * k, lin);
            }
            if nodes[w.0].requires_grad {
                let dw = acc_into(grads, nodes, *w).expect("requires_grad checked");
                kernels::matmul_bt_acc(data(*x), &dspread, dw, cin, lin, cout * k);
            }
            if nodes[b.0].requires_grad {
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                for o in 0..cout {
                    db[o] += kernels::sum_f64(&g[o * lout..(o + 1) * lout]) as f32;
                }
            }
        }
        Op::Matmul { a, b } => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
            if nodes[a.0].requires_grad {
                let da = acc_into(grads, nodes, *a).expect("requires_grad checked");
                kernels::matmul_bt_acc(g, data(*b), da, m, n, k);
            }
            if nodes[b.0].requires_grad {
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                kernels::matmul_at_acc(data(*a), g, db, m, k, n);
            }
        }
        Op::Add { a, b } => {
            if nodes[a.0].requires_grad {
                let da = acc_into(grads, nodes, *a).expect("requires_grad checked");
                for (dv, &gv) in da.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[b.0].requires_grad {
                let bc = broadcast_kind(shape(*a), shape(*b)).expect("validated at creation");
                let ashape = shape(*a);
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                reduce_broadcast_add(g, db, ashape, bc, None);
            }
        }
        Op::Sub { a, b } => {
            if nodes[a.0].requires_grad {
                let da = acc_into(grads, nodes, *a).expect("requires_grad checked");
                for (dv, &gv) in da.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[b.0].requires_grad {
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                for (dv, &gv) in db.iter_mut().zip(g) {
                    *dv -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            let bc = broadcast_kind(shape(*a), shape(*b)).expect("validated at creation");
            let ashape = shape(*a);
            if nodes[a.0].requires_grad {
                let bdat = data(*b);
                let da = acc_into(grads, nodes, *a).expect("requires_grad checked");
                match bc {
                    Bc::Same => {
                        for ((dv, &gv), &bv) in da.iter_mut().zip(g).zip(bdat) {
                            *dv += gv * bv;
                        }
                    }
                    Bc::Col => {
                        let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
                        for r in 0..rows {
                            let bv = bdat[r];
                            for (dv, &gv) in
                                da[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols])
                            {
                                *dv += gv * bv;
                            }
                        }
                    }
                    Bc::Row => {
                        let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
                        for r in 0..rows {
                            for ((dv, &gv), &bv) in da[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .zip(bdat)
                            {
                                *dv += gv * bv;
                            }
                        }
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let adat = data(*a);
                let db = acc_into(grads, nodes, *b).expect("requires_grad checked");
                reduce_broadcast_add(g, db, ashape, bc, Some(adat));
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for (dv, &gv) in dx.iter_mut().zip(g) {
                    *dv += gv * c;
                }
            }
        }
        Op::AddScalar { x, .. } => {
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for (dv, &gv) in dx.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
        }
        Op::Relu { x } => {
            let xv = data(*x);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let yv = nodes[id].value.data();
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                    *dv += gv * y * (1.0 - y);
                }
            }
        }
        Op::Tanh { x } => {
            let yv = nodes[id].value.data();
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                    *dv += gv * (1.0 - y * y);
                }
            }
        }
        Op::Glu { x } => {
            let xv = data(*x);
            let s = shape(*x);
            let (c2, l) = (s.dims()[0], s.dims()[1]);
            let c = c2 / 2;
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ch in 0..c {
                    for t in 0..l {
                        let gv = g[ch * l + t];
                        let v = xv[ch * l + t];
                        let sg = kernels::sigmoid(xv[(c + ch) * l + t]);
                        dx[ch * l + t] += gv * sg;
                        dx[(c + ch) * l + t] += gv * v * sg * (1.0 - sg);
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let s = shape(*x);
            let (c, l) = (s.dims()[0], s.dims()[1]);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ch in 0..c {
                    let gv = g[ch] / l as f32;
                    for dv in &mut dx[ch * l..(ch + 1) * l] {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[id].value.shape();
            let ocols = out_shape.dims()[1];
            let mut offset = 0;
            for &part in xs {
                let s = shape(part);
                let (prows, pcols) = (s.dims()[0], s.dims()[1]);
                if nodes[part.0].requires_grad {
                    let dp = acc_into(grads, nodes, part).expect("requires_grad checked");
                    if *axis == 0 {
                        for (dv, &gv) in dp
                            .iter_mut()
                            .zip(&g[offset * ocols..offset * ocols + prows * pcols])
                        {
                            *dv += gv;
                        }
                    } else {
                        for r in 0..prows {
                            for (dv, &gv) in dp[r * pcols..(r + 1) * pcols]
                                .iter_mut()
                                .zip(&g[r * ocols + offset..r * ocols + offset + pcols])
                            {
                                *dv += gv;
                            }
                        }
                    }
                }
                offset += s.dims()[*axis];
            }
        }
        Op::Narrow { x, axis, start, len } => {
            let s = shape(*x);
            let cols = s.dims()[1];
            if let Some(dx) = acc_into(grads, nodes, *x) {
                if *axis == 0 {
                    for (dv, &gv) in dx[start * cols..(start + len) * cols].iter_mut().zip(g) {
                        *dv += gv;
                    }
                } else {
                    let rows = s.dims()[0];
                    for r in 0..rows {
                        for (dv, &gv) in dx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                        {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for (dv, &gv) in dx.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
        }
        Op::Transpose { x } => {
            let s = shape(*x);
            let (r, c) = (s.dims()[0], s.dims()[1]);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                // g has shape [c x r]
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Frames { x, window, hop } => {
            let f = nodes[id].value.shape().dims()[0];
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for t in 0..f {
                    for k in 0..*window {
                        dx[t * hop + k] += g[t * window + k];
                    }
                }
            }
        }
        Op::Square { x } => {
            let xv = data(*x);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *dv += gv * 2.0 * v;
                }
            }
        }
        Op::Sqrt { x } => {
            let yv = nodes[id].value.data();
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                    if y > 0.0 {
                        *dv += gv / (2.0 * y);
                    }
                }
            }
        }
        Op::Abs { x } => {
            let xv = data(*x);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *dv += gv;
                    } else if v < 0.0 {
                        *dv -= gv;
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let g0 = g[0];
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for dv in dx.iter_mut() {
                    *dv += g0;
                }
            }
        }
        Op::MeanAll { x } => {
            let n = nodes[x.0].value.numel();
            let g0 = g[0] / n as f32;
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for dv in dx.iter_mut() {
                    *dv += g0;
                }
            }
        }
        Op::LogFloor { x, floor } => {
            let xv = data(*x);
            if let Some(dx) = acc_into(grads, nodes, *x) {
                for ((dv, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > *floor {
                        *dv += gv / v;
                    }
                }
            }
        }
        Op::Magnitude { re, im } => {
            let yv = nodes[id].value.data();
            if nodes[re.0].requires_grad {
                let rv = data(*re);
                let dre = acc_into(grads, nodes, *re).expect("requires_grad checked");
                for (((dv, &gv), &y), &r) in dre.iter_mut().zip(g).zip(yv).zip(rv) {
                    if y > 0.0 {
                        *dv += gv * r / y;
                    }
                }
            }
            if nodes[im.0].requires_grad {
                let iv = data(*im);
                let dim = acc_into(grads, nodes, *im).expect("requires_grad checked");
                for (((dv, &gv), &y), &i) in dim.iter_mut().zip(g).zip(yv).zip(iv) {
                    if y > 0.0 {
                        *dv += gv * i / y;
                    }
                }
            }
        }
    }
}

/// Accumulate the upstream gradient `g` (shaped like the lhs) into the grad
/// of a broadcast rhs, optionally multiplying by the lhs values first
/// (the product rule for `Mul`).
#[allow(clippy::needless_range_loop)]
fn reduce_broadcast_add(g: &[f32], db: &mut [f32], ashape: Shape, bc: Bc, lhs: Option<&[f32]>) {
    match bc {
        Bc::Same => match lhs {
            None => {
                for (dv, &gv) in db.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Some(a) => {
                for ((dv, &gv), &av) in db.iter_mut().zip(g).zip(a) {
                    *dv += gv * av;
                }
            }
        },
        Bc::Col => {
            let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
            for r in 0..rows {
                let mut acc = 0.0f64;
                for t in 0..cols {
                    let gv = g[r * cols + t];
                    acc += match lhs {
                        None => gv as f64,
                        Some(a) => gv as f64 * a[r * cols + t] as f64,
                    };
                }
                db[r] += acc as f32;
            }
        }
        Bc::Row => {
            let (rows, cols) = (ashape.dims()[0], ashape.dims()[1]);
            for t in 0..cols {
                let mut acc = 0.0f64;
                for r in 0..rows {
                    let gv = g[r * cols + t];
                    acc += match lhs {
                        None => gv as f64,
                        Some(a) => gv as f64 * a[r * cols + t] as f64,
                    };
                }
                db[t] += acc as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv1d_all_ones_kernel_sums_windows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(Shape::r2(1, 3), vec![1.0, 1.0, 1.0]).unwrap());
        let w = g.constant(Tensor::new(Shape::r3(1, 1, 2), vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_slice1(&[0.0]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_single_full_window() {
        let mut g = Graph::new();
        let mut r = rng(1);
        let x = g.constant(random_tensor(Shape::r2(1, 8), &mut r));
        let w = g.constant(random_tensor(Shape::r3(1, 1, 8), &mut r));
        let b = g.constant(Tensor::from_slice1(&[0.0]));
        let y = g.conv1d(x, w, b, 4).unwrap();
        assert_eq!(g.shape(y).dims(), &[1, 1]);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let mut g = Graph::new();
        let mut r = rng(2);
        let x = g.constant(random_tensor(Shape::r2(1, 16), &mut r));
        let w = g.constant(random_tensor(Shape::r3(1, 1, 8), &mut r));
        let b = g.constant(Tensor::from_slice1(&[0.25]));
        let y = g.conv1d(x, w, b, 4).unwrap();
        assert_eq!(g.shape(y).dims(), &[1, 3]);
        // Independent per-window dot-product oracle.
        let xv = g.value(x).data().to_vec();
        let wv = g.value(w).data().to_vec();
        for t in 0..3 {
            let mut acc = 0.25f64;
            for k in 0..8 {
                acc += wv[k] as f64 * xv[t * 4 + k] as f64;
            }
            let got = g.value(y).data()[t] as f64;
            assert!((got - acc).abs() < 1e-5, "window {t}: {got} vs {acc}");
        }
    }

    #[test]
    fn conv1d_multichannel_matches_oracle() {
        let mut g = Graph::new();
        let mut r = rng(3);
        let (cin, cout, k, s, lin) = (3, 2, 4, 2, 13);
        let x = g.constant(random_tensor(Shape::r2(cin, lin), &mut r));
        let w = g.constant(random_tensor(Shape::r3(cout, cin, k), &mut r));
        let b = g.constant(random_tensor(Shape::r1(cout), &mut r));
        let y = g.conv1d(x, w, b, s).unwrap();
        let lout = (lin - k) / s + 1;
        assert_eq!(g.shape(y).dims(), &[cout, lout]);
        let (xv, wv, bv) = (g.value(x).clone(), g.value(w).clone(), g.value(b).clone());
        for o in 0..cout {
            for t in 0..lout {
                let mut acc = bv.data()[o] as f64;
                for c in 0..cin {
                    for kk in 0..k {
                        acc += wv.at3(o, c, kk) as f64 * xv.at2(c, t * s + kk) as f64;
                    }
                }
                let got = g.value(y).at2(o, t) as f64;
                assert!((got - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv1d_rejects_short_input_and_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::r2(1, 4)));
        let w = g.constant(Tensor::zeros(Shape::r3(1, 1, 8)));
        let b = g.constant(Tensor::zeros(Shape::r1(1)));
        assert!(matches!(g.conv1d(x, w, b, 1), Err(crate::RoseError::Length(_))));
        let w2 = g.constant(Tensor::zeros(Shape::r3(1, 2, 2)));
        assert!(matches!(g.conv1d(x, w2, b, 1), Err(crate::RoseError::Dimension(_))));
    }

    #[test]
    fn conv_transpose1d_length_formula_and_delta_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(Shape::r2(1, 1), vec![1.0]).unwrap());
        let mut kernel = vec![0.0f32; 8];
        kernel[0] = 1.0;
        let w = g.constant(Tensor::new(Shape::r3(1, 1, 8), kernel).unwrap());
        let b = g.constant(Tensor::from_slice1(&[0.0]));
        let y = g.conv_transpose1d(x, w, b, 4).unwrap();
        assert_eq!(g.shape(y).dims(), &[1, 8]);
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_transpose1d_is_adjoint_of_conv1d() {
        // <conv1d(x; w), y> == <x, conv_transpose1d(y; w~)> with zero bias,
        // where w~ swaps the in/out channel axes of w.
        let mut r = rng(4);
        for &(cin, cout, k, s, lin) in &[(1usize, 1usize, 8usize, 4usize, 16usize), (3, 2, 4, 2, 11), (2, 5, 3, 1, 9)] {
            let mut g = Graph::new();
            let lout = (lin - k) / s + 1;
            let x = g.constant(random_tensor(Shape::r2(cin, lin), &mut r));
            let w = g.constant(random_tensor(Shape::r3(cout, cin, k), &mut r));
            let y = g.constant(random_tensor(Shape::r2(cout, lout), &mut r));
            let b_f = g.constant(Tensor::zeros(Shape::r1(cout)));
            let b_t = g.constant(Tensor::zeros(Shape::r1(cin)));
            let fwd = g.conv1d(x, w, b_f, s).unwrap();
            // Swap axes of w: [cout, cin, k] -> [cout(in), cin(out), k] for the transpose op.
            let adj = g.conv_transpose1d(y, w, b_t, s).unwrap();
            // adj has shape [cin x (lout-1)*s + k]; crop to lin for the inner product
            // (the formula lengths agree exactly when (lin - k) % s == 0).
            let adj_len = g.shape(adj).dims()[1];
            assert!(adj_len <= lin);
            let lhs = kernels::dot_f64(g.value(fwd).data(), g.value(y).data());
            let rhs = kernels::dot_f64(
                &g.value(x).data()[..], // full x
                &pad_cols(g.value(adj), cin, adj_len, lin),
            );
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(rel < 1e-4, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }

    fn pad_cols(t: &Tensor, rows: usize, cols: usize, target: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; rows * target];
        for r in 0..rows {
            out[r * target..r * target + cols].copy_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        out
    }

    #[test]
    fn glu_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(Shape::r2(2, 1), vec![1.0, 0.0]).unwrap());
        let y = g.glu(x).unwrap();
        assert!((g.value(y).data()[0] - 0.5).abs() < 1e-7);

        // Gate saturation: large gate passes the value through.
        let x2 = g.constant(Tensor::new(Shape::r2(2, 1), vec![0.7, 40.0]).unwrap());
        let y2 = g.glu(x2).unwrap();
        assert!((g.value(y2).data()[0] - 0.7).abs() < 1e-6);

        let odd = g.constant(Tensor::zeros(Shape::r2(3, 2)));
        assert!(matches!(g.glu(odd), Err(crate::RoseError::Dimension(_))));
    }

    #[test]
    fn glu_matches_elementwise_oracle() {
        let mut g = Graph::new();
        let mut r = rng(5);
        let x = g.constant(random_tensor(Shape::r2(4, 7), &mut r));
        let y = g.glu(x).unwrap();
        let xv = g.value(x).clone();
        for c in 0..2 {
            for t in 0..7 {
                let expect = xv.at2(c, t) * kernels::sigmoid(xv.at2(2 + c, t));
                assert!((g.value(y).at2(c, t) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(Shape::r2(1, 4), vec![3.5; 4]).unwrap());
        let y = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let x = g.constant(Tensor::new(Shape::r2(1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);

        let mut r = rng(6);
        let x = g.constant(random_tensor(Shape::r2(5, 11), &mut r));
        let y = g.global_avg_pool(x).unwrap();
        let xv = g.value(x).clone();
        for ch in 0..5 {
            let mean: f64 = (0..11).map(|t| xv.at2(ch, t) as f64).sum::<f64>() / 11.0;
            assert!((g.value(y).data()[ch] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice1(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::from_slice1(&[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn broadcast_mul_matches_loop_oracle() {
        let mut g = Graph::new();
        let mut r = rng(7);
        let a = g.constant(random_tensor(Shape::r2(3, 4), &mut r));
        let col = g.constant(random_tensor(Shape::r2(3, 1), &mut r));
        let row = g.constant(random_tensor(Shape::r2(1, 4), &mut r));
        let yc = g.mul(a, col).unwrap();
        let yr = g.mul(a, row).unwrap();
        let (av, cv, rv) = (g.value(a).clone(), g.value(col).clone(), g.value(row).clone());
        for i in 0..3 {
            for j in 0..4 {
                assert!((g.value(yc).at2(i, j) - av.at2(i, j) * cv.data()[i]).abs() < 1e-7);
                assert!((g.value(yr).at2(i, j) - av.at2(i, j) * rv.data()[j]).abs() < 1e-7);
            }
        }
        // Non-broadcastable shapes are rejected.
        let bad = g.constant(Tensor::zeros(Shape::r2(2, 4)));
        assert!(matches!(g.mul(a, bad), Err(crate::RoseError::Dimension(_))));
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice1(&[1.0, -2.0, 3.0]));
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_repeated_uses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice1(&[1.5]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice1(&[1.0]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(crate::RoseError::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(crate::RoseError::Contract(_))));
    }

    #[test]
    fn narrow_concat_transpose_reshape_roundtrip() {
        let mut g = Graph::new();
        let mut r = rng(8);
        let x = g.constant(random_tensor(Shape::r2(3, 5), &mut r));
        let top = g.narrow(x, 0, 0, 1).unwrap();
        let rest = g.narrow(x, 0, 1, 2).unwrap();
        let back = g.concat(&[top, rest], 0).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());

        let left = g.narrow(x, 1, 0, 2).unwrap();
        let right = g.narrow(x, 1, 2, 3).unwrap();
        let back2 = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.value(back2).data(), g.value(x).data());

        let t = g.transpose(x).unwrap();
        let tt = g.transpose(t).unwrap();
        assert_eq!(g.value(tt).data(), g.value(x).data());

        let flat = g.reshape(x, Shape::r1(15)).unwrap();
        assert_eq!(g.value(flat).data(), g.value(x).data());
    }

    #[test]
    fn frames_layout_matches_hops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice1(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let f = g.frames(x, 4, 2).unwrap();
        assert_eq!(g.shape(f).dims(), &[2, 4]);
        assert_eq!(g.value(f).data(), &[0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0]);
        let short = g.constant(Tensor::from_slice1(&[0.0, 1.0]));
        assert!(matches!(g.frames(short, 4, 2), Err(crate::RoseError::Length(_))));
    }

    // Finite-difference checks for each differentiable op at small shapes.
    // The full suite (including the model blocks) runs in the acceptance
    // tests; these cover the tape primitives close to home.
    #[test]
    fn finite_differences_agree_for_primitives() {
        let mut r = rng(42);

        // conv1d wrt x, w, b
        {
            let mut g = Graph::new();
            let x = g.param(random_tensor(Shape::r2(2, 10), &mut r));
            let w = g.param(random_tensor(Shape::r3(3, 2, 4), &mut r));
            let b = g.param(random_tensor(Shape::r1(3), &mut r));
            let y = g.conv1d(x, w, b, 2).unwrap();
            let sq = g.square(y);
            let loss = g.sum_all(sq);
            let worst = gradcheck::check_gradients(&mut g, loss, &[("x", x), ("w", w), ("b", b)], 1e-3);
            assert!(worst < 1e-3, "conv1d gradcheck err {worst}");
        }

        // conv_transpose1d wrt x, w, b
        {
            let mut g = Graph::new();
            let x = g.param(random_tensor(Shape::r2(3, 5), &mut r));
            let w = g.param(random_tensor(Shape::r3(3, 2, 4), &mut r));
            let b = g.param(random_tensor(Shape::r1(2), &mut r));
            let y = g.conv_transpose1d(x, w, b, 2).unwrap();
            let sq = g.square(y);
            let loss = g.sum_all(sq);
            let worst = gradcheck::check_gradients(&mut g, loss, &[("x", x), ("w", w), ("b", b)], 1e-3);
            assert!(worst < 1e-3, "conv_transpose1d gradcheck err {worst}");
        }

        // matmul, add/mul with broadcast, glu, gap, activations, reductions
        {
            let mut g = Graph::new();
            let a = g.param(random_tensor(Shape::r2(4, 3), &mut r));
            let b = g.param(random_tensor(Shape::r2(3, 5), &mut r));
            let col = g.param(random_tensor(Shape::r2(4, 1), &mut r));
            let row = g.param(random_tensor(Shape::r2(1, 5), &mut r));
            let mm = g.matmul(a, b).unwrap();
            let mc = g.mul(mm, col).unwrap();
            let ac = g.add(mc, row).unwrap();
            let act = g.tanh(ac);
            let sg = g.sigmoid(act);
            let rl = g.relu(sg);
            let gp = g.global_avg_pool(rl).unwrap();
            let loss = g.sum_all(gp);
            let worst = gradcheck::check_gradients(
                &mut g,
                loss,
                &[("a", a), ("b", b), ("col", col), ("row", row)],
                1e-3,
            );
            assert!(worst < 1e-3, "pointwise chain gradcheck err {worst}");
        }

        // glu
        {
            let mut g = Graph::new();
            let x = g.param(random_tensor(Shape::r2(4, 6), &mut r));
            let y = g.glu(x).unwrap();
            let sq = g.square(y);
            let loss = g.mean_all(sq);
            let worst = gradcheck::check_gradients(&mut g, loss, &[("x", x)], 1e-3);
            assert!(worst < 1e-3, "glu gradcheck err {worst}");
        }

        // frames -> magnitude -> log_floor -> abs -> sqrt path (spectral ops)
        {
            let mut g = Graph::new();
            let n = 24;
            let data: Vec<f32> = (0..n).map(|_| r.gen_range(0.2..1.0)).collect();
            let x = g.param(Tensor::from_slice1(&data));
            let f = g.frames(x, 8, 4).unwrap();
            let cos = g.constant(random_tensor(Shape::r2(8, 5), &mut r));
            let sin = g.constant(random_tensor(Shape::r2(8, 5), &mut r));
            let re = g.matmul(f, cos).unwrap();
            let im = g.matmul(f, sin).unwrap();
            let mag = g.magnitude(re, im).unwrap();
            let lg = g.log_floor(mag, 1e-7);
            let ab = g.abs(lg);
            let sum = g.sum_all(ab);
            let loss = g.sqrt(sum);
            let worst = gradcheck::check_gradients(&mut g, loss, &[("x", x)], 1e-3);
            assert!(worst < 1e-3, "spectral chain gradcheck err {worst}");
        }

        // narrow / concat / transpose / reshape / scale / add_scalar / sub
        {
            let mut g = Graph::new();
            let x = g.param(random_tensor(Shape::r2(3, 4), &mut r));
            let y = g.param(random_tensor(Shape::r2(3, 4), &mut r));
            let top = g.narrow(x, 0, 0, 2).unwrap();
            let bot = g.narrow(x, 0, 2, 1).unwrap();
            let cat = g.concat(&[top, bot], 0).unwrap();
            let t = g.transpose(cat).unwrap();
            let back = g.transpose(t).unwrap();
            let d = g.sub(back, y).unwrap();
            let sc = g.scale(d, 1.7);
            let sh = g.add_scalar(sc, 0.3);
            let rs = g.reshape(sh, Shape::r1(12)).unwrap();
            let sq = g.square(rs);
            let loss = g.mean_all(sq);
            let worst = gradcheck::check_gradients(&mut g, loss, &[("x", x), ("y", y)], 1e-3);
            assert!(worst < 1e-3, "shape-op chain gradcheck err {worst}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let mut r = rng(99);
            let x = g.constant(random_tensor(Shape::r2(2, 32), &mut r));
            let w = g.constant(random_tensor(Shape::r3(4, 2, 8), &mut r));
            let b = g.constant(random_tensor(Shape::r1(4), &mut r));
            let y = g.conv1d(x, w, b, 4).unwrap();
            let s = g.sigmoid(y);
            g.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
