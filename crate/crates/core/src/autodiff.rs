//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! replays it in reverse and accumulates vector–Jacobian products. Scalars are
//! `1×1` matrices. Operations that need a fused kernel (the selective scan)
//! plug in through [`CustomOp`].

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

use crate::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward pass.
pub trait CustomOp {
    /// Returns one cotangent per input, in input order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    RmsNormRows(Var, Vec<f64>),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ReverseRows(Var),
    Sum(Var),
    Dot(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only computation record.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    requires_grad: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), requires_grad: true }
    }

    /// A tape whose custom ops may skip saving backward state.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), requires_grad: false }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding the scalar `v`.
    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch {:?} x {:?}", va.dim(), vb.dim());
            va.dot(&*vb)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
            &*va * &*vb
        };
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row` with a `1×n` row broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = &*self.value(a) + &*self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with a `1×n` row broadcast over the rows of `a`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = &*self.value(a) * &*self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `s[i]`, with `s` an `L×1` column.
    pub fn scale_rows(&self, a: Var, s: Var) -> Var {
        let value = {
            let (va, vs) = (self.value(a), self.value(s));
            assert_eq!(vs.dim(), (va.nrows(), 1), "scale_rows expects an Lx1 column");
            &*va * &*vs
        };
        self.push(value, Op::ScaleRows(a, s))
    }

    /// `a · s` for a `1×1` scalar variable `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let value = {
            let vs = self.value(s);
            assert_eq!(vs.dim(), (1, 1));
            &*self.value(a) * vs[[0, 0]]
        };
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `c - a` elementwise.
    pub fn rsub_scalar(&self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = softmax_axis(&self.value(a), Axis(1));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Softmax down the rows of each column.
    pub fn softmax_cols(&self, a: Var) -> Var {
        let value = softmax_axis(&self.value(a), Axis(0));
        self.push(value, Op::SoftmaxCols(a))
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without affine parameters.
    pub fn rms_norm_rows(&self, a: Var, eps: f64) -> Var {
        let (value, inv) = {
            let va = self.value(a);
            let inv: Vec<f64> = va
                .rows()
                .into_iter()
                .map(|r| 1.0 / (r.dot(&r) / r.len() as f64 + eps).sqrt())
                .collect();
            let mut out = va.clone();
            for (mut row, &k) in out.rows_mut().into_iter().zip(&inv) {
                row *= k;
            }
            (out, inv)
        };
        self.push(value, Op::RmsNormRows(a, inv))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Matrix>> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reverse_rows(&self, a: Var) -> Var {
        let value = self.value(a).slice(s![..;-1, ..]).to_owned();
        self.push(value, Op::ReverseRows(a))
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Frobenius inner product `Σ a⊙b` as a `1×1` scalar.
    pub fn dot(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "dot shape mismatch");
            Array2::from_elem((1, 1), (&*va * &*vb).sum())
        };
        self.push(value, Op::Dot(a, b))
    }

    pub fn custom(&self, inputs: &[Var], value: Matrix, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op))
    }

    /// Back-propagates a `1×1` output with unit seed.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward() needs a scalar output");
        self.backward_with(out, Array2::ones((1, 1)))
    }

    /// Back-propagates the cotangent `seed` of `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.dim(), seed.dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    acc(&mut grads, *row, (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, &g * val(*row));
                }
                Op::ScaleRows(a, sc) => {
                    acc(&mut grads, *sc, (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, &g * val(*sc));
                }
                Op::MulScalar(a, sc) => {
                    let k = val(*sc)[[0, 0]];
                    acc(&mut grads, *sc, Array2::from_elem((1, 1), (&g * val(*a)).sum()));
                    acc(&mut grads, *a, &g * k);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Softplus(a) => acc(&mut grads, *a, &g * &val(*a).mapv(sigmoid)),
                Op::Silu(a) => {
                    let d = val(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Sin(a) => acc(&mut grads, *a, &g * &val(*a).mapv(f64::cos)),
                Op::Cos(a) => acc(&mut grads, *a, &g * &val(*a).mapv(|x| -x.sin())),
                Op::SoftmaxRows(a) => acc(&mut grads, *a, softmax_backward(&node.value, &g, Axis(1))),
                Op::SoftmaxCols(a) => acc(&mut grads, *a, softmax_backward(&node.value, &g, Axis(0))),
                Op::RmsNormRows(a, inv) => {
                    // y = k·x with k = (mean x² + eps)^-1/2, so dx = k·(g − y·mean(g⊙y)).
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    let n = y.ncols() as f64;
                    for (i, &k) in inv.iter().enumerate() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let proj = gr.dot(&yr) / n;
                        Zip::from(dx.row_mut(i)).and(gr).and(yr).for_each(|d, &gv, &yv| {
                            *d = k * (gv - yv * proj);
                        });
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ReverseRows(a) => acc(&mut grads, *a, g.slice(s![..;-1, ..]).to_owned()),
                Op::Sum(a) => acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Dot(a, b) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, val(*b) * k);
                    acc(&mut grads, *b, val(*a) * k);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    assert_eq!(gs.len(), inputs.len(), "custom op returned wrong number of cotangents");
                    for (v, gi) in inputs.iter().zip(gs) {
                        acc(&mut grads, *v, gi);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads, shapes: nodes.iter().map(|n| n.value.dim()).collect() }
    }
}

/// Cotangents of every recorded value after a backward pass.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &Matrix, axis: Axis) -> Matrix {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let total = lane.sum();
        lane /= total;
    }
    out
}

fn softmax_backward(y: &Matrix, g: &Matrix, axis: Axis) -> Matrix {
    let mut dx = Array2::zeros(y.dim());
    Zip::from(dx.lanes_mut(axis)).and(y.lanes(axis)).and(g.lanes(axis)).for_each(|mut d, yl, gl| {
        let inner = yl.dot(&gl);
        Zip::from(&mut d).and(yl).and(gl).for_each(|dv, &yv, &gv| *dv = yv * (gv - inner));
    });
    dx
}
