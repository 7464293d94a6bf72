//! Reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! The tape is eager: every operation computes its value immediately and
//! records enough structure to emit a vector-Jacobian product later.
//! Crucially, [`Tape::grad`] builds the backward pass *out of tape
//! operations*, so gradients are themselves differentiable. That is what
//! the gradient penalty (a loss on an input-gradient norm) and unrolled
//! surrogate updates (a loss through an inner gradient step) require.
//!
//! Shapes are always 2-D `(rows, cols)`; scalars are `(1,1)` and row/column
//! vectors are `(1,n)` / `(n,1)`. Binary elementwise ops broadcast a
//! `(1,n)`, `(n,1)` or `(1,1)` operand against a full matrix.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

#[derive(Clone)]
#[allow(dead_code)] // some op fields exist for completeness, not read by vjps
enum Op {
    Leaf,
    Const,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Recip(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    /// Elementwise multiply by a constant 0/1-ish mask captured at build time.
    /// Used for leaky-relu and clamp; the mask is treated as locally constant,
    /// which matches the a.e. second derivative of piecewise-linear maps.
    MaskMul(Var, Rc<Array2<f64>>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>, usize),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    PadRows(Var, usize, usize),
    PadCols(Var, usize, usize),
    /// x solves A x = b for square A.
    Solve(Var, Var),
    Reshape(Var),
    StopGrad(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn broadcast_to(small: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (m, n) = shape;
    let (sm, sn) = small.dim();
    if (sm, sn) == (m, n) {
        return small.clone();
    }
    let mut out = Array2::zeros((m, n));
    if sm == 1 && sn == n {
        for mut row in out.rows_mut() {
            row.assign(&small.row(0));
        }
    } else if sm == m && sn == 1 {
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.fill(small[[i, 0]]);
        }
    } else if sm == 1 && sn == 1 {
        out.fill(small[[0, 0]]);
    } else {
        panic!("cannot broadcast {:?} to {:?}", (sm, sn), shape);
    }
    out
}

/// True when `b` can broadcast against shape `a`.
fn compatible(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || (b.0 == 1 && b.1 == a.1) || (b.0 == a.0 && b.1 == 1) || b == (1, 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.id].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.id].value;
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[[0, 0]]
    }

    /// Differentiable leaf (parameters, attacked inputs).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable constant.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn zeros_const(&self, shape: (usize, usize)) -> Var {
        self.constant(Array2::zeros(shape))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let vb = &nodes[b.id].value;
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul dims {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let value = va.dot(vb);
        drop(nodes);
        self.push(value, Op::Matmul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    fn binary_value(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let vb = &nodes[b.id].value;
        let (big, small, flipped) = if compatible(va.dim(), vb.dim()) {
            (va, vb, false)
        } else if compatible(vb.dim(), va.dim()) {
            (vb, va, true)
        } else {
            panic!("incompatible shapes {:?} {:?}", va.dim(), vb.dim());
        };
        let expanded = broadcast_to(small, big.dim());
        let mut out = Array2::zeros(big.dim());
        if flipped {
            ndarray::Zip::from(&mut out)
                .and(&expanded)
                .and(big)
                .for_each(|o, &x, &y| *o = f(x, y));
        } else {
            ndarray::Zip::from(&mut out)
                .and(big)
                .and(&expanded)
                .for_each(|o, &x, &y| *o = f(x, y));
        }
        out
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.binary_value(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.binary_value(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.binary_value(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a, c))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.id].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Sum along axis 1, producing a `(rows, 1)` column.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    /// Sum along axis 0, producing a `(1, cols)` row.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.push(value, Op::SumCols(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id]
            .value
            .mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        // ln(1+e^x) with overflow guard
        let value = self.nodes.borrow()[a.id]
            .value
            .mapv(|x| if x > 30.0 { x } else { (1.0 + x.exp()).ln() });
        self.push(value, Op::Softplus(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let input = self.nodes.borrow()[a.id].value.clone();
        let mask = input.mapv(|x| if x >= 0.0 { 1.0 } else { slope });
        let value = &input * &mask;
        self.push(value, Op::MaskMul(a, Rc::new(mask)))
    }

    /// Clamp with straight-through slope 1 inside `[lo, hi]`, 0 outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let input = self.nodes.borrow()[a.id].value.clone();
        let mask = input.mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
        let value = input.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::MaskMul(a, Rc::new(mask)))
    }

    /// Clamp each row `i` of `a` to `[lo[i], hi[i]]`, slope 1 inside.
    pub fn clamp_per_row(&self, a: Var, lo: &[f64], hi: &[f64]) -> Var {
        let input = self.nodes.borrow()[a.id].value.clone();
        assert_eq!(input.nrows(), lo.len());
        assert_eq!(input.nrows(), hi.len());
        let mut value = input.clone();
        let mut mask = Array2::zeros(input.dim());
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let x = input[[i, j]];
                value[[i, j]] = x.clamp(lo[i], hi[i]);
                mask[[i, j]] = if x >= lo[i] && x <= hi[i] { 1.0 } else { 0.0 };
            }
        }
        self.push(value, Op::MaskMul(a, Rc::new(mask)))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let mut out = Array2::zeros((idx.len(), va.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&va.row(i));
        }
        drop(nodes);
        self.push(out, Op::GatherRows(a, Rc::new(idx.to_vec())))
    }

    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], out_rows: usize) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        assert_eq!(va.nrows(), idx.len());
        let mut out = Array2::zeros((out_rows, va.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &va.row(k);
        }
        drop(nodes);
        self.push(out, Op::ScatterAddRows(a, Rc::new(idx.to_vec()), out_rows))
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = concatenate(
            Axis(0),
            &[nodes[a.id].value.view(), nodes[b.id].value.view()],
        )
        .expect("concat_rows shape");
        drop(nodes);
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = concatenate(
            Axis(1),
            &[nodes[a.id].value.view(), nodes[b.id].value.view()],
        )
        .expect("concat_cols shape");
        drop(nodes);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&self, a: Var, r0: usize, r1: usize) -> Var {
        let value = self.nodes.borrow()[a.id]
            .value
            .slice(s![r0..r1, ..])
            .to_owned();
        self.push(value, Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&self, a: Var, c0: usize, c1: usize) -> Var {
        let value = self.nodes.borrow()[a.id]
            .value
            .slice(s![.., c0..c1])
            .to_owned();
        self.push(value, Op::SliceCols(a, c0, c1))
    }

    pub fn pad_rows(&self, a: Var, offset: usize, total: usize) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let mut out = Array2::zeros((total, va.ncols()));
        out.slice_mut(s![offset..offset + va.nrows(), ..]).assign(va);
        drop(nodes);
        self.push(out, Op::PadRows(a, offset, total))
    }

    pub fn pad_cols(&self, a: Var, offset: usize, total: usize) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let mut out = Array2::zeros((va.nrows(), total));
        out.slice_mut(s![.., offset..offset + va.ncols()]).assign(va);
        drop(nodes);
        self.push(out, Op::PadCols(a, offset, total))
    }

    /// Solve `A x = b` for square `A` via partial-pivot elimination.
    pub fn solve(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.id].value;
        let vb = &nodes[b.id].value;
        let value = crate::linalg::solve_lu(va, vb).expect("singular matrix in solve node");
        drop(nodes);
        self.push(value, Op::Solve(a, b))
    }

    pub fn stop_grad(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.id].value.clone();
        self.push(value, Op::StopGrad(a))
    }

    /// Row-major reshape to `(rows, cols)`; element count must match.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.nodes.borrow()[a.id].value.clone();
        assert_eq!(value.len(), rows * cols, "reshape element count");
        let flat: Vec<f64> = value.iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(out, Op::Reshape(a))
    }

    /// Row-wise log-sum-exp, `(B,N) -> (B,1)`, stabilized by the detached row max.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let vals = self.nodes.borrow()[a.id].value.clone();
        let rowmax = vals
            .map_axis(Axis(1), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .insert_axis(Axis(1));
        let m = self.constant(rowmax);
        let shifted = self.sub(a, m);
        let e = self.exp(shifted);
        let srow = self.sum_rows(e);
        let l = self.ln(srow);
        self.add(l, m)
    }

    /// Row-wise euclidean norm with an epsilon guard inside the square root.
    pub fn l2norm_rows(&self, a: Var, eps: f64) -> Var {
        let sq = self.mul(a, a);
        let s = self.sum_rows(sq);
        let s = self.add_scalar(s, eps);
        self.sqrt(s)
    }

    fn reduce_to(&self, g: Var, shape: (usize, usize)) -> Var {
        let gs = self.shape(g);
        if gs == shape {
            g
        } else if shape == (1, 1) {
            self.sum_all(g)
        } else if shape.0 == 1 && shape.1 == gs.1 {
            self.sum_cols(g)
        } else if shape.0 == gs.0 && shape.1 == 1 {
            self.sum_rows(g)
        } else {
            panic!("cannot reduce {:?} to {:?}", gs, shape);
        }
    }

    fn ones_like(&self, v: Var) -> Var {
        self.constant(Array2::ones(self.shape(v)))
    }

    /// Gradient of the scalar `y` with respect to each of `xs`.
    ///
    /// The returned nodes live on this tape, so the result can be
    /// differentiated again (needed for gradient penalties and unrolled
    /// inner updates).
    pub fn grad(&self, y: Var, xs: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), (1, 1), "grad target must be scalar");
        let frontier = y.id + 1;
        let mut adj: Vec<Option<Var>> = vec![None; frontier];
        adj[y.id] = Some(self.scalar_const(1.0));

        let accum = |adj: &mut Vec<Option<Var>>, v: Var, g: Var| {
            if v.id >= frontier {
                return;
            }
            adj[v.id] = Some(match adj[v.id] {
                None => g,
                Some(prev) => self.add(prev, g),
            });
        };

        for id in (0..frontier).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let out = Var { id };
            match op {
                Op::Leaf | Op::Const => {}
                Op::StopGrad(_) => {}
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    accum(&mut adj, a, ga);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    accum(&mut adj, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    accum(&mut adj, a, ga);
                }
                Op::Add(a, b) => {
                    let ga = self.reduce_to(g, self.shape(a));
                    accum(&mut adj, a, ga);
                    let gb = self.reduce_to(g, self.shape(b));
                    accum(&mut adj, b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = self.reduce_to(g, self.shape(a));
                    accum(&mut adj, a, ga);
                    let gneg = self.neg(g);
                    let gb = self.reduce_to(gneg, self.shape(b));
                    accum(&mut adj, b, gb);
                }
                Op::Mul(a, b) => {
                    let gb_side = self.mul(g, b);
                    let ga = self.reduce_to(gb_side, self.shape(a));
                    accum(&mut adj, a, ga);
                    let ga_side = self.mul(g, a);
                    let gb = self.reduce_to(ga_side, self.shape(b));
                    accum(&mut adj, b, gb);
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    accum(&mut adj, a, ga);
                }
                Op::Recip(a) => {
                    // d(1/x) = -1/x^2
                    let y2 = self.mul(out, out);
                    let t = self.mul(g, y2);
                    let ga = self.neg(t);
                    accum(&mut adj, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    accum(&mut adj, a, ga);
                }
                Op::AddScalar(a, _) => {
                    accum(&mut adj, a, g);
                }
                Op::SumAll(a) | Op::SumRows(a) | Op::SumCols(a) => {
                    let ones = self.ones_like(a);
                    let ga = self.mul(ones, g);
                    accum(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let y2 = self.mul(out, out);
                    let one_minus = self.add_scalar(self.neg(y2), 1.0);
                    let ga = self.mul(g, one_minus);
                    accum(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    let one_minus = self.add_scalar(self.neg(out), 1.0);
                    let d = self.mul(out, one_minus);
                    let ga = self.mul(g, d);
                    accum(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out);
                    accum(&mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    accum(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(out);
                    let half = self.scale(r, 0.5);
                    let ga = self.mul(g, half);
                    accum(&mut adj, a, ga);
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a);
                    let ga = self.mul(g, s);
                    accum(&mut adj, a, ga);
                }
                Op::MaskMul(a, mask) => {
                    let m = self.constant((*mask).clone());
                    let ga = self.mul(g, m);
                    accum(&mut adj, a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let rows = self.shape(a).0;
                    let ga = self.scatter_add_rows(g, &idx, rows);
                    accum(&mut adj, a, ga);
                }
                Op::ScatterAddRows(a, idx, _) => {
                    let ga = self.gather_rows(g, &idx);
                    accum(&mut adj, a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.shape(a).0;
                    let rb = self.shape(b).0;
                    let ga = self.slice_rows(g, 0, ra);
                    accum(&mut adj, a, ga);
                    let gb = self.slice_rows(g, ra, ra + rb);
                    accum(&mut adj, b, gb);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(a).1;
                    let cb = self.shape(b).1;
                    let ga = self.slice_cols(g, 0, ca);
                    accum(&mut adj, a, ga);
                    let gb = self.slice_cols(g, ca, ca + cb);
                    accum(&mut adj, b, gb);
                }
                Op::SliceRows(a, r0, _) => {
                    let total = self.shape(a).0;
                    let ga = self.pad_rows(g, r0, total);
                    accum(&mut adj, a, ga);
                }
                Op::SliceCols(a, c0, _) => {
                    let total = self.shape(a).1;
                    let ga = self.pad_cols(g, c0, total);
                    accum(&mut adj, a, ga);
                }
                Op::PadRows(a, offset, _) => {
                    let rows = self.shape(a).0;
                    let ga = self.slice_rows(g, offset, offset + rows);
                    accum(&mut adj, a, ga);
                }
                Op::PadCols(a, offset, _) => {
                    let cols = self.shape(a).1;
                    let ga = self.slice_cols(g, offset, offset + cols);
                    accum(&mut adj, a, ga);
                }
                Op::Solve(a, b) => {
                    // x = A^{-1} b:  g_b = A^{-T} g,  g_A = -g_b x^T
                    let at = self.transpose(a);
                    let gb = self.solve(at, g);
                    accum(&mut adj, b, gb);
                    let xt = self.transpose(out);
                    let prod = self.matmul(gb, xt);
                    let ga = self.neg(prod);
                    accum(&mut adj, a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.reshape(g, r, c);
                    accum(&mut adj, a, ga);
                }
            }
        }

        xs.iter()
            .map(|x| adj[x.id].unwrap_or_else(|| self.zeros_const(self.shape(*x))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_grad(mut f: impl FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let a0 = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let b0 = array![[0.5, -1.2], [0.8, 0.3], [-0.6, 0.9]];
        let f = |a: &Array2<f64>| {
            let t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b0.clone());
            let c = t.matmul(av, bv);
            let c = t.tanh(c);
            t.scalar(t.sum_all(c))
        };
        let t = Tape::new();
        let av = t.leaf(a0.clone());
        let bv = t.leaf(b0.clone());
        let c = t.tanh(t.matmul(av, bv));
        let loss = t.sum_all(c);
        let g = t.grad(loss, &[av])[0];
        let analytic = t.value(g);
        let numeric = fd_grad(f, &a0, 1e-6);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn broadcast_add_mul_grads() {
        let x0 = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let brow = array![[0.3, -0.2, 0.5]];
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let b = t.leaf(brow.clone());
        let y = t.add(x, b);
        let y = t.mul(y, y);
        let loss = t.sum_all(y);
        let gs = t.grad(loss, &[x, b]);
        let gb = t.value(gs[1]);
        // d/db sum((x+b)^2) = sum over rows of 2(x+b)
        let expect = {
            let y = &x0 + &brow.broadcast((2, 3)).unwrap();
            (y.mapv(|v| 2.0 * v)).sum_axis(Axis(0)).insert_axis(Axis(0))
        };
        assert!(max_rel_err(&gb, &expect) < 1e-12);
    }

    #[test]
    fn second_order_grad_of_gradient_norm() {
        // f(w) = ||grad_x (sum tanh(x w))||^2 at fixed x; check d f / d w by FD.
        let x0 = array![[0.4, -0.3], [0.7, 0.1]];
        let w0 = array![[0.5, -0.2], [0.3, 0.8]];
        let eval = |w: &Array2<f64>| -> f64 {
            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let wv = t.leaf(w.clone());
            let y = t.tanh(t.matmul(x, wv));
            let s = t.sum_all(y);
            let gx = t.grad(s, &[x])[0];
            let sq = t.mul(gx, gx);
            t.scalar(t.sum_all(sq))
        };
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let wv = t.leaf(w0.clone());
        let y = t.tanh(t.matmul(x, wv));
        let s = t.sum_all(y);
        let gx = t.grad(s, &[x])[0];
        let sq = t.mul(gx, gx);
        let norm2 = t.sum_all(sq);
        let gw = t.grad(norm2, &[wv])[0];
        let analytic = t.value(gw);
        let numeric = fd_grad(eval, &w0, 1e-5);
        assert!(
            max_rel_err(&analytic, &numeric) < 1e-6,
            "rel err {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn gather_scatter_concat_slice_grads() {
        let x0 = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let g1 = t.gather_rows(x, &[2, 0, 2]);
        let c = t.concat_cols(g1, g1);
        let sl = t.slice_cols(c, 1, 3);
        let loss = t.sum_all(t.mul(sl, sl));
        let gx = t.value(t.grad(loss, &[x])[0]);
        let f = |x: &Array2<f64>| {
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let g1 = t.gather_rows(xv, &[2, 0, 2]);
            let c = t.concat_cols(g1, g1);
            let sl = t.slice_cols(c, 1, 3);
            t.scalar(t.sum_all(t.mul(sl, sl)))
        };
        let numeric = fd_grad(f, &x0, 1e-6);
        assert!(max_rel_err(&gx, &numeric) < 1e-7);
    }

    #[test]
    fn solve_grad_matches_finite_differences() {
        let a0 = array![[3.0, 1.0], [1.0, 2.0]];
        let b0 = array![[1.0], [2.0]];
        let f = |a: &Array2<f64>| {
            let t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.leaf(b0.clone());
            let x = t.solve(av, bv);
            t.scalar(t.sum_all(t.mul(x, x)))
        };
        let t = Tape::new();
        let av = t.leaf(a0.clone());
        let bv = t.leaf(b0.clone());
        let x = t.solve(av, bv);
        let loss = t.sum_all(t.mul(x, x));
        let gs = t.grad(loss, &[av, bv]);
        let ga = t.value(gs[0]);
        let numeric = fd_grad(f, &a0, 1e-6);
        assert!(max_rel_err(&ga, &numeric) < 1e-6);
    }

    #[test]
    fn logsumexp_is_stable_and_correct() {
        let t = Tape::new();
        let x = t.leaf(array![[1000.0, 1001.0], [0.0, 0.0]]);
        let l = t.logsumexp_rows(x);
        let v = t.value(l);
        assert!((v[[0, 0]] - (1001.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
        assert!((v[[1, 0]] - 2.0f64.ln()).abs() < 1e-12);
        // gradient = softmax
        let s = t.sum_all(l);
        let g = t.value(t.grad(s, &[x])[0]);
        let p = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert!((g[[0, 0]] - p).abs() < 1e-9);
        assert!((g[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let y = t.mul(t.stop_grad(x), x); // value 4, grad should be 2 (only direct path)
        let g = t.value(t.grad(t.sum_all(y), &[x])[0]);
        assert_eq!(g[[0, 0]], 2.0);
    }

    #[test]
    fn leaky_relu_and_clamp_masks() {
        let t = Tape::new();
        let x = t.leaf(array![[-2.0, 3.0]]);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(y), array![[-0.4, 3.0]]);
        let g = t.value(t.grad(t.sum_all(y), &[x])[0]);
        assert_eq!(g, array![[0.2, 1.0]]);

        let x2 = t.leaf(array![[-1.0, 0.5, 9.0]]);
        let c = t.clamp(x2, 0.0, 5.0);
        assert_eq!(t.value(c), array![[0.0, 0.5, 5.0]]);
        let g2 = t.value(t.grad(t.sum_all(c), &[x2])[0]);
        assert_eq!(g2, array![[0.0, 1.0, 0.0]]);
    }
}
