//! Tape-based automatic differentiation with nested derivatives.
//!
//! Every value is a node on an append-only tape holding a `(lanes, width)`
//! array: `lanes` ranges over independent batch points, `width` over vector
//! components. Reverse sweeps come in two flavours:
//!
//! * [`Tape::grad`] emits the adjoint computation back onto the tape, so the
//!   returned gradients are ordinary nodes and can be differentiated again.
//!   Nesting these sweeps yields second derivatives of a field and, through
//!   the divergence form of the Laplace-Beltrami operator, third-order mixed
//!   derivatives of a loss with respect to network parameters.
//! * [`Tape::grad_values`] accumulates plain arrays without growing the tape;
//!   it is the outermost parameter sweep of the training loop.
//!
//! The primitive set is fixed and closed: every rule below emits only ops
//! from the same set, so sweeps of sweeps stay well-defined. Any non-finite
//! derivative surfaces as [`Error::NonFiniteDerivative`] instead of
//! propagating silently; unrealisable prescribed curvatures can legitimately
//! overflow during training and the trainer reports those batches rather
//! than crashing.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2, Axis};
use std::cell::RefCell;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddConst(Var, f64),
    MulConst(Var, f64),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Powi(Var, i32),
    /// `x (L,a)` times a matrix stored flat in `w (1, rows*cols)`.
    /// `trans == false`: requires `a == cols`, result `x * M^T` of width `rows`.
    /// `trans == true`: requires `a == rows`, result `x * M` of width `cols`.
    MatMul {
        x: Var,
        w: Var,
        rows: usize,
        cols: usize,
        trans: bool,
    },
    /// Lane-contracted outer product: `a (L,rows)`, `b (L,cols)` to
    /// `(1, rows*cols)` holding `A^T B` row-major.
    MatOuter {
        a: Var,
        b: Var,
        rows: usize,
        cols: usize,
    },
    SumLanes(Var),
    BroadcastLanes(Var, usize),
    SumWidth(Var),
    BroadcastWidth(Var, usize),
    Concat2(Var, Var),
    Slice {
        x: Var,
        offset: usize,
        len: usize,
    },
    Pad {
        x: Var,
        offset: usize,
        total: usize,
    },
}

impl Op {
    fn for_parents(&self, mut f: impl FnMut(Var)) {
        match *self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Concat2(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(a)
            | Op::AddConst(a, _)
            | Op::MulConst(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Powi(a, _)
            | Op::SumLanes(a)
            | Op::BroadcastLanes(a, _)
            | Op::SumWidth(a)
            | Op::BroadcastWidth(a, _)
            | Op::Slice { x: a, .. }
            | Op::Pad { x: a, .. } => f(a),
            Op::MatMul { x, w, .. } => {
                f(x);
                f(w);
            }
            Op::MatOuter { a, b, .. } => {
                f(a);
                f(b);
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise binary with lane broadcasting (a side with one lane repeats).
fn zip_broadcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    assert_eq!(a.ncols(), b.ncols(), "width mismatch in elementwise op");
    let (la, lb) = (a.nrows(), b.nrows());
    if la == lb {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        out
    } else if la == 1 {
        let mut out = b.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(a[(0, j)], *v);
            }
        }
        out
    } else if lb == 1 {
        let mut out = a.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(*v, b[(0, j)]);
            }
        }
        out
    } else {
        panic!("incompatible lane counts {la} vs {lb}");
    }
}

/// The computation record: an append-only tape of eagerly evaluated ops.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Array2<f64>>,
    sweeps: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Number of reverse sweeps emitted onto this record so far.
    pub fn nesting_depth(&self) -> usize {
        self.sweeps
    }

    /// Drops all nodes, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.sweeps = 0;
    }

    fn push(&mut self, op: Op, val: Array2<f64>) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var((self.ops.len() - 1) as u32)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.vals[v.ix()]
    }

    /// Value of a `(1,1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.vals[v.ix()];
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-scalar node");
        a[(0, 0)]
    }

    /// Column of a `(L,1)` node as a Vec.
    pub fn lane_values(&self, v: Var) -> Vec<f64> {
        let a = &self.vals[v.ix()];
        assert_eq!(a.ncols(), 1, "lane_values() on a non-column node");
        a.column(0).to_vec()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.vals[v.ix()].dim()
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.vals[v.ix()].iter().all(|x| x.is_finite())
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn lane_leaf(&mut self, vals: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((vals.len(), 1), vals.to_vec()).unwrap())
    }

    /// Matrix leaf stored flat as `(1, rows*cols)` row-major.
    pub fn matrix_leaf(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(data.len(), rows * cols);
        self.leaf(Array2::from_shape_vec((1, rows * cols), data.to_vec()).unwrap())
    }

    fn filled_like_shape(&mut self, shape: (usize, usize), v: f64) -> Var {
        self.leaf(Array2::from_elem(shape, v))
    }

    // ---- elementwise ops -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(&self.vals[a.ix()], &self.vals[b.ix()], |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(&self.vals[a.ix()], &self.vals[b.ix()], |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(&self.vals[a.ix()], &self.vals[b.ix()], |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(&self.vals[a.ix()], &self.vals[b.ix()], |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.ix()].mapv(|x| x + c);
        self.push(Op::AddConst(a, c), v)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.ix()].mapv(|x| x * c);
        self.push(Op::MulConst(a, c), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(stable_sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let v = self.vals[a.ix()].mapv(|x| x.powi(n));
        self.push(Op::Powi(a, n), v)
    }

    // ---- structured ops --------------------------------------------------

    fn mat_view(&self, w: Var, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        let a = &self.vals[w.ix()];
        assert_eq!(a.nrows(), 1, "matrix operand must have a single lane");
        assert_eq!(a.ncols(), rows * cols, "matrix operand width mismatch");
        a.view().into_shape_with_order((rows, cols)).unwrap()
    }

    /// `x * M^T` (`trans == false`) or `x * M` (`trans == true`) where `M`
    /// is the `(rows, cols)` matrix stored flat in `w`.
    pub fn matmul(&mut self, x: Var, w: Var, rows: usize, cols: usize, trans: bool) -> Var {
        let m = self.mat_view(w, rows, cols);
        let xv = &self.vals[x.ix()];
        let v = if trans {
            assert_eq!(xv.ncols(), rows);
            xv.dot(&m)
        } else {
            assert_eq!(xv.ncols(), cols);
            xv.dot(&m.t())
        };
        self.push(Op::MatMul { x, w, rows, cols, trans }, v)
    }

    /// `A^T B` contracted over lanes, flattened to `(1, rows*cols)`.
    pub fn mat_outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.vals[a.ix()], &self.vals[b.ix()]);
        assert_eq!(av.nrows(), bv.nrows(), "lane mismatch in mat_outer");
        let (rows, cols) = (av.ncols(), bv.ncols());
        let m = av.t().dot(bv);
        let flat = Array2::from_shape_vec((1, rows * cols), m.into_raw_vec_and_offset().0).unwrap();
        self.push(Op::MatOuter { a, b, rows, cols }, flat)
    }

    pub fn sum_lanes(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumLanes(a), v)
    }

    pub fn broadcast_lanes(&mut self, a: Var, lanes: usize) -> Var {
        let av = &self.vals[a.ix()];
        assert_eq!(av.nrows(), 1);
        let mut v = Array2::zeros((lanes, av.ncols()));
        for mut row in v.rows_mut() {
            row.assign(&av.row(0));
        }
        self.push(Op::BroadcastLanes(a, lanes), v)
    }

    pub fn mean_lanes(&mut self, a: Var) -> Var {
        let lanes = self.vals[a.ix()].nrows();
        let s = self.sum_lanes(a);
        self.mul_const(s, 1.0 / lanes as f64)
    }

    pub fn sum_width(&mut self, a: Var) -> Var {
        let v = self.vals[a.ix()].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumWidth(a), v)
    }

    pub fn broadcast_width(&mut self, a: Var, width: usize) -> Var {
        let av = &self.vals[a.ix()];
        assert_eq!(av.ncols(), 1);
        let mut v = Array2::zeros((av.nrows(), width));
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            row.fill(av[(i, 0)]);
        }
        self.push(Op::BroadcastWidth(a, width), v)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.vals[a.ix()], &self.vals[b.ix()]);
        assert_eq!(av.nrows(), bv.nrows(), "lane mismatch in concat");
        let mut v = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        v.slice_mut(ndarray::s![.., ..av.ncols()]).assign(av);
        v.slice_mut(ndarray::s![.., av.ncols()..]).assign(bv);
        self.push(Op::Concat2(a, b), v)
    }

    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Var {
        let v = self.vals[x.ix()]
            .slice(ndarray::s![.., offset..offset + len])
            .to_owned();
        self.push(Op::Slice { x, offset, len }, v)
    }

    pub fn pad(&mut self, x: Var, offset: usize, total: usize) -> Var {
        let xv = &self.vals[x.ix()];
        let mut v = Array2::zeros((xv.nrows(), total));
        v.slice_mut(ndarray::s![.., offset..offset + xv.ncols()])
            .assign(xv);
        self.push(Op::Pad { x, offset, total }, v)
    }

    // ---- reverse sweeps --------------------------------------------------

    /// Marks every node that depends on one of `wrt`.
    fn active_set(&self, upto: usize, wrt: &[Var]) -> Vec<bool> {
        let mut active = vec![false; upto];
        for v in wrt {
            active[v.ix()] = true;
        }
        for i in 0..upto {
            if active[i] {
                continue;
            }
            let mut dep = false;
            self.ops[i].for_parents(|p| dep |= active[p.ix()]);
            if dep {
                active[i] = true;
            }
        }
        active
    }

    /// Reverse sweep that emits the adjoint computation onto the tape.
    ///
    /// Seeds the output adjoint with ones, so for a `(L,1)` node whose lanes
    /// are independent functions of `(L,1)` leaves this returns the per-lane
    /// derivative. The returned nodes are differentiable in any enclosing
    /// sweep. Inputs `y` does not depend on get an exactly-zero gradient.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.sweeps += 1;
        let n = y.ix() + 1;
        let active = self.active_set(n, wrt);
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed = self.filled_like_shape(self.shape(y), 1.0);
        adj[y.ix()] = Some(seed);
        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(a) = adj[i] else { continue };
            self.emit_vjp(i, a, &mut adj, &active);
        }
        let mut out = Vec::with_capacity(wrt.len());
        for v in wrt {
            let g = match adj[v.ix()] {
                Some(g) => g,
                None => self.filled_like_shape(self.shape(*v), 0.0),
            };
            if !self.is_finite(g) {
                return Err(Error::NonFiniteDerivative);
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Adds `contrib` (shaped like node `target`'s value broadcast result)
    /// into the adjoint slot of `target`, lane-reducing if needed.
    fn accum_emit(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        let t_lanes = self.shape(target).0;
        let c = if self.shape(contrib).0 > t_lanes {
            self.sum_lanes(contrib)
        } else {
            contrib
        };
        adj[target.ix()] = Some(match adj[target.ix()] {
            None => c,
            Some(e) => self.add(e, c),
        });
    }

    fn emit_vjp(&mut self, i: usize, a: Var, adj: &mut [Option<Var>], active: &[bool]) {
        let node = Var(i as u32);
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Add(p, q) => {
                if active[p.ix()] {
                    self.accum_emit(adj, p, a);
                }
                if active[q.ix()] {
                    self.accum_emit(adj, q, a);
                }
            }
            Op::Sub(p, q) => {
                if active[p.ix()] {
                    self.accum_emit(adj, p, a);
                }
                if active[q.ix()] {
                    let c = self.neg(a);
                    self.accum_emit(adj, q, c);
                }
            }
            Op::Mul(p, q) => {
                if active[p.ix()] {
                    let c = self.mul(a, q);
                    self.accum_emit(adj, p, c);
                }
                if active[q.ix()] {
                    let c = self.mul(a, p);
                    self.accum_emit(adj, q, c);
                }
            }
            Op::Div(p, q) => {
                if active[p.ix()] {
                    let c = self.div(a, q);
                    self.accum_emit(adj, p, c);
                }
                if active[q.ix()] {
                    let az = self.mul(a, node);
                    let azq = self.div(az, q);
                    let c = self.neg(azq);
                    self.accum_emit(adj, q, c);
                }
            }
            Op::Neg(p) => {
                if active[p.ix()] {
                    let c = self.neg(a);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::AddConst(p, _) => {
                if active[p.ix()] {
                    self.accum_emit(adj, p, a);
                }
            }
            Op::MulConst(p, c0) => {
                if active[p.ix()] {
                    let c = self.mul_const(a, c0);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Exp(p) => {
                if active[p.ix()] {
                    let c = self.mul(a, node);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Ln(p) => {
                if active[p.ix()] {
                    let c = self.div(a, p);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Sin(p) => {
                if active[p.ix()] {
                    let cp = self.cos(p);
                    let c = self.mul(a, cp);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Cos(p) => {
                if active[p.ix()] {
                    let sp = self.sin(p);
                    let m = self.mul(a, sp);
                    let c = self.neg(m);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Tanh(p) => {
                if active[p.ix()] {
                    let zz = self.mul(node, node);
                    let neg = self.mul_const(zz, -1.0);
                    let one_minus = self.add_const(neg, 1.0);
                    let c = self.mul(a, one_minus);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Sigmoid(p) => {
                if active[p.ix()] {
                    let neg = self.mul_const(node, -1.0);
                    let one_minus = self.add_const(neg, 1.0);
                    let zz = self.mul(node, one_minus);
                    let c = self.mul(a, zz);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Sqrt(p) => {
                if active[p.ix()] {
                    let d = self.div(a, node);
                    let c = self.mul_const(d, 0.5);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Powi(p, n) => {
                if active[p.ix()] && n != 0 {
                    let pw = self.powi(p, n - 1);
                    let scaled = self.mul_const(pw, n as f64);
                    let c = self.mul(a, scaled);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::MatMul { x, w, rows, cols, trans } => {
                if active[x.ix()] {
                    let c = self.matmul(a, w, rows, cols, !trans);
                    self.accum_emit(adj, x, c);
                }
                if active[w.ix()] {
                    let c = if trans {
                        self.mat_outer(x, a)
                    } else {
                        self.mat_outer(a, x)
                    };
                    self.accum_emit(adj, w, c);
                }
            }
            Op::MatOuter { a: u, b: v, rows, cols } => {
                if active[u.ix()] {
                    let c = self.matmul(v, a, rows, cols, false);
                    self.accum_emit(adj, u, c);
                }
                if active[v.ix()] {
                    let c = self.matmul(u, a, rows, cols, true);
                    self.accum_emit(adj, v, c);
                }
            }
            Op::SumLanes(p) => {
                if active[p.ix()] {
                    let lanes = self.shape(p).0;
                    let c = self.broadcast_lanes(a, lanes);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::BroadcastLanes(p, _) => {
                if active[p.ix()] {
                    let c = self.sum_lanes(a);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::SumWidth(p) => {
                if active[p.ix()] {
                    let width = self.shape(p).1;
                    let c = self.broadcast_width(a, width);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::BroadcastWidth(p, _) => {
                if active[p.ix()] {
                    let c = self.sum_width(a);
                    self.accum_emit(adj, p, c);
                }
            }
            Op::Concat2(p, q) => {
                let wp = self.shape(p).1;
                let wq = self.shape(q).1;
                if active[p.ix()] {
                    let c = self.slice(a, 0, wp);
                    self.accum_emit(adj, p, c);
                }
                if active[q.ix()] {
                    let c = self.slice(a, wp, wq);
                    self.accum_emit(adj, q, c);
                }
            }
            Op::Slice { x, offset, .. } => {
                if active[x.ix()] {
                    let total = self.shape(x).1;
                    let c = self.pad(a, offset, total);
                    self.accum_emit(adj, x, c);
                }
            }
            Op::Pad { x, offset, .. } => {
                if active[x.ix()] {
                    let len = self.shape(x).1;
                    let c = self.slice(a, offset, len);
                    self.accum_emit(adj, x, c);
                }
            }
        }
    }

    /// Reverse sweep accumulating plain arrays; does not grow the tape.
    ///
    /// This is the outermost sweep of a training step: the result is not
    /// differentiable further, which is exactly what a parameter gradient
    /// needs.
    pub fn grad_values(&self, y: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        let n = y.ix() + 1;
        let active = self.active_set(n, wrt);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; n];
        adj[y.ix()] = Some(Array2::from_elem(self.shape(y), 1.0));
        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(a) = adj[i].take() else { continue };
            self.value_vjp(i, &a, &mut adj, &active);
            adj[i] = Some(a);
        }
        let mut out = Vec::with_capacity(wrt.len());
        for v in wrt {
            let g = adj[v.ix()]
                .take()
                .unwrap_or_else(|| Array2::zeros(self.shape(*v)));
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteDerivative);
            }
            out.push(g);
        }
        Ok(out)
    }

    fn accum_val(
        &self,
        adj: &mut [Option<Array2<f64>>],
        target: Var,
        contrib: Array2<f64>,
    ) {
        let t_lanes = self.shape(target).0;
        let c = if contrib.nrows() > t_lanes {
            contrib.sum_axis(Axis(0)).insert_axis(Axis(0))
        } else {
            contrib
        };
        match &mut adj[target.ix()] {
            slot @ None => *slot = Some(c),
            Some(e) => *e += &c,
        }
    }

    fn value_vjp(
        &self,
        i: usize,
        a: &Array2<f64>,
        adj: &mut [Option<Array2<f64>>],
        active: &[bool],
    ) {
        let val = |v: Var| &self.vals[v.ix()];
        match self.ops[i].clone() {
            Op::Leaf => {}
            Op::Add(p, q) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.clone());
                }
                if active[q.ix()] {
                    self.accum_val(adj, q, a.clone());
                }
            }
            Op::Sub(p, q) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.clone());
                }
                if active[q.ix()] {
                    self.accum_val(adj, q, a.mapv(|x| -x));
                }
            }
            Op::Mul(p, q) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(q), |x, y| x * y));
                }
                if active[q.ix()] {
                    self.accum_val(adj, q, zip_broadcast(a, val(p), |x, y| x * y));
                }
            }
            Op::Div(p, q) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(q), |x, y| x / y));
                }
                if active[q.ix()] {
                    let az = zip_broadcast(a, val(Var(i as u32)), |x, z| x * z);
                    self.accum_val(adj, q, zip_broadcast(&az, val(q), |x, y| -x / y));
                }
            }
            Op::Neg(p) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.mapv(|x| -x));
                }
            }
            Op::AddConst(p, _) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.clone());
                }
            }
            Op::MulConst(p, c0) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.mapv(|x| x * c0));
                }
            }
            Op::Exp(p) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(Var(i as u32)), |x, z| x * z));
                }
            }
            Op::Ln(p) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(p), |x, y| x / y));
                }
            }
            Op::Sin(p) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(p), |x, y| x * y.cos()));
                }
            }
            Op::Cos(p) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, zip_broadcast(a, val(p), |x, y| -x * y.sin()));
                }
            }
            Op::Tanh(p) => {
                if active[p.ix()] {
                    let z = val(Var(i as u32));
                    self.accum_val(adj, p, zip_broadcast(a, z, |x, t| x * (1.0 - t * t)));
                }
            }
            Op::Sigmoid(p) => {
                if active[p.ix()] {
                    let z = val(Var(i as u32));
                    self.accum_val(adj, p, zip_broadcast(a, z, |x, s| x * s * (1.0 - s)));
                }
            }
            Op::Sqrt(p) => {
                if active[p.ix()] {
                    let z = val(Var(i as u32));
                    self.accum_val(adj, p, zip_broadcast(a, z, |x, s| 0.5 * x / s));
                }
            }
            Op::Powi(p, n) => {
                if active[p.ix()] && n != 0 {
                    self.accum_val(
                        adj,
                        p,
                        zip_broadcast(a, val(p), |x, y| x * n as f64 * y.powi(n - 1)),
                    );
                }
            }
            Op::MatMul { x, w, rows, cols, trans } => {
                let m = self.mat_view(w, rows, cols);
                if active[x.ix()] {
                    let c = if trans { a.dot(&m.t()) } else { a.dot(&m) };
                    self.accum_val(adj, x, c);
                }
                if active[w.ix()] {
                    let g = if trans {
                        val(x).t().dot(a)
                    } else {
                        a.t().dot(val(x))
                    };
                    let flat =
                        Array2::from_shape_vec((1, rows * cols), g.into_raw_vec_and_offset().0)
                            .unwrap();
                    self.accum_val(adj, w, flat);
                }
            }
            Op::MatOuter { a: u, b: v, rows, cols } => {
                let m = a.view().into_shape_with_order((rows, cols)).unwrap();
                if active[u.ix()] {
                    self.accum_val(adj, u, val(v).dot(&m.t()));
                }
                if active[v.ix()] {
                    self.accum_val(adj, v, val(u).dot(&m));
                }
            }
            Op::SumLanes(p) => {
                if active[p.ix()] {
                    let lanes = self.shape(p).0;
                    let mut c = Array2::zeros((lanes, a.ncols()));
                    for mut row in c.rows_mut() {
                        row.assign(&a.row(0));
                    }
                    self.accum_val(adj, p, c);
                }
            }
            Op::BroadcastLanes(p, _) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::SumWidth(p) => {
                if active[p.ix()] {
                    let width = self.shape(p).1;
                    let mut c = Array2::zeros((a.nrows(), width));
                    for (i, mut row) in c.rows_mut().into_iter().enumerate() {
                        row.fill(a[(i, 0)]);
                    }
                    self.accum_val(adj, p, c);
                }
            }
            Op::BroadcastWidth(p, _) => {
                if active[p.ix()] {
                    self.accum_val(adj, p, a.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Concat2(p, q) => {
                let wp = self.shape(p).1;
                let wq = self.shape(q).1;
                if active[p.ix()] {
                    self.accum_val(adj, p, a.slice(ndarray::s![.., ..wp]).to_owned());
                }
                if active[q.ix()] {
                    self.accum_val(adj, q, a.slice(ndarray::s![.., wp..wp + wq]).to_owned());
                }
            }
            Op::Slice { x, offset, len } => {
                if active[x.ix()] {
                    let total = self.shape(x).1;
                    let mut c = Array2::zeros((a.nrows(), total));
                    c.slice_mut(ndarray::s![.., offset..offset + len]).assign(a);
                    self.accum_val(adj, x, c);
                }
            }
            Op::Pad { x, offset, .. } => {
                if active[x.ix()] {
                    let len = self.shape(x).1;
                    self.accum_val(
                        adj,
                        x,
                        a.slice(ndarray::s![.., offset..offset + len]).to_owned(),
                    );
                }
            }
        }
    }
}

// ---- generic scalar interface ---------------------------------------------

/// Arithmetic shared by plain floats and tape variables.
///
/// Closed-form fields (harmonics, prescribed curvatures, exact conformal
/// factors) are written once against this trait and instantiated both as
/// fast `f64` evaluations and as differentiable tape programs.
pub trait Real:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    /// A constant in the same evaluation context as `self`.
    fn lit(&self, c: f64) -> Self;
    fn scale(self, c: f64) -> Self;
    fn shift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl Real for f64 {
    fn lit(&self, c: f64) -> Self {
        c
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn shift(self, c: f64) -> Self {
        self + c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        stable_sigmoid(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// A tape variable viewed as a scalar expression.
#[derive(Clone, Copy)]
pub struct TapeScalar<'t> {
    pub cell: &'t RefCell<Tape>,
    pub var: Var,
}

impl<'t> TapeScalar<'t> {
    pub fn new(cell: &'t RefCell<Tape>, var: Var) -> Self {
        Self { cell, var }
    }
    fn apply(self, f: impl FnOnce(&mut Tape, Var) -> Var) -> Self {
        let var = f(&mut self.cell.borrow_mut(), self.var);
        Self { cell: self.cell, var }
    }
    fn apply2(self, o: Self, f: impl FnOnce(&mut Tape, Var, Var) -> Var) -> Self {
        let var = f(&mut self.cell.borrow_mut(), self.var, o.var);
        Self { cell: self.cell, var }
    }
}

impl std::ops::Add for TapeScalar<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.apply2(o, Tape::add)
    }
}
impl std::ops::Sub for TapeScalar<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.apply2(o, Tape::sub)
    }
}
impl std::ops::Mul for TapeScalar<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.apply2(o, Tape::mul)
    }
}
impl std::ops::Div for TapeScalar<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self.apply2(o, Tape::div)
    }
}
impl std::ops::Neg for TapeScalar<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.apply(Tape::neg)
    }
}

impl Real for TapeScalar<'_> {
    fn lit(&self, c: f64) -> Self {
        let shape = self.cell.borrow().shape(self.var);
        let var = self
            .cell
            .borrow_mut()
            .leaf(Array2::from_elem((1, 1.min(shape.1).max(1)), c));
        Self { cell: self.cell, var }
    }
    fn scale(self, c: f64) -> Self {
        self.apply(|t, v| t.mul_const(v, c))
    }
    fn shift(self, c: f64) -> Self {
        self.apply(|t, v| t.add_const(v, c))
    }
    fn exp(self) -> Self {
        self.apply(Tape::exp)
    }
    fn ln(self) -> Self {
        self.apply(Tape::ln)
    }
    fn sin(self) -> Self {
        self.apply(Tape::sin)
    }
    fn cos(self) -> Self {
        self.apply(Tape::cos)
    }
    fn tanh(self) -> Self {
        self.apply(Tape::tanh)
    }
    fn sigmoid(self) -> Self {
        self.apply(Tape::sigmoid)
    }
    fn sqrt(self) -> Self {
        self.apply(Tape::sqrt)
    }
    fn powi(self, n: i32) -> Self {
        self.apply(|t, v| t.powi(v, n))
    }
}

/// Runs `f` with the tape temporarily wrapped in a `RefCell`, so generic
/// scalar code can thread it through operator overloads.
pub fn with_cell<R>(tape: &mut Tape, f: impl FnOnce(&RefCell<Tape>) -> R) -> R {
    let cell = RefCell::new(std::mem::take(tape));
    let out = f(&cell);
    *tape = cell.into_inner();
    out
}

// ---- flat parameter carrier -------------------------------------------------

/// Flat parameter storage with a per-block shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub manifest: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(data: Vec<f64>, manifest: Vec<(usize, usize)>) -> Self {
        let total: usize = manifest.iter().map(|(r, c)| r * c).sum();
        assert_eq!(data.len(), total, "manifest does not match data length");
        Self { data, manifest }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            manifest: other.manifest.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat slices per manifest block, in manifest order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.manifest.len());
        let mut off = 0;
        for (r, c) in &self.manifest {
            out.push(&self.data[off..off + r * c]);
            off += r * c;
        }
        out
    }
}

// ---- convenience derivative helpers -----------------------------------------

/// Gradient of a scalar function of `k` scalar inputs.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tape.scalar_leaf(v)).collect();
    let y = f(&mut tape, &vars);
    let gs = tape.grad(y, &vars)?;
    Ok(gs.into_iter().map(|g| tape.scalar(g)).collect())
}

/// Second partial derivative d^2 f / dx_i dx_j via grad-of-grad.
pub fn second_derivative<F>(f: F, x: &[f64], i: usize, j: usize) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tape.scalar_leaf(v)).collect();
    let y = f(&mut tape, &vars);
    let first = tape.grad(y, &vars)?;
    let second = tape.grad(first[i], &[vars[j]])?;
    Ok(tape.scalar(second[0]))
}
