//! Reverse accumulation over dense matrices.
//!
//! Every node holds a dense `f64` matrix. Activations use the row convention:
//! a batch of `n` vectors of width `d` is an `n × d` matrix, and
//! [`Tape::linear`] computes `x·Wᵀ + 1·bᵀ` so the weight layout matches
//! [`Mlp1h`](super::Mlp1h).
//!
//! Besides the usual primitives the op set contains a few fused operations
//! (Laplace kernel bases, Fourier time embedding, unit-lower-triangular
//! products and solves, and the diffusion quadratic form of the pricing
//! residual). Each carries a hand-derived adjoint and is covered by the
//! finite-difference tests at the bottom of this file.

use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::DMatrix;

use super::mlp::{sigmoid, softplus};
use crate::error::{contract, Result};

/// Handle to a node on a [`Tape`].
pub type Var = usize;

/// Which time-domain basis a [`Tape::kernel_basis`] node evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPart {
    /// `2 e^{-aτ} cos(ωτ)` (real part of a conjugate pair).
    Cos,
    /// `2 e^{-aτ} sin(ωτ)` (imaginary part of a conjugate pair).
    Sin,
    /// `e^{-aτ}` (single real pole).
    Real,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    RowSum(Var),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    TimeEmbed { freq: Var, times: Rc<[f64]> },
    Kernel { raw: Var, raw_idx: usize, im: Option<(Var, usize)>, tau: Rc<DMatrix<f64>>, part: KernelPart },
    UnitLowerMul { l: Var, v: Var },
    UnitLowerSolve { l: Var, v: Var },
    QuadForm { w: Var, l: Var, d: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
}

/// Index of entry `(i, j)`, `i > j`, in a packed strictly-lower triangle.
#[inline]
pub fn tril_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

/// Dimension `d` with `d(d-1)/2 == len`.
pub fn tril_dim(len: usize) -> Option<usize> {
    (1..4096).find(|d| d * (d - 1) / 2 == len)
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    fn push(&mut self, op: Op) -> Var {
        let value = {
            let nodes = &self.nodes;
            compute(&op, &|i| &nodes[i].value)
        };
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { op: Op::Const, value });
        self.nodes.len() - 1
    }

    pub fn row_vector(&mut self, values: &[f64]) -> Var {
        self.constant(DMatrix::from_row_slice(1, values.len(), values))
    }

    /// Leaf whose adjoint is reported for parameter block `block`.
    pub fn param(&mut self, block: usize, value: &DMatrix<f64>) -> Var {
        self.nodes.push(Node { op: Op::Param(block), value: value.clone() });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul shape");
        self.push(Op::MatMul(a, b))
    }

    /// `x·Wᵀ (+ 1·bᵀ)` with `x: n×din`, `W: h×din`, `b: h×1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        assert_eq!(self.value(x).ncols(), self.value(w).ncols(), "linear input width");
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), (self.value(w).nrows(), 1), "linear bias shape");
        }
        self.push(Op::Linear { x, w, b })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "{what} shape");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.push(Op::Div(a, b))
    }

    /// Adds the `1 × m` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.value(r).shape(), (1, self.value(a).ncols()), "add_row shape");
        self.push(Op::AddRow(a, r))
    }

    /// Multiplies every row of `a` elementwise by the `1 × m` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.value(r).shape(), (1, self.value(a).ncols()), "mul_row shape");
        self.push(Op::MulRow(a, r))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddScalar(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    /// Elementwise `max(0, x)`; the adjoint at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `n × m → n × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        self.push(Op::RowSum(a))
    }

    /// Horizontal concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).nrows(), self.value(b).nrows(), "concat rows");
        self.push(Op::Concat(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).ncols(), "slice_cols out of range");
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        assert!(i < self.value(a).nrows(), "row out of range");
        self.push(Op::Row(a, i))
    }

    /// Fourier features `[sin 2πf_k t, cos 2πf_k t]_k` with `f = softplus(freq_raw)`;
    /// one row per time.
    pub fn time_embed(&mut self, freq_raw: Var, times: &[f64]) -> Var {
        assert_eq!(self.value(freq_raw).ncols(), 1, "frequency block must be a column");
        self.push(Op::TimeEmbed { freq: freq_raw, times: times.into() })
    }

    /// Time-domain basis of one Laplace pole evaluated on a lag matrix `tau`;
    /// entries with negative lag are exactly zero.
    pub fn kernel_basis(
        &mut self,
        raw: Var,
        raw_idx: usize,
        im: Option<(Var, usize)>,
        tau: Rc<DMatrix<f64>>,
        part: KernelPart,
    ) -> Var {
        assert!(raw_idx < self.value(raw).len());
        assert_eq!(part == KernelPart::Real, im.is_none(), "real poles take no imaginary part");
        self.push(Op::Kernel { raw, raw_idx, im, tau, part })
    }

    /// Row-wise `L_p v_p` where `L_p = I + strictly_lower(l_p)`.
    pub fn unit_lower_mul(&mut self, l: Var, v: Var) -> Var {
        self.check_tril(l, v);
        self.push(Op::UnitLowerMul { l, v })
    }

    /// Row-wise `L_p⁻¹ v_p` by forward substitution.
    pub fn unit_lower_solve(&mut self, l: Var, v: Var) -> Var {
        self.check_tril(l, v);
        self.push(Op::UnitLowerSolve { l, v })
    }

    /// `Q[p, m] = ‖D_p L_pᵀ w_m‖²` for the rows `w_m` of `w` (`h × d`),
    /// i.e. the diagonal of `W σ_p σ_pᵀ Wᵀ` with `σ_p = L_p D_p`.
    pub fn quad_form(&mut self, w: Var, l: Var, d: Var) -> Var {
        self.check_tril(l, d);
        assert_eq!(self.value(w).ncols(), self.value(d).ncols(), "quad_form width");
        self.push(Op::QuadForm { w, l, d })
    }

    fn check_tril(&self, l: Var, v: Var) {
        let (lv, vv) = (self.value(l), self.value(v));
        assert_eq!(lv.nrows(), vv.nrows(), "triangular batch rows");
        let d = vv.ncols();
        assert_eq!(lv.ncols(), d * (d - 1) / 2, "packed triangle width");
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if self.value(loss).shape() != (1, 1) {
            return contract(format!("loss node has shape {:?}, expected 1x1", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=loss).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints { grads })
    }

    /// Adds parameter adjoints into `out`, indexed by block.
    pub fn accumulate_param_grads(&self, adj: &Adjoints, out: &mut [DMatrix<f64>]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(block), Some(g)) = (&node.op, adj.get(i)) {
                out[*block] += g;
            }
        }
    }

    /// Recomputes every non-leaf value from the leaves.
    pub fn replay(&self) -> Vec<DMatrix<f64>> {
        let mut vals: Vec<DMatrix<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Const | Op::Param(_) => node.value.clone(),
                _ => compute(&node.op, &|i| &vals[i]),
            };
            vals.push(v);
        }
        vals
    }

    fn propagate(&self, idx: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let val = |i: Var| &self.nodes[i].value;
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g * val(*b).transpose();
                let gb = val(*a).tr_mul(g);
                accumulate(&mut grads[*a], ga);
                accumulate(&mut grads[*b], gb);
            }
            Op::Linear { x, w, b } => {
                accumulate(&mut grads[*x], g * val(*w));
                accumulate(&mut grads[*w], g.tr_mul(val(*x)));
                if let Some(b) = b {
                    let gb = DMatrix::from_fn(g.ncols(), 1, |m, _| g.column(m).sum());
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*b], -g);
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[*a], g.component_mul(val(*b)));
                accumulate(&mut grads[*b], g.component_mul(val(*a)));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(&mut grads[*a], g.component_div(bv));
                let gb = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| -g[(i, j)] * av[(i, j)] / (bv[(i, j)] * bv[(i, j)]));
                accumulate(&mut grads[*b], gb);
            }
            Op::AddRow(a, r) => {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*r], DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum()));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                accumulate(&mut grads[*a], DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * rv[(0, j)]));
                let gr = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).dot(&av.column(j)));
                accumulate(&mut grads[*r], gr);
            }
            Op::Scale(a, c) => accumulate(&mut grads[*a], g * *c),
            Op::AddScalar(a, _) => accumulate(&mut grads[*a], g.clone()),
            Op::Tanh(a) => {
                accumulate(&mut grads[*a], g.zip_map(out, |gi, t| gi * (1.0 - t * t)));
            }
            Op::Softplus(a) => {
                accumulate(&mut grads[*a], g.zip_map(val(*a), |gi, x| gi * sigmoid(x)));
            }
            Op::Square(a) => {
                accumulate(&mut grads[*a], g.zip_map(val(*a), |gi, x| 2.0 * gi * x));
            }
            Op::Relu(a) => {
                accumulate(&mut grads[*a], g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Sum(a) => {
                let s = g[(0, 0)];
                let av = val(*a);
                accumulate(&mut grads[*a], DMatrix::from_element(av.nrows(), av.ncols(), s));
            }
            Op::RowSum(a) => {
                let av = val(*a);
                accumulate(&mut grads[*a], DMatrix::from_fn(av.nrows(), av.ncols(), |i, _| g[(i, 0)]));
            }
            Op::Concat(a, b) => {
                let na = val(*a).ncols();
                let nb = val(*b).ncols();
                accumulate(&mut grads[*a], g.columns(0, na).into_owned());
                accumulate(&mut grads[*b], g.columns(na, nb).into_owned());
            }
            Op::SliceCols(a, start, len) => {
                let av = val(*a);
                let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                ga.columns_mut(*start, *len).copy_from(g);
                accumulate(&mut grads[*a], ga);
            }
            Op::Row(a, i) => {
                let av = val(*a);
                let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                ga.row_mut(*i).copy_from(g);
                accumulate(&mut grads[*a], ga);
            }
            Op::TimeEmbed { freq, times } => {
                let raw = val(*freq);
                let mut gf = DMatrix::zeros(raw.nrows(), 1);
                for k in 0..raw.nrows() {
                    let f = softplus(raw[(k, 0)]);
                    let mut acc = 0.0;
                    for (p, &t) in times.iter().enumerate() {
                        let w = 2.0 * PI * t;
                        let (s, c) = (w * f).sin_cos();
                        acc += g[(p, 2 * k)] * c * w - g[(p, 2 * k + 1)] * s * w;
                    }
                    gf[(k, 0)] = acc * sigmoid(raw[(k, 0)]);
                }
                accumulate(&mut grads[*freq], gf);
            }
            Op::Kernel { raw, raw_idx, im, tau, part } => {
                let r = val(*raw)[*raw_idx];
                let a = softplus(r);
                let omega = im.map(|(v, i)| val(v)[i]).unwrap_or(0.0);
                let (mut ga, mut gw) = (0.0, 0.0);
                for (k, &t) in tau.iter().enumerate() {
                    if t < 0.0 {
                        continue;
                    }
                    let gk = g[k];
                    ga += gk * -t * out[k];
                    if *part != KernelPart::Real {
                        let e = 2.0 * (-a * t).exp();
                        let (s, c) = (omega * t).sin_cos();
                        gw += match part {
                            KernelPart::Cos => gk * -e * s * t,
                            _ => gk * e * c * t,
                        };
                    }
                }
                let rv = val(*raw);
                let mut gr = DMatrix::zeros(rv.nrows(), rv.ncols());
                gr[*raw_idx] = ga * sigmoid(r);
                accumulate(&mut grads[*raw], gr);
                if let Some((v, i)) = im {
                    let iv = val(*v);
                    let mut gi = DMatrix::zeros(iv.nrows(), iv.ncols());
                    gi[*i] = gw;
                    accumulate(&mut grads[*v], gi);
                }
            }
            Op::UnitLowerMul { l, v } => {
                let (lv, vv) = (val(*l), val(*v));
                let d = vv.ncols();
                let mut gl = DMatrix::zeros(lv.nrows(), lv.ncols());
                let mut gv = g.clone();
                for p in 0..vv.nrows() {
                    for i in 1..d {
                        for j in 0..i {
                            let k = tril_index(i, j);
                            gv[(p, j)] += lv[(p, k)] * g[(p, i)];
                            gl[(p, k)] = g[(p, i)] * vv[(p, j)];
                        }
                    }
                }
                accumulate(&mut grads[*l], gl);
                accumulate(&mut grads[*v], gv);
            }
            Op::UnitLowerSolve { l, v } => {
                let lv = val(*l);
                let d = out.ncols();
                let mut gl = DMatrix::zeros(lv.nrows(), lv.ncols());
                let mut gv = DMatrix::zeros(out.nrows(), d);
                for p in 0..out.nrows() {
                    // back substitution with Lᵀ
                    for i in (0..d).rev() {
                        let mut acc = g[(p, i)];
                        for k in i + 1..d {
                            acc -= lv[(p, tril_index(k, i))] * gv[(p, k)];
                        }
                        gv[(p, i)] = acc;
                    }
                    for i in 1..d {
                        for j in 0..i {
                            gl[(p, tril_index(i, j))] = -gv[(p, i)] * out[(p, j)];
                        }
                    }
                }
                accumulate(&mut grads[*l], gl);
                accumulate(&mut grads[*v], gv);
            }
            Op::QuadForm { w, l, d } => {
                let (wv, lv, dv) = (val(*w), val(*l), val(*d));
                let (h, dim) = (wv.nrows(), wv.ncols());
                let mut gw = DMatrix::zeros(h, dim);
                let mut gl = DMatrix::zeros(lv.nrows(), lv.ncols());
                let mut gd = DMatrix::zeros(dv.nrows(), dim);
                let mut y = vec![0.0; dim];
                let mut dy = vec![0.0; dim];
                for p in 0..dv.nrows() {
                    for m in 0..h {
                        lower_t_apply(lv, p, wv, m, &mut y);
                        let gpm = g[(p, m)];
                        for j in 0..dim {
                            let e = dv[(p, j)] * y[j];
                            gd[(p, j)] += gpm * 2.0 * e * y[j];
                            dy[j] = gpm * 2.0 * e * dv[(p, j)];
                        }
                        for i in 0..dim {
                            let mut acc = dy[i];
                            for j in 0..i {
                                let k = tril_index(i, j);
                                acc += lv[(p, k)] * dy[j];
                                gl[(p, k)] += dy[j] * wv[(m, i)];
                            }
                            gw[(m, i)] += acc;
                        }
                    }
                }
                accumulate(&mut grads[*w], gw);
                accumulate(&mut grads[*l], gl);
                accumulate(&mut grads[*d], gd);
            }
        }
    }
}

/// `y = L_pᵀ w_m` for the packed unit-lower triangle in row `p` of `l`.
fn lower_t_apply(l: &DMatrix<f64>, p: usize, w: &DMatrix<f64>, m: usize, y: &mut [f64]) {
    let dim = y.len();
    for j in 0..dim {
        let mut acc = w[(m, j)];
        for i in j + 1..dim {
            acc += l[(p, tril_index(i, j))] * w[(m, i)];
        }
        y[j] = acc;
    }
}

fn compute<'a>(op: &Op, val: &dyn Fn(Var) -> &'a DMatrix<f64>) -> DMatrix<f64> {
    match op {
        Op::Const | Op::Param(_) => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(*a) * val(*b),
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, din, h) = (xv.nrows(), xv.ncols(), wv.nrows());
            let mut out = DMatrix::zeros(n, h);
            for p in 0..n {
                for i in 0..din {
                    let xi = xv[(p, i)];
                    if xi == 0.0 {
                        continue;
                    }
                    let col = wv.column(i);
                    for m in 0..h {
                        out[(p, m)] += xi * col[m];
                    }
                }
                if let Some(b) = b {
                    let bv = val(*b);
                    for m in 0..h {
                        out[(p, m)] += bv[(m, 0)];
                    }
                }
            }
            out
        }
        Op::Add(a, b) => val(*a) + val(*b),
        Op::Sub(a, b) => val(*a) - val(*b),
        Op::Mul(a, b) => val(*a).component_mul(val(*b)),
        Op::Div(a, b) => val(*a).component_div(val(*b)),
        Op::AddRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            DMatrix::from_fn(av.nrows(), av.ncols(), |i, j| av[(i, j)] + rv[(0, j)])
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            DMatrix::from_fn(av.nrows(), av.ncols(), |i, j| av[(i, j)] * rv[(0, j)])
        }
        Op::Scale(a, c) => val(*a) * *c,
        Op::AddScalar(a, c) => val(*a).add_scalar(*c),
        Op::Tanh(a) => val(*a).map(f64::tanh),
        Op::Softplus(a) => val(*a).map(softplus),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Relu(a) => val(*a).map(|x| x.max(0.0)),
        Op::Sum(a) => DMatrix::from_element(1, 1, val(*a).sum()),
        Op::RowSum(a) => {
            let av = val(*a);
            DMatrix::from_fn(av.nrows(), 1, |i, _| av.row(i).sum())
        }
        Op::Concat(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut out = DMatrix::zeros(av.nrows(), av.ncols() + bv.ncols());
            out.columns_mut(0, av.ncols()).copy_from(av);
            out.columns_mut(av.ncols(), bv.ncols()).copy_from(bv);
            out
        }
        Op::SliceCols(a, start, len) => val(*a).columns(*start, *len).into_owned(),
        Op::Row(a, i) => val(*a).rows(*i, 1).into_owned(),
        Op::TimeEmbed { freq, times } => {
            let raw = val(*freq);
            let f_count = raw.nrows();
            let mut out = DMatrix::zeros(times.len(), 2 * f_count);
            for k in 0..f_count {
                let f = softplus(raw[(k, 0)]);
                for (p, &t) in times.iter().enumerate() {
                    let (s, c) = (2.0 * PI * f * t).sin_cos();
                    out[(p, 2 * k)] = s;
                    out[(p, 2 * k + 1)] = c;
                }
            }
            out
        }
        Op::Kernel { raw, raw_idx, im, tau, part } => {
            let a = softplus(val(*raw)[*raw_idx]);
            let omega = im.map(|(v, i)| val(v)[i]).unwrap_or(0.0);
            tau.map(|t| {
                if t < 0.0 {
                    return 0.0;
                }
                match part {
                    KernelPart::Real => (-a * t).exp(),
                    KernelPart::Cos => 2.0 * (-a * t).exp() * (omega * t).cos(),
                    KernelPart::Sin => 2.0 * (-a * t).exp() * (omega * t).sin(),
                }
            })
        }
        Op::UnitLowerMul { l, v } => {
            let (lv, vv) = (val(*l), val(*v));
            let d = vv.ncols();
            DMatrix::from_fn(vv.nrows(), d, |p, i| {
                let mut acc = vv[(p, i)];
                for j in 0..i {
                    acc += lv[(p, tril_index(i, j))] * vv[(p, j)];
                }
                acc
            })
        }
        Op::UnitLowerSolve { l, v } => {
            let (lv, vv) = (val(*l), val(*v));
            let d = vv.ncols();
            let mut out = DMatrix::zeros(vv.nrows(), d);
            for p in 0..vv.nrows() {
                for i in 0..d {
                    let mut acc = vv[(p, i)];
                    for j in 0..i {
                        acc -= lv[(p, tril_index(i, j))] * out[(p, j)];
                    }
                    out[(p, i)] = acc;
                }
            }
            out
        }
        Op::QuadForm { w, l, d } => {
            let (wv, lv, dv) = (val(*w), val(*l), val(*d));
            let (h, dim) = (wv.nrows(), wv.ncols());
            let mut y = vec![0.0; dim];
            let mut out = DMatrix::zeros(dv.nrows(), h);
            for p in 0..dv.nrows() {
                for m in 0..h {
                    lower_t_apply(lv, p, wv, m, &mut y);
                    out[(p, m)] = (0..dim).map(|j| (dv[(p, j)] * y[j]).powi(2)).sum();
                }
            }
            out
        }
    }
}
