//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep.
//! Shapes are always explicit: the only broadcasting is scalar-tensor
//! (`scale`, `add_scalar`, `mul_scalar`) and the dedicated `add_row`.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Gather index list; negative entries select an all-zero row.
pub type GatherIndex = Rc<Vec<i64>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalar(usize, usize),
    AddRow(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    SparseMatmul(Rc<CsrMatrix>, usize),
    GatherRows(usize, GatherIndex),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectCols(usize, Vec<usize>),
    SumAll(usize),
    MeanRows(usize),
    L1Norm(usize),
    L2Norm(usize),
    RowNorms(usize),
    SoftmaxRows(usize),
    LeakyRelu(usize, f64),
    EulerToRotmat(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddRow(..) => "add_row",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SparseMatmul(..) => "sparse_matmul",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SelectCols(..) => "select_cols",
            Op::SumAll(..) => "reduce_sum",
            Op::MeanRows(..) => "mean_rows",
            Op::L1Norm(..) => "l1_norm",
            Op::L2Norm(..) => "l2_norm",
            Op::RowNorms(..) => "row_norms",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::EulerToRotmat(..) => "euler_to_rotmat",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reject NaN/Inf in every recorded value.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: RefCell::default(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, v: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if self.check_finite {
            value.ensure_finite(op.name())?;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar root with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient, or zeros when the root does not depend on `v`.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape().to_vec()))
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers sized m*k, k*n and m*n with matching strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Intrinsic X-Y-Z Euler angles (radians) to a row-major rotation matrix,
/// `R = Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_xyz(a: f64, b: f64, c: f64) -> [f64; 9] {
    euler_xyz_parts(a, b, c).0
}

/// Rotation plus its partial derivatives with respect to a, b and c.
fn euler_xyz_parts(a: f64, b: f64, c: f64) -> ([f64; 9], [[f64; 9]; 3]) {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca];
    let ry = [cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb];
    let rz = [cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0];
    let drx = [0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa];
    let dry = [-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb];
    let drz = [-sc, -cc, 0.0, cc, -sc, 0.0, 0.0, 0.0, 0.0];
    let m = |x: &[f64; 9], y: &[f64; 9]| {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = (0..3).map(|k| x[i * 3 + k] * y[k * 3 + j]).sum();
            }
        }
        out
    };
    let r = m(&m(&rx, &ry), &rz);
    let da = m(&m(&drx, &ry), &rz);
    let db = m(&m(&rx, &dry), &rz);
    let dc = m(&m(&rx, &ry), &drz);
    (r, [da, db, dc])
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b] {
                if req(p) {
                    let ga = acc(grads, p, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if req(*b) {
                let gb = acc(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if req(*a) {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if req(*b) {
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if req(*a) {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if req(*b) {
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::Scale(a, s) => {
            let ga = acc(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
        }
        Op::AddScalar(a) => {
            let ga = acc(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            let av = val(*a).data();
            if req(*a) {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += sv * y);
            }
            if req(*s) {
                let dot: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                acc(grads, *s, 1)[0] += dot;
            }
        }
        Op::AddRow(a, b) => {
            if req(*a) {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if req(*b) {
                let cols = val(*b).numel();
                let gb = acc(grads, *b, cols);
                for row in g.chunks_exact(cols) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matmul lhs");
            let (_, n) = val(*b).dims2().expect("matmul rhs");
            if req(*a) {
                // dA = dC * B^T
                let bv = val(*b).data();
                let ga = acc(grads, *a, m * k);
                gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), ga);
            }
            if req(*b) {
                // dB = A^T * dC
                let av = val(*a).data();
                let gb = acc(grads, *b, k * n);
                gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2().expect("transpose input");
            let ga = acc(grads, *a, r * c);
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::SparseMatmul(s, b) => {
            let width = val(*b).numel() / s.ncols();
            let gb = acc(grads, *b, s.ncols() * width);
            s.tmul_dense_acc(g, width, gb);
        }
        Op::GatherRows(a, idx) => {
            let (_, c) = val(*a).dims2().expect("gather input");
            let n = val(*a).numel();
            let ga = acc(grads, *a, n);
            for (r, &src) in idx.iter().enumerate() {
                if src >= 0 {
                    let s = src as usize;
                    let dst = &mut ga[s * c..(s + 1) * c];
                    dst.iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Reshape(a) => {
            let ga = acc(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if req(p) {
                    let gp = acc(grads, p, len);
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2().expect("concat output");
            let mut col0 = 0;
            for &p in parts {
                let (_, c) = val(p).dims2().expect("concat part");
                if req(p) {
                    let gp = acc(grads, p, rows * c);
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + col0 + j];
                        }
                    }
                }
                col0 += c;
            }
        }
        Op::SelectCols(a, cols) => {
            let (rows, c) = val(*a).dims2().expect("select input");
            let k = cols.len();
            let ga = acc(grads, *a, rows * c);
            for r in 0..rows {
                for (j, &src) in cols.iter().enumerate() {
                    ga[r * c + src] += g[r * k + j];
                }
            }
        }
        Op::SumAll(a) => {
            let n = val(*a).numel();
            let ga = acc(grads, *a, n);
            ga.iter_mut().for_each(|x| *x += g[0]);
        }
        Op::MeanRows(a) => {
            let (rows, c) = val(*a).dims2().expect("mean input");
            let ga = acc(grads, *a, rows * c);
            let inv = 1.0 / rows as f64;
            for r in 0..rows {
                for j in 0..c {
                    ga[r * c + j] += g[j] * inv;
                }
            }
        }
        Op::L1Norm(a) => {
            let av = val(*a).data();
            let ga = acc(grads, *a, av.len());
            for (x, &v) in ga.iter_mut().zip(av) {
                *x += g[0] * sign(v);
            }
        }
        Op::L2Norm(a) => {
            let av = val(*a).data();
            let norm = out.item();
            let ga = acc(grads, *a, av.len());
            if norm > 0.0 {
                for (x, &v) in ga.iter_mut().zip(av) {
                    *x += g[0] * v / norm;
                }
            }
        }
        Op::RowNorms(a) => {
            let (rows, c) = val(*a).dims2().expect("row_norms input");
            let av = val(*a).data();
            let norms = out.data();
            let ga = acc(grads, *a, rows * c);
            for r in 0..rows {
                if norms[r] > 0.0 {
                    for j in 0..c {
                        ga[r * c + j] += g[r] * av[r * c + j] / norms[r];
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let (rows, c) = out.dims2().expect("softmax output");
            let y = out.data();
            let ga = acc(grads, *a, rows * c);
            for r in 0..rows {
                let yr = &y[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    ga[r * c + j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::LeakyRelu(a, alpha) => {
            let av = val(*a).data();
            let ga = acc(grads, *a, av.len());
            for i in 0..av.len() {
                ga[i] += if av[i] > 0.0 { g[i] } else { alpha * g[i] };
            }
        }
        Op::EulerToRotmat(a) => {
            let av = val(*a).data();
            let ga = acc(grads, *a, av.len());
            for (r, e) in av.chunks_exact(3).enumerate() {
                let (_, d) = euler_xyz_parts(e[0], e[1], e[2]);
                let gr = &g[r * 9..(r + 1) * 9];
                for k in 0..3 {
                    ga[r * 3 + k] += d[k].iter().zip(gr).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a).data();
            let ga = acc(grads, *a, av.len());
            for i in 0..av.len() {
                ga[i] += g[i] * sign(av[i]);
            }
        }
        Op::Square(a) => {
            let av = val(*a).data();
            let ga = acc(grads, *a, av.len());
            for i in 0..av.len() {
                ga[i] += 2.0 * av[i] * g[i];
            }
        }
        Op::Sqrt(a) => {
            let y = out.data();
            let ga = acc(grads, *a, y.len());
            for i in 0..y.len() {
                if y[i] > 0.0 {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            let ga = acc(grads, *a, y.len());
            for i in 0..y.len() {
                ga[i] += g[i] * y[i];
            }
        }
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

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.value())?;
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn zip_with(
        self,
        other: Var<'t>,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, name)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        self.unary(op, |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.map(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.map(Op::AddScalar(self.id), |x| x + s)
    }

    /// Multiplies every element by a one-element var.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&s);
        let value = {
            let sv = s.value();
            if sv.numel() != 1 {
                return Err(Error::Shape(format!("mul_scalar: factor has shape {:?}", sv.shape())));
            }
            let k = sv.item();
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * k).collect())?
        };
        let rg = self.tape.requires(&[self.id, s.id]);
        self.tape.push(value, Op::MulScalar(self.id, s.id), rg)
    }

    /// Adds `row` (numel = column count) to every row of a matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&row);
        let value = {
            let a = self.value();
            let b = row.value();
            let (_, c) = a.dims2()?;
            if b.numel() != c {
                return Err(Error::Shape(format!(
                    "add_row: matrix {:?} with row of {} values",
                    a.shape(),
                    b.numel()
                )));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_exact_mut(c) {
                chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.requires(&[self.id, row.id]);
        self.tape.push(value, Op::AddRow(self.id, row.id), rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut c);
            Tensor::new(vec![m, n], c)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, Op::Matmul(self.id, other.id), rg)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id), |a| {
            let (r, c) = a.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)
        })
    }

    /// `matrix * self` for a constant sparse matrix; `self` is `ncols x d`.
    pub fn sparse_matmul(self, matrix: Rc<CsrMatrix>) -> Result<Var<'t>> {
        let value = {
            let b = self.value();
            let (rows, d) = b.dims2()?;
            if rows != matrix.ncols() {
                return Err(Error::Shape(format!(
                    "sparse_matmul: {}x{} times {:?}",
                    matrix.nrows(),
                    matrix.ncols(),
                    b.shape()
                )));
            }
            Tensor::new(vec![matrix.nrows(), d], matrix.mul_dense(b.data(), d)?)?
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::SparseMatmul(matrix, self.id), rg)
    }

    /// Selects rows by index; negative indices yield zero rows.
    pub fn gather_rows(self, index: GatherIndex) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let (rows, c) = a.dims2()?;
            let mut data = vec![0.0; index.len() * c];
            for (r, &src) in index.iter().enumerate() {
                if src >= 0 {
                    let s = src as usize;
                    if s >= rows {
                        return Err(Error::Shape(format!(
                            "gather_rows: index {s} out of range for {rows} rows"
                        )));
                    }
                    data[r * c..(r + 1) * c].copy_from_slice(&a.data()[s * c..(s + 1) * c]);
                }
            }
            Tensor::new(vec![index.len(), c], data)?
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::GatherRows(self.id, index), rg)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        self.unary(Op::Reshape(self.id), |a| a.clone().reshaped(shape))
    }

    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'t>> {
        let cols = cols.to_vec();
        let picked = cols.clone();
        self.unary(Op::SelectCols(self.id, cols), move |a| {
            let (rows, c) = a.dims2()?;
            if let Some(&bad) = picked.iter().find(|&&j| j >= c) {
                return Err(Error::Shape(format!("select_cols: column {bad} of {c}")));
            }
            let mut data = Vec::with_capacity(rows * picked.len());
            for r in 0..rows {
                data.extend(picked.iter().map(|&j| a.data()[r * c + j]));
            }
            Tensor::new(vec![rows, picked.len()], data)
        })
    }

    pub fn reduce_sum(self) -> Result<Var<'t>> {
        self.unary(Op::SumAll(self.id), |a| Ok(Tensor::scalar(a.data().iter().sum())))
    }

    /// Column means of a matrix as a `1 x cols` row.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        self.unary(Op::MeanRows(self.id), |a| {
            let (rows, c) = a.dims2()?;
            if rows == 0 {
                return Err(Error::Shape("mean_rows over zero rows".into()));
            }
            let mut data = vec![0.0; c];
            for row in a.data().chunks_exact(c) {
                data.iter_mut().zip(row).for_each(|(x, y)| *x += y);
            }
            data.iter_mut().for_each(|x| *x /= rows as f64);
            Tensor::new(vec![1, c], data)
        })
    }

    pub fn l1_norm(self) -> Result<Var<'t>> {
        self.unary(Op::L1Norm(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().map(|x| x.abs()).sum()))
        })
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.unary(Op::L2Norm(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().map(|x| x * x).sum::<f64>().sqrt()))
        })
    }

    /// Euclidean norm of every row, as an `rows x 1` column.
    pub fn row_norms(self) -> Result<Var<'t>> {
        self.unary(Op::RowNorms(self.id), |a| {
            let (rows, c) = a.dims2()?;
            let data = if c == 0 {
                vec![0.0; rows]
            } else {
                a.data()
                    .chunks_exact(c)
                    .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect()
            };
            Tensor::new(vec![rows, 1], data)
        })
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SoftmaxRows(self.id), |a| {
            let (rows, c) = a.dims2()?;
            if c == 0 {
                return Err(Error::Shape("softmax over an empty axis".into()));
            }
            let mut data = a.data().to_vec();
            for r in 0..rows {
                let row = &mut data[r * c..(r + 1) * c];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Slope 1 for positive inputs and `alpha` otherwise, including at 0.
    pub fn leaky_relu(self, alpha: f64) -> Result<Var<'t>> {
        self.map(Op::LeakyRelu(self.id, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    /// `n x 3` Euler angles to `n x 9` row-major rotation matrices.
    pub fn euler_to_rotmat(self) -> Result<Var<'t>> {
        self.unary(Op::EulerToRotmat(self.id), |a| {
            let (rows, c) = a.dims2()?;
            if c != 3 {
                return Err(Error::Shape(format!("euler_to_rotmat: {:?}", a.shape())));
            }
            let data = a
                .data()
                .chunks_exact(3)
                .flat_map(|e| euler_xyz(e[0], e[1], e[2]))
                .collect();
            Tensor::new(vec![rows, 9], data)
        })
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.map(Op::Exp(self.id), f64::exp)
    }
}

/// Row-wise concatenation (first axis) of rank-2 vars with equal widths.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let tape = first.tape;
    let value = {
        let (_, c) = first.value().dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.check_same_tape(p);
            let v = p.value();
            let (r, pc) = v.dims2()?;
            if pc != c {
                return Err(Error::Shape(format!("concat_rows: widths {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, c], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    tape.push(value, Op::ConcatRows(ids), rg)
}

/// Column-wise concatenation of rank-2 vars with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let tape = first.tape;
    let value = {
        let (rows, _) = first.value().dims2()?;
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &vals {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: row counts {rows} and {r}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(vec![rows, total], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    tape.push(value, Op::ConcatCols(ids), rg)
}

/// Sum of several same-shape vars.
pub fn sum_all<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = parts.iter();
    let mut total = *it
        .next()
        .ok_or_else(|| Error::Shape("sum of zero tensors".into()))?;
    for p in it {
        total = total.add(*p)?;
    }
    Ok(total)
}
