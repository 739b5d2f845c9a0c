use std::sync::Arc;

use rayon::prelude::*;

use crate::scalar::{MatRef, Scalar};

use super::kernels::{axpy, dot, matmul, matmul_nt, matmul_tn};
use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index pairs `(i, j)` into the rows of a matrix.
pub type RowPairs = Arc<[(u32, u32)]>;

/// Selection of unordered row pairs `(i, j)` for [`Tape::pair_kernel_sum`].
///
/// Partner lists passed to [`PairFilter::only`] and [`PairFilter::except`]
/// hold, for every row, the sorted indices of its partners in both
/// directions (symmetric, without the row itself).
#[derive(Clone)]
pub struct PairFilter(Arc<FilterKind>);

enum FilterKind {
    All,
    Predicate(Box<dyn Fn(usize, usize) -> bool + Send + Sync>),
    Only(Arc<[Vec<u32>]>),
    Except(Arc<[Vec<u32>]>),
}

impl PairFilter {
    /// Pairs accepted by `f`, which is called with `i < j`.
    pub fn new(f: impl Fn(usize, usize) -> bool + Send + Sync + 'static) -> Self {
        PairFilter(Arc::new(FilterKind::Predicate(Box::new(f))))
    }

    pub fn all() -> Self {
        PairFilter(Arc::new(FilterKind::All))
    }

    /// Exactly the listed pairs.
    pub fn only(partners: Arc<[Vec<u32>]>) -> Self {
        PairFilter(Arc::new(FilterKind::Only(partners)))
    }

    /// Every pair except the listed ones.
    pub fn except(partners: Arc<[Vec<u32>]>) -> Self {
        PairFilter(Arc::new(FilterKind::Except(partners)))
    }

    /// Whether the accepted pairs are listed explicitly.
    fn is_sparse(&self) -> bool {
        matches!(&*self.0, FilterKind::Only(_))
    }

    pub fn includes(&self, i: usize, j: usize) -> bool {
        let (i, j) = (i.min(j), i.max(j));
        if i == j {
            return false;
        }
        match &*self.0 {
            FilterKind::All => true,
            FilterKind::Predicate(f) => f(i, j),
            FilterKind::Only(l) => l[i].binary_search(&(j as u32)).is_ok(),
            FilterKind::Except(l) => l[i].binary_search(&(j as u32)).is_err(),
        }
    }

    /// Calls `f(j)` for every accepted partner `j` of row `i` with
    /// `lo <= j < hi`, in increasing order.
    #[inline]
    fn for_each_partner(&self, i: usize, lo: usize, hi: usize, mut f: impl FnMut(usize)) {
        match &*self.0 {
            FilterKind::All => (lo..hi).filter(|&j| j != i).for_each(f),
            FilterKind::Predicate(p) => (lo..hi).filter(|&j| j != i && p(i.min(j), i.max(j))).for_each(f),
            FilterKind::Only(l) => {
                let row = &l[i];
                let from = row.partition_point(|&j| (j as usize) < lo);
                row[from..].iter().map(|&j| j as usize).take_while(|&j| j < hi).for_each(f)
            }
            FilterKind::Except(l) => {
                let row = &l[i];
                let mut k = row.partition_point(|&j| (j as usize) < lo);
                for j in lo..hi {
                    if k < row.len() && row[k] as usize == j {
                        k += 1;
                        continue;
                    }
                    if j != i {
                        f(j);
                    }
                }
            }
        }
    }
}

impl std::fmt::Debug for PairFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &*self.0 {
            FilterKind::All => "all",
            FilterKind::Predicate(_) => "predicate",
            FilterKind::Only(_) => "only",
            FilterKind::Except(_) => "except",
        };
        write!(f, "PairFilter({kind})")
    }
}

/// Function of the squared distance summed by [`Tape::pair_kernel_sum`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairKernel<S> {
    /// `exp(-d² / (2σ²))`
    Gaussian { sigma: S },
    /// `d²`
    SquaredDistance,
}

impl<S: Scalar> PairKernel<S> {
    /// Kernel value and its derivative with respect to `d²`.
    #[inline]
    fn eval(&self, d2: S) -> (S, S) {
        match *self {
            PairKernel::Gaussian { sigma } => {
                let c = S::one() / (S::of(2.0) * sigma * sigma);
                let k = (-d2 * c).exp();
                (k, -k * c)
            }
            PairKernel::SquaredDistance => (d2, S::one()),
        }
    }
}

#[inline]
fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: S = ca.remainder().iter().zip(cb.remainder()).map(|(&u, &v)| (u - v) * (u - v)).sum();
    for (u, v) in ca.zip(cb) {
        for l in 0..4 {
            let d = u[l] - v[l];
            acc[l] = acc[l] + d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Number of row chunks of [`Tape::pair_kernel_sum`].
const PAIR_CHUNKS: usize = 16;

/// Row boundaries splitting the upper triangle of an `m×m` pair matrix into
/// `chunks` pieces of roughly equal pair count.
fn balanced_row_chunks(m: usize, chunks: usize) -> Vec<usize> {
    let total = m * m.saturating_sub(1) / 2;
    let mut bounds = vec![0];
    let mut acc = 0;
    for i in 0..m {
        acc += m - 1 - i;
        if bounds.len() < chunks && acc * chunks >= total * bounds.len() && i + 1 < m {
            bounds.push(i + 1);
        }
    }
    bounds.push(m);
    bounds.dedup();
    bounds
}

/// Side of the square tiles of the dense pair loop.
const TILE: usize = 64;

/// Kernel sum over pairs `(i, j > i)` with `i` in `r0..r1`, and the gradient
/// of that sum for rows `r0..m` (empty unless `with_grad`).
///
/// Sparse filters visit their listed pairs directly. Dense filters work on
/// `TILE×TILE` blocks: squared distances come from the block Gram matrix
/// `‖xᵢ‖² + ‖xⱼ‖² − 2⟨xᵢ, xⱼ⟩` and the gradient from two block products.
#[allow(clippy::too_many_arguments)]
fn pair_chunk<S: Scalar>(
    x: &[S],
    norms: &[S],
    m: usize,
    n: usize,
    r0: usize,
    r1: usize,
    filter: &PairFilter,
    kernel: PairKernel<S>,
    with_grad: bool,
) -> (S, Vec<S>) {
    let mut sum = S::zero();
    let mut d = if with_grad { vec![S::zero(); (m - r0) * n] } else { Vec::new() };
    let two = S::of(2.0);
    let row = |k: usize| &x[k * n..(k + 1) * n];

    if filter.is_sparse() {
        for i in r0..r1 {
            let xi = row(i);
            filter.for_each_partner(i, i + 1, m, |j| {
                let xj = row(j);
                let (k, dk) = kernel.eval(sq_dist(xi, xj));
                sum = sum + k;
                if with_grad {
                    let c = two * dk;
                    let (lo, hi) = d.split_at_mut((j - r0) * n);
                    let di = &mut lo[(i - r0) * n..(i - r0 + 1) * n];
                    for (((a, b), &p), &q) in di.iter_mut().zip(&mut hi[..n]).zip(xi).zip(xj) {
                        let u = c * (p - q);
                        *a = *a + u;
                        *b = *b - u;
                    }
                }
            });
        }
        return (sum, d);
    }

    let mut gram = vec![S::zero(); TILE * TILE];
    let mut coef = vec![S::zero(); TILE * TILE];
    let mut rowsum = [S::zero(); TILE];
    let mut colsum = [S::zero(); TILE];
    for i0 in (r0..r1).step_by(TILE) {
        let i1 = (i0 + TILE).min(r1);
        let ti = i1 - i0;
        let xi_block = &x[i0 * n..i1 * n];
        for j0 in (i0..m).step_by(TILE) {
            let j1 = (j0 + TILE).min(m);
            let tj = j1 - j0;
            let xj_block = &x[j0 * n..j1 * n];
            S::gemm(ti, n, tj, S::one(), MatRef::row_major(xi_block, n), MatRef::transposed(xj_block, n), S::zero(), &mut gram, TILE);
            coef.iter_mut().for_each(|c| *c = S::zero());
            rowsum.iter_mut().for_each(|c| *c = S::zero());
            colsum.iter_mut().for_each(|c| *c = S::zero());
            let mut any = false;
            for i in i0..i1 {
                let a = i - i0;
                filter.for_each_partner(i, j0.max(i + 1), j1, |j| {
                    let b = j - j0;
                    let d2 = (norms[i] + norms[j] - two * gram[a * TILE + b]).max(S::zero());
                    let (k, dk) = kernel.eval(d2);
                    sum = sum + k;
                    let c = two * dk;
                    coef[a * TILE + b] = c;
                    rowsum[a] = rowsum[a] + c;
                    colsum[b] = colsum[b] + c;
                    any = true;
                });
            }
            if !with_grad || !any {
                continue;
            }
            // d_I += diag(rowsum)·X_I − C·X_J
            let di = &mut d[(i0 - r0) * n..(i1 - r0) * n];
            S::gemm(ti, tj, n, -S::one(), MatRef::row_major(&coef, TILE), MatRef::row_major(xj_block, n), S::one(), di, n);
            for a in 0..ti {
                axpy(rowsum[a], &xi_block[a * n..(a + 1) * n], &mut di[a * n..(a + 1) * n]);
            }
            // d_J += diag(colsum)·X_J − Cᵀ·X_I
            let dj = &mut d[(j0 - r0) * n..(j1 - r0) * n];
            S::gemm(tj, ti, n, -S::one(), MatRef::transposed(&coef, TILE), MatRef::row_major(xi_block, n), S::one(), dj, n);
            for b in 0..tj {
                axpy(colsum[b], &xj_block[b * n..(b + 1) * n], &mut dj[b * n..(b + 1) * n]);
            }
        }
    }
    (sum, d)
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MulConst(Var, Vec<S>),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    L2Norm(Var),
    RowL2Norm(Var),
    Divide(Var, Var),
    DivRows(Var, Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MeanRows(Var),
    PairSqDist(Var, RowPairs),
    BatchedMatVec {
        mats: Var,
        index: Vec<usize>,
        states: Var,
    },
    /// `grad` is the gradient of the sum with respect to `states`.
    PairKernelSum {
        states: Var,
        grad: Tensor<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Variance(..) => "variance",
            Op::L2Norm(..) => "l2norm",
            Op::RowL2Norm(..) => "row_l2norm",
            Op::Divide(..) => "divide",
            Op::DivRows(..) => "div_rows",
            Op::Concat(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::MeanRows(..) => "mean_rows",
            Op::PairSqDist(..) => "pair_sq_dist",
            Op::BatchedMatVec { .. } => "batched_matvec",
            Op::PairKernelSum { .. } => "pair_kernel_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: bool,
}

/// Records a computation graph in evaluation order; the order is a valid
/// topological order, so the backward pass is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`, `None` if it is not a parameter or does not
    /// influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient for `var` out, zeros when the root does not
    /// depend on it.
    pub fn take(&mut self, var: Var) -> Tensor<S> {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Gradient for `var`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor<S> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, op, &[a])
    }

    fn map_binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, op.name())?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a (m×k) · bᵀ` with `b` of shape `n×k` (dense layer with `out×in` weights).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.map_binary(a, b, Op::Add(a, b), |u, v| u + v)
    }

    /// Adds the vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "add_row_broadcast")?;
        if self.shape(b) != [n] {
            return Err(shape_err("add_row_broadcast", format!("{m}x{n} + {:?}", self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &c) in row.iter_mut().zip(&bias) {
                *o = *o + c;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::AddRowBroadcast(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.map_binary(a, b, Op::Sub(a, b), |u, v| u - v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.map_binary(a, b, Op::Mul(a, b), |u, v| u * v)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, AutodiffError> {
        self.map_unary(a, Op::Scale(a, c), |u| u * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var, AutodiffError> {
        self.map_unary(a, Op::AddScalar(a), |u| u + c)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<S>) -> Result<Var, AutodiffError> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let x = self.value(a);
        let data = x.data().iter().zip(&c).map(|(&u, &v)| u * v).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, Op::MulConst(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.map_unary(a, Op::Relu(a), |u| if u > S::zero() { u } else { S::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.map_unary(a, Op::Exp(a), |u| u.exp())
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.map_unary(a, Op::Square(a), |u| u * u)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements; an empty tensor is rejected.
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / S::of(n as f64)), Op::Mean(a), &[a])
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a).data();
        if x.is_empty() {
            return Err(shape_err("variance", "empty tensor".into()));
        }
        let n = S::of(x.len() as f64);
        let mu = x.iter().copied().sum::<S>() / n;
        let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
        self.push(Tensor::scalar(var), Op::Variance(a), &[a])
    }

    /// Euclidean norm of all elements.
    pub fn l2norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a).data();
        let n = dot(x, x).sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(a), &[a])
    }

    /// Euclidean norm of each row of an `m×n` matrix.
    pub fn row_l2norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "row_l2norm")?;
        let x = self.value(a).data();
        let out = (0..m).map(|i| {
            let r = &x[i * n..(i + 1) * n];
            dot(r, r).sqrt()
        });
        let t = Tensor::from_parts(vec![m], out.collect());
        self.push(t, Op::RowL2Norm(a), &[a])
    }

    pub fn divide(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "divide")?;
        if let Some(i) = self.value(b).data().iter().position(|&v| v == S::zero()) {
            return Err(AutodiffError::DivisionByZero { index: i });
        }
        self.map_binary(a, b, Op::Divide(a, b), |u, v| u / v)
    }

    /// Divides row `i` of an `m×n` matrix by `b[i]`.
    pub fn div_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "div_rows")?;
        if self.shape(b) != [m] {
            return Err(shape_err("div_rows", format!("{m}x{n} / {:?}", self.shape(b))));
        }
        let d = self.value(b).data();
        if let Some(i) = d.iter().position(|&v| v == S::zero()) {
            return Err(AutodiffError::DivisionByZero { index: i });
        }
        let mut out = self.value(a).data().to_vec();
        for (row, &di) in out.chunks_mut(n).zip(d) {
            for o in row.iter_mut() {
                *o = *o / di;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::DivRows(a, b), &[a, b])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let tail: Vec<usize> = self.shape(first).iter().skip(1).copied().collect();
        if self.shape(first).is_empty() {
            return Err(shape_err("concat", "cannot concatenate scalars".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Selects rows (leading-axis slices) by index, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if x.shape().is_empty() {
            return Err(shape_err("gather_rows", "scalar input".into()));
        }
        let rows = x.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let w = x.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in &index {
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        self.push(Tensor::from_parts(shape, data), Op::GatherRows(a, index), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Mean over rows of an `m×n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        if m == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let x = self.value(a).data();
        let mut out = vec![S::zero(); n];
        for row in x.chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = S::one() / S::of(m as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push(Tensor::from_parts(vec![n], out), Op::MeanRows(a), &[a])
    }

    /// Squared Euclidean distance between listed row pairs of an `m×n` matrix.
    pub fn pair_sq_dist(&mut self, a: Var, pairs: RowPairs) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "pair_sq_dist")?;
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i as usize >= m || j as usize >= m) {
            return Err(shape_err("pair_sq_dist", format!("pair ({i},{j}) out of {m} rows")));
        }
        let x = self.value(a).data();
        let out: Vec<S> = pairs
            .iter()
            .map(|&(i, j)| {
                let (ri, rj) = (&x[i as usize * n..][..n], &x[j as usize * n..][..n]);
                ri.iter().zip(rj).map(|(&u, &v)| (u - v) * (u - v)).sum()
            })
            .collect();
        let t = Tensor::from_parts(vec![out.len()], out);
        self.push(t, Op::PairSqDist(a, pairs), &[a])
    }

    /// Row `b` of the result is `reshape(mats[index[b]], n×n) · states[b]`.
    ///
    /// `mats` is `K×n²` (row-major `n×n` blocks), `states` is `B×n`.
    pub fn batched_matvec(&mut self, mats: Var, index: Vec<usize>, states: Var) -> Result<Var, AutodiffError> {
        let (k, nn) = self.dims2(mats, "batched_matvec")?;
        let (b, n) = self.dims2(states, "batched_matvec")?;
        if nn != n * n || index.len() != b {
            return Err(shape_err("batched_matvec", format!("mats {k}x{nn}, states {b}x{n}, {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(shape_err("batched_matvec", format!("matrix {bad} out of {k}")));
        }
        let (w, g) = (self.value(mats).data(), self.value(states).data());
        let mut out = vec![S::zero(); b * n];
        for (bi, &mi) in index.iter().enumerate() {
            let m = &w[mi * nn..(mi + 1) * nn];
            let s = &g[bi * n..(bi + 1) * n];
            for (r, o) in out[bi * n..(bi + 1) * n].iter_mut().enumerate() {
                *o = dot(&m[r * n..(r + 1) * n], s);
            }
        }
        let t = Tensor::from_parts(vec![b, n], out);
        self.push(t, Op::BatchedMatVec { mats, index, states }, &[mats, states])
    }

    /// `Σ kernel(‖xᵢ − xⱼ‖²)` over unordered row pairs `i < j` accepted by
    /// `filter`. Equivalent to `pair_sq_dist` → kernel → `sum` without
    /// materializing one value per pair. Each pair is visited once; when
    /// `states` needs a gradient, the gradient of the sum is accumulated in
    /// the same pass and scaled during the backward sweep. Rows are split
    /// into a fixed number of chunks reduced in order, so the result does
    /// not depend on the thread count.
    pub fn pair_kernel_sum(&mut self, states: Var, filter: PairFilter, kernel: PairKernel<S>) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(states, "pair_kernel_sum")?;
        let with_grad = self.needs(states);
        let x = self.value(states).data();
        let bounds = balanced_row_chunks(m, PAIR_CHUNKS);
        let norms: Vec<S> = x.chunks(n.max(1)).map(|r| dot(r, r)).collect();
        let parts: Vec<(S, Vec<S>)> =
            bounds.par_windows(2).map(|w| pair_chunk(x, &norms, m, n, w[0], w[1], &filter, kernel, with_grad)).collect();
        let mut total = S::zero();
        let mut grad = if with_grad { vec![S::zero(); m * n] } else { Vec::new() };
        for (w, (sum, d)) in bounds.windows(2).zip(parts) {
            total = total + sum;
            if with_grad {
                for (g, v) in grad[w[0] * n..].iter_mut().zip(d) {
                    *g = *g + v;
                }
            }
        }
        let grad = Tensor::from_parts(if with_grad { vec![m, n] } else { vec![0, n] }, grad);
        self.push(Tensor::scalar(total), Op::PairKernelSum { states, grad }, &[states])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>, AutodiffError> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(AutodiffError::NonScalarRoot { shape: self.shape(root).to_vec() });
        }
        let count = root.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; count];
        grads[root.0] = Some(vec![S::one()]);

        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(count);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            out.push(match (node.param, g) {
                (true, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            });
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let acc = |grads: &mut [Option<Vec<S>>], v: Var, d: Vec<S>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(d) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(d),
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::PairKernelSum { states, grad } => {
                let d = grad.data().iter().map(|&v| v * g[0]).collect();
                acc(grads, *states, d);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    acc(grads, *a, matmul_nt(g, bv.data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.needs(*a) {
                    acc(grads, *a, matmul(g, bv.data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_tn(g, av.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(&x, &w)| x * w).collect());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(&x, &w)| x * w).collect());
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => acc(grads, *a, g.iter().zip(c).map(|(&x, &w)| x * w).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() }).collect();
                acc(grads, *a, d);
            }
            Op::Exp(a) => acc(grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = S::of(2.0);
                acc(grads, *a, g.iter().zip(x).map(|(&gi, &xi)| two * gi * xi).collect());
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0] / S::of(n as f64); n]);
            }
            Op::Variance(a) => {
                let x = self.value(*a).data();
                let n = S::of(x.len() as f64);
                let mu = x.iter().copied().sum::<S>() / n;
                let c = S::of(2.0) * g[0] / n;
                acc(grads, *a, x.iter().map(|&xi| c * (xi - mu)).collect());
            }
            Op::L2Norm(a) => {
                let x = self.value(*a).data();
                let norm = y[0];
                let d = if norm > S::zero() { x.iter().map(|&xi| g[0] * xi / norm).collect() } else { vec![S::zero(); x.len()] };
                acc(grads, *a, d);
            }
            Op::RowL2Norm(a) => {
                let xv = self.value(*a);
                let n = xv.shape()[1];
                let mut d = vec![S::zero(); xv.len()];
                for (i, (drow, xrow)) in d.chunks_mut(n).zip(xv.data().chunks(n)).enumerate() {
                    if y[i] > S::zero() {
                        let c = g[i] / y[i];
                        for (di, &xi) in drow.iter_mut().zip(xrow) {
                            *di = c * xi;
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::Divide(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect());
                }
                if self.needs(*b) {
                    let d = g.iter().zip(av).zip(bv).map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi)).collect();
                    acc(grads, *b, d);
                }
            }
            Op::DivRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b).data());
                let n = av.shape()[1];
                if self.needs(*a) {
                    let mut d = g.to_vec();
                    for (row, &bi) in d.chunks_mut(n).zip(bv) {
                        row.iter_mut().for_each(|x| *x = *x / bi);
                    }
                    acc(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.chunks(n).zip(av.data().chunks(n)).zip(bv).map(|((grow, arow), &bi)| -dot(grow, arow) / (bi * bi)).collect();
                    acc(grads, *b, d);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        acc(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let w = av.row_len();
                let mut d = vec![S::zero(); av.len()];
                for (k, &i) in index.iter().enumerate() {
                    for (di, &gi) in d[i * w..(i + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                        *di = *di + gi;
                    }
                }
                acc(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let m = av.shape()[0];
                let inv = S::one() / S::of(m as f64);
                let row: Vec<S> = g.iter().map(|&x| x * inv).collect();
                let mut d = Vec::with_capacity(av.len());
                for _ in 0..m {
                    d.extend_from_slice(&row);
                }
                acc(grads, *a, d);
            }
            Op::PairSqDist(a, pairs) => {
                let av = self.value(*a);
                let n = av.shape()[1];
                let x = av.data();
                let mut d = vec![S::zero(); av.len()];
                let two = S::of(2.0);
                for (&(i, j), &gp) in pairs.iter().zip(g) {
                    if gp == S::zero() {
                        continue;
                    }
                    let (i, j) = (i as usize, j as usize);
                    let c = two * gp;
                    for t in 0..n {
                        let diff = c * (x[i * n + t] - x[j * n + t]);
                        d[i * n + t] = d[i * n + t] + diff;
                        d[j * n + t] = d[j * n + t] - diff;
                    }
                }
                acc(grads, *a, d);
            }
            Op::BatchedMatVec { mats, index, states } => {
                let (wv, sv) = (self.value(*mats), self.value(*states));
                let n = sv.shape()[1];
                let nn = n * n;
                if self.needs(*mats) {
                    // accumulate in place: the same K×N² buffer is shared by every step
                    let dw = grads[mats.0].get_or_insert_with(|| vec![S::zero(); wv.len()]);
                    for (bi, &mi) in index.iter().enumerate() {
                        let s = &sv.data()[bi * n..(bi + 1) * n];
                        let block = &mut dw[mi * nn..(mi + 1) * nn];
                        for (r, &gr) in g[bi * n..(bi + 1) * n].iter().enumerate() {
                            if gr != S::zero() {
                                axpy(gr, s, &mut block[r * n..(r + 1) * n]);
                            }
                        }
                    }
                }
                if self.needs(*states) {
                    let mut ds = vec![S::zero(); sv.len()];
                    for (bi, &mi) in index.iter().enumerate() {
                        let m = &wv.data()[mi * nn..(mi + 1) * nn];
                        let out = &mut ds[bi * n..(bi + 1) * n];
                        for (r, &gr) in g[bi * n..(bi + 1) * n].iter().enumerate() {
                            if gr != S::zero() {
                                axpy(gr, &m[r * n..(r + 1) * n], out);
                            }
                        }
                    }
                    acc(grads, *states, ds);
                }
            }
        }
    }
}
