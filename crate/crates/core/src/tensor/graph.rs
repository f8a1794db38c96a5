use super::{gemm, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms of the KL divergence.
pub const KL_CLAMP: f64 = 1e-12;

/// Sentinel in gather indices meaning "write zero".
const ZERO_FILL: usize = usize::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Classification targets for [`Graph::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Targets<'a, F> {
    Indices(&'a [usize]),
    /// Row-wise target distributions (one-hot or soft), shape `[B, C]`.
    Dense(&'a Tensor<F>),
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Norm(Var),
    Gather { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
    CrossEntropy { logits: Var, target: Vec<F>, probs: Vec<F> },
    Kl { student: Var, teacher: Vec<F> },
    PairDist { a: Var, b: Var, squared: bool },
    SegmentMean { x: Var, groups: Vec<usize>, counts: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Define-by-run tape. Confined to one thread; build one per step.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_tanh<F: Scalar>(x: F) -> (F, F) {
    let c = F::c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::c(0.044715);
    let half = F::c(0.5);
    let one = F::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + F::c(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {} invalid for shape {:?}", axis, shape)));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Split a tensor shape into (rows, cols) treating the last axis as columns.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if cols == 0 { 0 } else { total / cols }, cols)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.val(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            F::one(),
            self.val(a).data(),
            MatView::row_major(0, k),
            self.val(b).data(),
            MatView::row_major(0, n),
            F::zero(),
            &mut out,
            MatView::row_major(0, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn check_row(&self, x: Var, r: Var, what: &str) -> Result<(usize, usize)> {
        let (rows, cols) = as_matrix(self.shape(x));
        if self.val(r).numel() != cols || self.shape(x).is_empty() {
            return Err(Error::Dimension(format!(
                "{}: {:?} with row {:?}",
                what,
                self.shape(x),
                self.shape(r)
            )));
        }
        Ok((rows, cols))
    }

    /// Adds a row vector to every row (last axis).
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.check_row(x, r, "add_row")?;
        let rv = self.val(r).data();
        let mut value = self.val(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rv[i % cols];
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(value, Op::AddRow(x, r), rg))
    }

    /// Multiplies every row (last axis) elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.check_row(x, r, "mul_row")?;
        let rv = self.val(r).data();
        let mut value = self.val(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= rv[i % cols];
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(value, Op::MulRow(x, r), rg))
    }

    /// `x·w + b` for `x [m×k]`, `w [k×n]`, `b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn softmax_into(src: &[F], dst: &mut [F], outer: usize, len: usize, inner: usize, log: bool) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    dst[at(j)] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for j in 0..len {
                        dst[at(j)] = src[at(j)] - mx - lse;
                    }
                } else {
                    for j in 0..len {
                        dst[at(j)] /= sum;
                    }
                }
            }
        }
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.val(x);
        let mut value = Tensor::zeros(src.shape());
        Self::softmax_into(src.data(), value.data_mut(), outer, len, inner, false);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.val(x);
        let mut value = Tensor::zeros(src.shape());
        Self::softmax_into(src.data(), value.data_mut(), outer, len, inner, true);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax { x, outer, len, inner }, rg))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance; no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(x));
        if cols == 0 {
            return Err(Error::Dimension("layer_norm of empty rows".into()));
        }
        let src = self.val(x);
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        let n = F::c(cols as f64);
        for r in 0..rows {
            let row = &src.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + F::c(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * rs;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_tanh(v).0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), F::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), F::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), F::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().copied().sum::<F>() / F::c(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of `x [m×n]` -> `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(x));
        if rows == 0 {
            return Err(Error::Dimension("mean_rows of zero rows".into()));
        }
        let src = self.val(x).data();
        let mut out = vec![F::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += src[r * cols + c];
            }
        }
        let n = F::c(rows as f64);
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![cols], out)?, Op::MeanRows(x), rg))
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = self.val(x).norm();
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::Norm(x), rg)
    }

    /// `out[i] = x[index[i]]` over flattened storage; `None` entries are zero.
    pub fn gather(&mut self, x: Var, index: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Dimension(format!("gather shape {:?} vs {} indices", shape, index.len())));
        }
        let src = self.val(x).data();
        let mut raw = Vec::with_capacity(index.len());
        let mut out = Vec::with_capacity(index.len());
        for ix in index {
            match ix {
                Some(i) if *i < src.len() => {
                    raw.push(*i);
                    out.push(src[*i]);
                }
                Some(i) => return Err(Error::Index(format!("gather index {} >= {}", i, src.len()))),
                None => {
                    raw.push(ZERO_FILL);
                    out.push(F::zero());
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { x, index: raw }, rg))
    }

    /// Selects rows of a 2-D tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, cols) = as_matrix(self.shape(x));
        if self.shape(x).len() != 2 {
            return Err(Error::Dimension("gather_rows expects a matrix".into()));
        }
        let mut index = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {} >= {}", r, m)));
            }
            index.extend((0..cols).map(|c| Some(r * cols + c)));
        }
        self.gather(x, &index, &[rows.len(), cols])
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dimension(format!("concat {:?} with trailing {:?}", s, tail)));
            }
            lead += s[0];
            data.extend_from_slice(self.val(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch·seq, D]`.
    ///
    /// Returns the context `[batch·seq, D]` and, per sequence, the
    /// head-averaged attention row of token 0 (length `seq`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<(Var, Vec<Vec<F>>)> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::Dimension("attention expects equal [B*S, D] operands".into()));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if batch == 0 || rows % batch != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {} rows, batch {}, dim {}, heads {}",
                rows, batch, dim, heads
            )));
        }
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = F::one() / F::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); rows * dim];
        let mut cls = vec![vec![F::zero(); seq]; batch];
        let inv_heads = F::one() / F::c(heads as f64);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * dim + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    qd,
                    MatView { offset: base, rs: dim, cs: 1 },
                    kd,
                    MatView { offset: base, rs: 1, cs: dim },
                    F::zero(),
                    &mut probs,
                    MatView::row_major(p_off, seq),
                );
                let block = &mut probs[p_off..p_off + seq * seq];
                for r in 0..seq {
                    let row = &mut block[r * seq..(r + 1) * seq];
                    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut s = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                for j in 0..seq {
                    cls[b][j] += block[j] * inv_heads;
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    F::one(),
                    &probs,
                    MatView::row_major(p_off, seq),
                    vd,
                    MatView { offset: base, rs: dim, cs: 1 },
                    F::zero(),
                    &mut out,
                    MatView { offset: base, rs: dim, cs: 1 },
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let var = self.push(
            Tensor::new(shape, out)?,
            Op::Attention { q, k, v, batch, seq, heads, probs },
            rg,
        );
        Ok((var, cls))
    }

    /// Mean over the batch of `−Σ_c t_c · log softmax(logits)_c`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<'_, F>) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::Dimension(format!("cross_entropy logits {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let target: Vec<F> = match targets {
            Targets::Indices(ix) => {
                if ix.len() != rows {
                    return Err(Error::Dimension(format!("{} targets for {} rows", ix.len(), rows)));
                }
                let mut t = vec![F::zero(); rows * cols];
                for (r, &c) in ix.iter().enumerate() {
                    if c >= cols {
                        return Err(Error::Index(format!("target class {} >= {}", c, cols)));
                    }
                    t[r * cols + c] = F::one();
                }
                t
            }
            Targets::Dense(t) => {
                if t.shape() != s {
                    return Err(Error::Dimension(format!("targets {:?} vs logits {:?}", t.shape(), s)));
                }
                t.data().to_vec()
            }
        };
        let src = self.val(logits).data();
        let mut logp = vec![F::zero(); rows * cols];
        Self::softmax_into(src, &mut logp, rows, cols, 1, true);
        let mut loss = F::zero();
        for i in 0..rows * cols {
            if target[i] != F::zero() {
                loss -= target[i] * logp[i];
            }
        }
        loss /= F::c(rows as f64);
        let probs = logp.iter().map(|&l| l.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Mean over rows of `Σ teacher·(ln teacher − ln student)`; the teacher is
    /// a detached target. Probabilities are clamped to [`KL_CLAMP`] inside logs.
    pub fn kl_divergence(&mut self, student: Var, teacher: &Tensor<F>) -> Result<Var> {
        let s = self.shape(student).to_vec();
        if s.len() != 2 || teacher.shape() != &s[..] {
            return Err(Error::Dimension(format!("kl student {:?} teacher {:?}", s, teacher.shape())));
        }
        let (rows, cols) = (s[0], s[1]);
        let sd = self.val(student).data();
        let tol = 1e-6;
        for r in 0..rows {
            for (name, d) in [("student", sd), ("teacher", teacher.data())] {
                let row = &d[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().map(|x| x.to_f64().unwrap()).sum();
                if (sum - 1.0).abs() > tol || row.iter().any(|x| *x < F::zero()) {
                    return Err(Error::Validation(format!("{} row {} is not a distribution (sum {})", name, r, sum)));
                }
            }
        }
        let clamp = F::c(KL_CLAMP);
        let mut loss = F::zero();
        for (p, q) in teacher.data().iter().zip(sd) {
            if *p > F::zero() {
                loss += *p * (p.max(clamp).ln() - q.max(clamp).ln());
            }
        }
        loss /= F::c(rows as f64);
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kl { student, teacher: teacher.data().to_vec() },
            rg,
        ))
    }

    /// Euclidean (or squared) distances between rows of `a [m×d]` and `b [n×d]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!("pairwise_distance {:?} vs {:?}", sa, sb)));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let s: F = (0..d).map(|c| {
                    let t = ad[i * d + c] - bd[j * d + c];
                    t * t
                }).sum();
                out[i * n + j] = if squared { s } else { s.sqrt() };
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::PairDist { a, b, squared }, rg))
    }

    /// Per-group mean of the rows of `x [m×d]`: sum of member rows divided by
    /// the member count.
    pub fn segment_mean(&mut self, x: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
        let (m, d) = as_matrix(self.shape(x));
        if groups.len() != m {
            return Err(Error::Dimension(format!("{} group ids for {} rows", groups.len(), m)));
        }
        let mut counts = vec![0usize; num_groups];
        for &g in groups {
            if g >= num_groups {
                return Err(Error::Index(format!("group {} >= {}", g, num_groups)));
            }
            counts[g] += 1;
        }
        if let Some(g) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Count(format!("group {} has no members", g)));
        }
        let src = self.val(x).data();
        let mut out = vec![F::zero(); num_groups * d];
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..d {
                out[g * d + c] += src[r * d + c];
            }
        }
        for g in 0..num_groups {
            let n = F::c(counts[g] as f64);
            out[g * d..(g + 1) * d].iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![num_groups, d], out)?,
            Op::SegmentMean { x, groups: groups.to_vec(), counts },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. Gradients of every tracked
    /// node are retrievable with [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let want = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *c)),
            Op::AddScalar(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |d| {
                    gemm(m, n, k, F::one(), g, MatView::row_major(0, n), vb, MatView::transposed(0, n), F::one(), d, MatView::row_major(0, k))
                });
                acc(*b, &mut |d| {
                    gemm(k, m, n, F::one(), va, MatView::transposed(0, k), g, MatView::row_major(0, n), F::one(), d, MatView::row_major(0, n))
                });
            }
            Op::AddRow(x, r) => {
                let cols = nodes[r.0].value.numel();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc(*r, &mut |d| {
                    for (k, y) in g.iter().enumerate() {
                        d[k % cols] += *y;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let cols = nodes[r.0].value.numel();
                let (vx, vr) = (val(*x), val(*r));
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vr[k % cols];
                    }
                });
                acc(*r, &mut |d| {
                    for (k, y) in g.iter().enumerate() {
                        d[k % cols] += *y * vx[k];
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let gs: F = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let cols = *node.value.shape().last().unwrap();
                let n = F::c(cols as f64);
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mg = gr.iter().copied().sum::<F>() / n;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| *a * *b).sum::<F>() / n;
                        for c in 0..cols {
                            d[r * cols + c] += *rs * (gr[c] - mg - xr[c] * mgx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * gelu_tanh(vx[k]).1;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > F::zero() {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vx[k];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let half = F::c(0.5);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if y[k] > F::zero() {
                            d[k] += g[k] * half / y[k];
                        }
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = F::c(2.0);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * two * vx[k];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = F::c(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanRows(x) => {
                let cols = node.value.numel();
                let rows = nodes[x.0].value.numel() / cols.max(1);
                let n = F::c(rows as f64);
                acc(*x, &mut |d| {
                    for (k, v) in d.iter_mut().enumerate() {
                        *v += g[k % cols] / n;
                    }
                });
            }
            Op::Norm(x) => {
                let nv = node.value.data()[0];
                let vx = val(*x);
                if nv > F::zero() {
                    acc(*x, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[0] * vx[k] / nv;
                        }
                    });
                }
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (k, &ix) in index.iter().enumerate() {
                    if ix != ZERO_FILL {
                        d[ix] += g[k];
                    }
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &mut |d| d.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += *y));
                    off += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y)),
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let dim = node.value.shape()[1];
                let dh = dim / heads;
                let scale = F::one() / F::c(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let n = batch * seq * dim;
                let mut dq = vec![F::zero(); if want(*q) { n } else { 0 }];
                let mut dk = vec![F::zero(); if want(*k) { n } else { 0 }];
                let mut dv = vec![F::zero(); if want(*v) { n } else { 0 }];
                let mut dp = vec![F::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * dim + h * dh;
                        let head = MatView { offset: base, rs: dim, cs: 1 };
                        let p_off = (b * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        if want(*v) {
                            gemm(seq, seq, dh, F::one(), p, MatView::transposed(0, seq), g, head, F::one(), &mut dv, head);
                        }
                        if !(want(*q) || want(*k)) {
                            continue;
                        }
                        // dP = dO·Vᵀ
                        gemm(seq, dh, seq, F::one(), g, head, vd, MatView { offset: base, rs: 1, cs: dim }, F::zero(), &mut dp, MatView::row_major(0, seq));
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: F = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                            for c in 0..seq {
                                dr[c] = pr[c] * (dr[c] - dot) * scale;
                            }
                        }
                        if want(*q) {
                            gemm(seq, seq, dh, F::one(), &dp, MatView::row_major(0, seq), kd, head, F::one(), &mut dq, head);
                        }
                        if want(*k) {
                            gemm(seq, seq, dh, F::one(), &dp, MatView::transposed(0, seq), qd, head, F::one(), &mut dk, head);
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if !buf.is_empty() {
                        acc(var, &mut |d| d.iter_mut().zip(&buf).for_each(|(x, y)| *x += *y));
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let cols = nodes[logits.0].value.shape()[1];
                let rows = probs.len() / cols;
                let inv = g[0] / F::c(rows as f64);
                acc(*logits, &mut |d| {
                    for r in 0..rows {
                        let ts: F = target[r * cols..(r + 1) * cols].iter().copied().sum();
                        for c in 0..cols {
                            let k = r * cols + c;
                            d[k] += inv * (probs[k] * ts - target[k]);
                        }
                    }
                });
            }
            Op::Kl { student, teacher } => {
                let rows = nodes[student.0].value.shape()[0];
                let s = val(*student);
                let clamp = F::c(KL_CLAMP);
                let inv = g[0] / F::c(rows as f64);
                acc(*student, &mut |d| {
                    for k in 0..d.len() {
                        if teacher[k] > F::zero() && s[k] > clamp {
                            d[k] -= inv * teacher[k] / s[k];
                        }
                    }
                });
            }
            Op::PairDist { a, b, squared } => {
                let sa = nodes[a.0].value.shape();
                let (m, dd) = (sa[0], sa[1]);
                let nb = nodes[b.0].value.shape()[0];
                let (ad, bd, out) = (val(*a), val(*b), node.value.data());
                let two = F::c(2.0);
                let coef = |i: usize, j: usize| -> F {
                    let gij = g[i * nb + j];
                    if *squared {
                        gij * two
                    } else if out[i * nb + j] > F::zero() {
                        gij / out[i * nb + j]
                    } else {
                        F::zero()
                    }
                };
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..nb {
                            let c = coef(i, j);
                            for t in 0..dd {
                                d[i * dd + t] += c * (ad[i * dd + t] - bd[j * dd + t]);
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..nb {
                            let c = coef(i, j);
                            for t in 0..dd {
                                d[j * dd + t] -= c * (ad[i * dd + t] - bd[j * dd + t]);
                            }
                        }
                    }
                });
            }
            Op::SegmentMean { x, groups, counts } => {
                let d_cols = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, &grp) in groups.iter().enumerate() {
                        let n = F::c(counts[grp] as f64);
                        for c in 0..d_cols {
                            d[r * d_cols + c] += g[grp * d_cols + c] / n;
                        }
                    }
                });
            }
        }
    }
}
