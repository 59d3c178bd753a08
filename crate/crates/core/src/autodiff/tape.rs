use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    MulConst(Var, Vec<f64>),
    Pick(Var, usize),
    Gather(Var, Vec<(usize, usize, usize)>, usize),
    Poly(Var, Var),
    PolyDeriv(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode automatic differentiation over `f64` matrices.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// reverse and accumulates adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adjoint of `v`, zeros if nothing flowed into it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// C (m×n) += A (m×k) · B (k×n) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass slices whose lengths cover the strided extents.
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

pub fn horner(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &a| acc * z + a)
}

pub fn horner_deriv(coeffs: &[f64], z: f64) -> f64 {
    let d = coeffs.len();
    if d < 2 {
        return 0.0;
    }
    (1..d).rev().fold(0.0, |acc, k| acc * z + k as f64 * coeffs[k])
}

fn horner_second(coeffs: &[f64], z: f64) -> f64 {
    let d = coeffs.len();
    if d < 3 {
        return 0.0;
    }
    (2..d).rev().fold(0.0, |acc, k| acc * z + (k * (k - 1)) as f64 * coeffs[k])
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

    /// Drop every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.data.len(), 1, "not a scalar");
        t.data[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, k as isize, 1, &self.value(b).data, n as isize, 1, &mut out);
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.push(t, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a` (r×c) plus the row vector `row` (1×c) on every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = &self.value(row).data;
        let data = self.value(a).data.iter().enumerate().map(|(i, &x)| x + rv[i % c]).collect();
        self.push(Tensor::new(r, c, data), Op::AddRow(a, row))
    }

    /// Every entry of `a` times the 1×1 variable `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        self.map(a, |x| x * sv, Op::MulScalarVar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Column sums: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, &x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a))
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        self.push(Tensor::column(out), Op::SumCols(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.data.len()];
        for r in 0..t.rows {
            for c in 0..t.cols {
                out[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        let shaped = Tensor::new(t.cols, t.rows, out);
        self.push(shaped, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                out.extend_from_slice(t.row_slice(r));
            }
        }
        self.push(Tensor::new(rows, cols, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            out.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::new(rows, cols, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let shaped = Tensor::new(idx.len(), t.cols, out);
        self.push(shaped, Op::SelectRows(a, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let shaped = Tensor::new(t.rows, len, out);
        self.push(shaped, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        let shaped = Tensor::new(rows, cols, t.data.clone());
        self.push(shaped, Op::Reshape(a))
    }

    /// Log-softmax of a 1×n row over the entries where `mask` is true.
    /// Masked entries hold `-inf`.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, 1, "masked_log_softmax expects a row");
        assert_eq!(t.cols, mask.len());
        let max = t
            .data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite() || max == f64::INFINITY, "no legal entry");
        let lse = max
            + t.data
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| (x - max).exp())
                .sum::<f64>()
                .ln();
        let out = t
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x - lse } else { f64::NEG_INFINITY })
            .collect();
        self.push(Tensor::row(out), Op::MaskedLogSoftmax(a, mask.to_vec()))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, k: &[f64]) -> Var {
        let t = self.value(a);
        assert_eq!(t.data.len(), k.len());
        let data = t.data.iter().zip(k).map(|(x, y)| x * y).collect();
        let shaped = Tensor::new(t.rows, t.cols, data);
        self.push(shaped, Op::MulConst(a, k.to_vec()))
    }

    /// Entry `idx` (row-major) as a 1×1 value.
    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let v = self.value(a).data[idx];
        self.push(Tensor::scalar(v), Op::Pick(a, idx))
    }

    /// Message aggregation. `src` is n×(K·h) holding per-type transformed
    /// states side by side; for every `(target, source, k)` row block `k` of
    /// `source` is added to `target`. Output n×h.
    pub fn gather(&mut self, src: Var, edges: &[(usize, usize, usize)], h: usize) -> Var {
        let t = self.value(src);
        let mut out = vec![0.0; t.rows * h];
        for &(i, j, k) in edges {
            let from = &t.row_slice(j)[k * h..(k + 1) * h];
            for (o, &x) in out[i * h..(i + 1) * h].iter_mut().zip(from) {
                *o += x;
            }
        }
        let shaped = Tensor::new(t.rows, h, out);
        self.push(shaped, Op::Gather(src, edges.to_vec(), h))
    }

    /// Polynomial with coefficient row `coeffs` (1×(d+1), constant term first)
    /// applied entrywise to `z`.
    pub fn poly(&mut self, z: Var, coeffs: Var) -> Var {
        let c = self.value(coeffs).data.clone();
        self.map(z, |x| horner(&c, x), Op::Poly(z, coeffs))
    }

    /// Derivative of [`Tape::poly`] with respect to its argument.
    pub fn poly_deriv(&mut self, z: Var, coeffs: Var) -> Var {
        let c = self.value(coeffs).data.clone();
        self.map(z, |x| horner_deriv(&c, x), Op::PolyDeriv(z, coeffs))
    }

    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0; self.value(out).data.len()]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, &g, n as isize, 1, &tb.data, 1, n as isize, acc(&mut grads, *a, m * k));
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &ta.data, 1, k as isize, &g, n as isize, 1, acc(&mut grads, *b, k * n));
                }
                Op::Add(a, b) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                    for (o, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Sub(a, b) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                    for (o, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *o -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * vb[idx];
                    }
                    for (idx, o) in acc(&mut grads, *b, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * va[idx];
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] / vb[idx];
                    }
                    for (idx, o) in acc(&mut grads, *b, g.len()).iter_mut().enumerate() {
                        *o -= g[idx] * va[idx] / (vb[idx] * vb[idx]);
                    }
                }
                Op::AddRow(a, row) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                    let c = y.cols;
                    let gr = acc(&mut grads, *row, c);
                    for (idx, x) in g.iter().enumerate() {
                        gr[idx % c] += x;
                    }
                }
                Op::MulScalarVar(a, s) => {
                    let sv = self.scalar(*s);
                    let va = &self.value(*a).data;
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x * sv;
                    }
                    let ds: f64 = g.iter().zip(va).map(|(x, v)| x * v).sum();
                    acc(&mut grads, *s, 1)[0] += ds;
                }
                Op::Scale(a, k) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x * k;
                    }
                }
                Op::AddScalar(a) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::Sigmoid(a) => {
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        let s = y.data[idx];
                        *o += g[idx] * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        let t = y.data[idx];
                        *o += g[idx] * (1.0 - t * t);
                    }
                }
                Op::Relu(a) => {
                    let va = &self.value(*a).data;
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        if va[idx] > 0.0 {
                            *o += g[idx];
                        }
                    }
                }
                Op::Exp(a) => {
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * y.data[idx];
                    }
                }
                Op::Log(a) => {
                    let va = &self.value(*a).data;
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] / va[idx];
                    }
                }
                Op::Softplus(a) => {
                    let va = &self.value(*a).data;
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * sigmoid(va[idx]);
                    }
                }
                Op::Square(a) => {
                    let va = &self.value(*a).data;
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += 2.0 * g[idx] * va[idx];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &self.value(*a).data;
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        if va[idx] > *lo && va[idx] < *hi {
                            *o += g[idx];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).data.len();
                    for o in acc(&mut grads, *a, n).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += g[idx % c];
                    }
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += g[idx / c];
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for rr in 0..r {
                        for cc in 0..c {
                            ga[rr * c + cc] += g[cc * r + rr];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = y.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let gp = acc(&mut grads, p, r * c);
                        for rr in 0..r {
                            for cc in 0..c {
                                gp[rr * c + cc] += g[rr * cols + offset + cc];
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).data.len();
                        for (o, x) in acc(&mut grads, p, n).iter_mut().zip(&g[offset..offset + n]) {
                            *o += x;
                        }
                        offset += n;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for (k, &src) in idx.iter().enumerate() {
                        for cc in 0..c {
                            ga[src * c + cc] += g[k * c + cc];
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let len = y.cols;
                    let ga = acc(&mut grads, *a, r * c);
                    for rr in 0..r {
                        for cc in 0..len {
                            ga[rr * c + start + cc] += g[rr * len + cc];
                        }
                    }
                }
                Op::Reshape(a) => {
                    for (o, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    let total: f64 = g.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
                    let ga = acc(&mut grads, *a, g.len());
                    for (idx, o) in ga.iter_mut().enumerate() {
                        if mask[idx] {
                            *o += g[idx] - y.data[idx].exp() * total;
                        }
                    }
                }
                Op::MulConst(a, k) => {
                    for (idx, o) in acc(&mut grads, *a, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * k[idx];
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.value(*a).data.len();
                    acc(&mut grads, *a, n)[*idx] += g[0];
                }
                Op::Gather(src, edges, h) => {
                    let (r, c) = self.shape(*src);
                    let gs = acc(&mut grads, *src, r * c);
                    for &(ti, sj, k) in edges {
                        for d in 0..*h {
                            gs[sj * c + k * h + d] += g[ti * h + d];
                        }
                    }
                }
                Op::Poly(z, coeffs) => {
                    let c = &self.value(*coeffs).data;
                    let zv = &self.value(*z).data;
                    for (idx, o) in acc(&mut grads, *z, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * horner_deriv(c, zv[idx]);
                    }
                    let gc = acc(&mut grads, *coeffs, c.len());
                    for (idx, &x) in zv.iter().enumerate() {
                        let mut p = 1.0;
                        for o in gc.iter_mut() {
                            *o += g[idx] * p;
                            p *= x;
                        }
                    }
                }
                Op::PolyDeriv(z, coeffs) => {
                    let c = &self.value(*coeffs).data;
                    let zv = &self.value(*z).data;
                    for (idx, o) in acc(&mut grads, *z, g.len()).iter_mut().enumerate() {
                        *o += g[idx] * horner_second(c, zv[idx]);
                    }
                    let gc = acc(&mut grads, *coeffs, c.len());
                    for (idx, &x) in zv.iter().enumerate() {
                        let mut p = 1.0;
                        for (k, o) in gc.iter_mut().enumerate().skip(1) {
                            *o += g[idx] * k as f64 * p;
                            p *= x;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}
