//! Reverse-mode differentiation over small dense matrices.
//!
//! Every operation records its output value and inputs as a node on a
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints, and scatters the adjoints of parameter leaves into one flat
//! gradient vector laid out like [`crate::PolicyParams`].
//!
//! Values are row-major `rows × cols` blocks of `f64`. Row vectors and
//! scalars are `1 × n` and `1 × 1` nodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the output of [`Tape::adjoints`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    Gather { src: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Pick { src: Var, ids: Vec<usize> },
    SelectRows { src: Var, rows: Vec<usize> },
    Exp(Var),
    AddScalar(Var),
    AddConst(Var),
    MulConst { src: Var, consts: Vec<f64> },
    Mul(Var, Var),
    Clamp { src: Var, lo: f64, hi: f64 },
    Min(Var, Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    /// A tape whose parameter leaves index into a flat vector of `n_params`.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_params,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf viewing `params[offset .. offset + rows * cols]`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        assert!(offset + rows * cols <= self.n_params, "param block out of range");
        let value = params[offset..offset + rows * cols].to_vec();
        self.push(rows, cols, value, Op::Param { offset })
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, value, Op::Constant)
    }

    /// Rows `ids` of `src`.
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.shape(src);
        let s = self.value(src);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < rows, "gather id {id} out of range {rows}");
            out.extend_from_slice(&s[id * cols..(id + 1) * cols]);
        }
        self.push(ids.len(), cols, out, Op::Gather { src, ids: ids.to_vec() })
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let (r, cols) = self.shape(src);
        let s = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            assert!(i < r, "row {i} out of range {r}");
            out.extend_from_slice(&s[i * cols..(i + 1) * cols]);
        }
        self.push(
            rows.len(),
            cols,
            out,
            Op::SelectRows {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(shape.0, shape.1, out, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `1 × cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(row), (1, cols), "add_row shape mismatch");
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(rows, cols, out, Op::AddRow(a, row))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(m, n, out, Op::MatMulNt(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cl) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(r, cl, out, Op::Scale(a, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + math::tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x))))
            .collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`, no gain.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            let inv = 1.0 / rms(row);
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.push(rows, cols, out, Op::RmsNorm(a))
    }

    /// Row-wise softmax of a square score matrix, masking `j > i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let (n, n2) = self.shape(a);
        assert_eq!(n, n2, "causal_softmax needs a square input");
        let s = self.value(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &s[i * n..i * n + i + 1];
            let lse = math::log_sum_exp(row);
            for j in 0..=i {
                out[i * n + j] = math::exp(row[j] - lse);
            }
        }
        self.push(n, n, out, Op::CausalSoftmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let s = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for (o, x) in out.chunks_exact_mut(cols).zip(s.chunks_exact(cols)) {
            math::log_softmax_into(x, o);
        }
        self.push(rows, cols, out, Op::LogSoftmax(a))
    }

    /// Column vector `src[r, ids[r]]`.
    pub fn pick(&mut self, src: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.shape(src);
        assert_eq!(ids.len(), rows, "pick needs one id per row");
        let s = self.value(src);
        let out = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "pick column {c} out of range {cols}");
                s[r * cols + c]
            })
            .collect();
        self.push(rows, 1, out, Op::Pick { src, ids: ids.to_vec() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| math::exp(x)).collect();
        self.push(r, c, out, Op::Exp(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (r, cl) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + c).collect();
        self.push(r, cl, out, Op::AddScalar(a))
    }

    /// Elementwise sum with a constant of the same shape.
    pub fn add_const(&mut self, a: Var, consts: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(consts.len(), r * c, "add_const shape mismatch");
        let out = self.value(a).iter().zip(consts).map(|(x, k)| x + k).collect();
        self.push(r, c, out, Op::AddConst(a))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, consts: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(consts.len(), r * c, "mul_const shape mismatch");
        let out = self.value(a).iter().zip(consts).map(|(x, k)| x * k).collect();
        self.push(
            r,
            c,
            out,
            Op::MulConst {
                src: a,
                consts: consts.to_vec(),
            },
        )
    }

    /// Elementwise product of two nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "mul shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(shape.0, shape.1, out, Op::Mul(a, b))
    }

    /// Elementwise clamp; the gradient passes on `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(r, c, out, Op::Clamp { src: a, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "min shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        self.push(shape.0, shape.1, out, Op::Min(a, b))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Gradient of the scalar `loss` with respect to the flat parameter
    /// vector.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>> {
        let adj = self.adjoints(loss)?;
        let mut grad = vec![0.0; self.n_params];
        for (node, a) in self.nodes.iter().zip(adj) {
            if let (Op::Param { offset }, Some(a)) = (&node.op, a) {
                for (g, x) in grad[*offset..*offset + a.len()].iter_mut().zip(&a) {
                    *g += x;
                }
            }
        }
        Ok(grad)
    }

    /// Adjoint of every node reachable from `loss` (`None` where unreachable).
    pub fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        let Some(out) = self.nodes.get(loss.0) else {
            return Err(Error::State("loss handle does not belong to this tape".into()));
        };
        if (out.rows, out.cols) != (1, 1) {
            return Err(Error::State("backward needs a scalar (1x1) loss".into()));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            self.propagate(idx, &dy, &mut adj);
            adj[idx] = Some(dy);
        }
        Ok(adj)
    }

    fn propagate(&self, idx: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::Gather { src, ids } => {
                let g = self.slot(adj, *src);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &dy[r * cols..(r + 1) * cols], &mut g[id * cols..(id + 1) * cols]);
                }
            }
            Op::SelectRows { src, rows: sel } => {
                let g = self.slot(adj, *src);
                for (r, &i) in sel.iter().enumerate() {
                    axpy(1.0, &dy[r * cols..(r + 1) * cols], &mut g[i * cols..(i + 1) * cols]);
                }
            }
            Op::Add(a, b) => {
                axpy(1.0, dy, self.slot(adj, *a));
                axpy(1.0, dy, self.slot(adj, *b));
            }
            Op::AddRow(a, row) => {
                axpy(1.0, dy, self.slot(adj, *a));
                let g = self.slot(adj, *row);
                for chunk in dy.chunks_exact(cols) {
                    axpy(1.0, chunk, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = dY · Bᵀ
                let ga = self.slot(adj, *a);
                for i in 0..m {
                    let dyr = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(dyr, &bv[p * n..(p + 1) * n]);
                    }
                }
                // dB = Aᵀ · dY
                let gb = self.slot(adj, *b);
                for i in 0..m {
                    let dyr = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(av[i * k + p], dyr, &mut gb[p * n..(p + 1) * n]);
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = dY · B
                let ga = self.slot(adj, *a);
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        if d != 0.0 {
                            axpy(d, &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                // dB = dYᵀ · A
                let gb = self.slot(adj, *b);
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        if d != 0.0 {
                            axpy(d, &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Scale(a, c) => axpy(*c, dy, self.slot(adj, *a)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let g = self.slot(adj, *a);
                for i in 0..x.len() {
                    let xi = x[i];
                    let t = math::tanh(SQRT_2_OVER_PI * (xi + GELU_C * xi * xi * xi));
                    let dt = (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * xi * xi);
                    g[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * xi * dt);
                }
            }
            Op::RmsNorm(a) => {
                let x = self.value(*a);
                let g = self.slot(adj, *a);
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let inv = 1.0 / rms(xr);
                    let proj = dot(dyr, yr) / cols as f64;
                    for c in 0..cols {
                        g[r * cols + c] += (dyr[c] - yr[c] * proj) * inv;
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                let g = self.slot(adj, *a);
                let n = cols;
                for i in 0..n {
                    let yr = &y[i * n..i * n + i + 1];
                    let dyr = &dy[i * n..i * n + i + 1];
                    let s = dot(yr, dyr);
                    for j in 0..=i {
                        g[i * n + j] += yr[j] * (dyr[j] - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let g = self.slot(adj, *a);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let s: f64 = dyr.iter().sum();
                    for c in 0..cols {
                        g[r * cols + c] += dyr[c] - math::exp(yr[c]) * s;
                    }
                }
            }
            Op::Pick { src, ids } => {
                let src_cols = self.shape(*src).1;
                let g = self.slot(adj, *src);
                for (r, &c) in ids.iter().enumerate() {
                    g[r * src_cols + c] += dy[r];
                }
            }
            Op::Exp(a) => {
                let g = self.slot(adj, *a);
                for i in 0..y.len() {
                    g[i] += dy[i] * y[i];
                }
            }
            Op::AddScalar(a) | Op::AddConst(a) => axpy(1.0, dy, self.slot(adj, *a)),
            Op::MulConst { src, consts } => {
                let g = self.slot(adj, *src);
                for i in 0..dy.len() {
                    g[i] += dy[i] * consts[i];
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = self.slot(adj, *a);
                for i in 0..dy.len() {
                    ga[i] += dy[i] * bv[i];
                }
                let gb = self.slot(adj, *b);
                for i in 0..dy.len() {
                    gb[i] += dy[i] * av[i];
                }
            }
            Op::Clamp { src, lo, hi } => {
                let x = self.value(*src);
                let g = self.slot(adj, *src);
                for i in 0..dy.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        g[i] += dy[i];
                    }
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let a_wins: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                let ga = self.slot(adj, *a);
                for i in 0..dy.len() {
                    if a_wins[i] {
                        ga[i] += dy[i];
                    }
                }
                let gb = self.slot(adj, *b);
                for i in 0..dy.len() {
                    if !a_wins[i] {
                        gb[i] += dy[i];
                    }
                }
            }
            Op::Sum(a) => {
                let g = self.slot(adj, *a);
                for x in g.iter_mut() {
                    *x += dy[0];
                }
            }
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        adj[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn rms(row: &[f64]) -> f64 {
    math::sqrt(dot(row, row) / row.len() as f64 + RMS_EPS)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += a · b` for row-major `a: m × k`, `b: k × n`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::new(0);
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_state_error() {
        let mut tape = Tape::new(4);
        let p = tape.param(&[1.0; 4], 0, 2, 2);
        assert!(matches!(tape.backward(p), Err(Error::State(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = [0.3, -0.2, 0.7];
        let mut tape = Tape::new(3);
        let _ = tape.param(&params, 0, 1, 3);
        let c = tape.constant(1, 1, vec![5.0]);
        let grad = tape.backward(c).unwrap();
        assert_eq!(grad, vec![0.0; 3]);
    }

    #[test]
    fn square_of_one_parameter() {
        let mut params = vec![0.0; 5];
        params[2] = 3.0;
        let mut tape = Tape::new(5);
        let p = tape.param(&params, 0, 1, 5);
        let sq = tape.mul(p, p);
        let loss = tape.sum(sq);
        assert_eq!(tape.scalar(loss), 9.0);
        let grad = tape.backward(loss).unwrap();
        assert_eq!(grad, vec![0.0, 0.0, 6.0, 0.0, 0.0]);
    }

    /// Builds a scalar through every op so one finite-difference pass covers
    /// them all.
    fn composite(params: &[f64], tape: &mut Tape) -> Var {
        let x = tape.param(params, 0, 3, 4);
        let w = tape.param(params, 12, 4, 3);
        let b = tape.param(params, 24, 1, 3);
        let emb = tape.param(params, 27, 5, 4);
        let e = tape.gather(emb, &[4, 0, 2]);
        let h = tape.add(x, e);
        let h = tape.rms_norm(h);
        let s = tape.matmul_nt(h, h);
        let s = tape.scale(s, 0.5);
        let att = tape.causal_softmax(s);
        let h2 = tape.matmul(att, h);
        let h2 = tape.gelu(h2);
        let logits = tape.matmul(h2, w);
        let logits = tape.add_row(logits, b);
        let lp = tape.log_softmax(logits);
        let sel = tape.select_rows(lp, &[2, 0, 1]);
        let picked = tape.pick(sel, &[1, 2, 0]);
        let ratio = tape.exp(picked);
        let shifted = tape.add_scalar(ratio, 0.3);
        let adv = tape.mul_const(shifted, &[1.5, -0.7, 0.4]);
        let clipped = tape.clamp(shifted, 0.5, 0.9);
        let adv_c = tape.mul_const(clipped, &[1.5, -0.7, 0.4]);
        let m = tape.min(adv, adv_c);
        let sq = tape.mul(m, picked);
        tape.sum(sq)
    }

    #[test]
    fn composite_matches_finite_differences() {
        let n = 47;
        let mut rng = DetRng::new(7, 0);
        let params: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut tape = Tape::new(n);
        let loss = composite(&params, &mut tape);
        let grad = tape.backward(loss).unwrap();

        let h = 1e-5;
        for i in 0..n {
            let mut p = params.clone();
            p[i] += h;
            let mut t = Tape::new(n);
            let v = composite(&p, &mut t);
            let up = t.scalar(v);
            p[i] -= 2.0 * h;
            let mut t = Tape::new(n);
            let v = composite(&p, &mut t);
            let down = t.scalar(v);
            let fd = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-5,
                "param {i}: tape {} vs fd {fd}",
                grad[i]
            );
        }
    }
}
