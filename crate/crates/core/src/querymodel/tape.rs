//! Dense row-major matrices and a reverse-mode tape over the handful of
//! operations the decoder needs.

use serde::{Deserialize, Serialize};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), self.cols, data)
    }

    fn add_assign(&mut self, o: &Matrix) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `c = a' * b' + beta * c`, where `a'` is `a` or its transpose (m x k) and
/// `b'` likewise (k x n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut c.data, 0.0);
    c
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// a * b^T
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a 1 x c row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// `a` is n x 2K, `b` is n x 2: adds b's row to every (x, y) pair of a's row.
    AddPairs(Var, Var),
}

enum Value {
    Owned(Matrix),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
}

/// Records a forward computation for a later backward pass.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => &self.store.values[*p],
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, p: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Param(p),
            op: Op::Param(p),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let c = matmul(self.value(a), self.value(b));
        self.push(c, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_nt inner dimension");
        let mut c = Matrix::zeros(x.rows, y.rows);
        gemm(x.rows, x.cols, y.rows, &x.data, false, &y.data, true, &mut c.data, 0.0);
        self.push(c, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let m = Matrix::from_vec(x.rows, x.cols, data);
        self.push(m, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shapes");
        let mut m = x.clone();
        for i in 0..m.rows {
            for (v, b) in m.row_mut(i).iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(m, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let m = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(m, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.max(0.0)).collect());
        self.push(m, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = Matrix::from_vec(
            x.rows,
            x.cols,
            x.data.iter().map(|&v| crate::loss::sigmoid(v)).collect(),
        );
        self.push(m, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for i in 0..m.rows {
            let row = m.row_mut(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(m, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const LN_EPS: f64 = 1e-5;
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let (n, d) = x.shape();
        assert_eq!(g.shape(), (1, d), "layer norm gain");
        let mut out = Matrix::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat[i * d + j] = h;
                out.data[i * d + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for i in 0..x.rows {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let m = Matrix::from_vec(x.rows, len, data);
        self.push(m, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut m = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat rows");
            for i in 0..rows {
                m.data[i * cols + off..i * cols + off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a).gather_rows(idx);
        self.push(m, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn add_pairs(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "add_pairs rows");
        assert_eq!(y.cols, 2, "add_pairs offset width");
        assert_eq!(x.cols % 2, 0, "add_pairs pair width");
        let mut m = x.clone();
        for i in 0..m.rows {
            let (ox, oy) = (y.get(i, 0), y.get(i, 1));
            for pair in m.row_mut(i).chunks_exact_mut(2) {
                pair[0] += ox;
                pair[1] += oy;
            }
        }
        self.push(m, Op::AddPairs(a, b))
    }

    /// Propagates the seed gradients back through the tape and returns
    /// gradients for every parameter in the store.
    pub fn backward(&self, seeds: Vec<(Var, Matrix)>) -> Vec<Matrix> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut param_grads = self.store.zeros_like();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    gemm(g.rows, g.cols, y.rows, &g.data, false, &y.data, true, &mut ga.data, 0.0);
                    let mut gb = Matrix::zeros(y.rows, y.cols);
                    gemm(x.cols, x.rows, g.cols, &x.data, true, &g.data, false, &mut gb.data, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    gemm(g.rows, g.cols, y.cols, &g.data, false, &y.data, false, &mut ga.data, 0.0);
                    let mut gb = Matrix::zeros(y.rows, y.cols);
                    gemm(g.cols, g.rows, x.cols, &g.data, true, &x.data, false, &mut gb.data, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (s, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let m = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut grads, *a, m);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, data));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let data = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, data));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut gx = Matrix::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for (o, (gv, yv)) in gx.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let (n, d) = g.shape();
                    let mut gx = Matrix::zeros(n, d);
                    let mut gg = Matrix::zeros(1, d);
                    let mut gb = Matrix::zeros(1, d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let gij = g.data[i * d + j];
                            let h = xhat[i * d + j];
                            gg.data[j] += gij * h;
                            gb.data[j] += gij;
                            dxhat[j] = gij * gv.data[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * h;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx.data[i * d + j] = rstd[i] * (dxhat[j] - m1 - xhat[i * d + j] * m2);
                        }
                    }
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Matrix::zeros(x.rows, x.cols);
                    for i in 0..g.rows {
                        gx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Matrix::zeros(g.rows, w);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::GatherRows(a, rows) => {
                    let x = self.value(*a);
                    let mut gx = Matrix::zeros(x.rows, x.cols);
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::AddPairs(a, b) => {
                    let mut gb = Matrix::zeros(g.rows, 2);
                    for i in 0..g.rows {
                        for pair in g.row(i).chunks_exact(2) {
                            gb.data[2 * i] += pair[0];
                            gb.data[2 * i + 1] += pair[1];
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Matrix {
        // Small deterministic pseudo-random fill.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Scalar objective exercising every op; returns (loss, param grads).
    fn objective(store: &ParamStore, backward: bool) -> (f64, Vec<Matrix>) {
        let mut t = Tape::new(store);
        let x = t.param(0);
        let w = t.param(1);
        let b = t.param(2);
        let g = t.param(3);
        let off = t.param(4);
        let h = t.matmul(x, w);
        let h = t.add_row(h, b);
        let h = t.layer_norm(h, g, b);
        let r = t.relu(h);
        let s = t.sigmoid(h);
        let h = t.add(r, s);
        let h = t.scale(h, 0.7);
        let left = t.slice_cols(h, 0, 2);
        let right = t.slice_cols(h, 2, 2);
        let att = t.matmul_nt(left, right);
        let att = t.softmax_rows(att);
        let mixed = t.matmul(att, h);
        let cat = t.concat_cols(&[mixed, left]);
        let picked = t.gather_rows(cat, &[2, 0, 2]);
        let pts = t.slice_cols(picked, 0, 4);
        let o = t.gather_rows(off, &[1, 0, 1]);
        let out = t.add_pairs(pts, o);
        let v = t.value(out).clone();
        let loss: f64 = v.data.iter().enumerate().map(|(i, x)| x * x * (1.0 + i as f64 * 0.1)).sum();
        let grads = if backward {
            let seed = Matrix::from_vec(
                v.rows,
                v.cols,
                v.data.iter().enumerate().map(|(i, x)| 2.0 * x * (1.0 + i as f64 * 0.1)).collect(),
            );
            t.backward(vec![(out, seed)])
        } else {
            Vec::new()
        };
        (loss, grads)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.push("x", mat(3, 5, 1));
        store.push("w", mat(5, 4, 2));
        store.push("b", mat(1, 4, 3));
        store.push("g", mat(1, 4, 4));
        store.push("off", mat(2, 2, 5));
        let (_, grads) = objective(&store, true);
        let h = 1e-6;
        for p in 0..store.len() {
            for k in 0..store.values[p].data.len() {
                let mut up = store.clone();
                up.values[p].data[k] += h;
                let mut dn = store.clone();
                dn.values[p].data[k] -= h;
                let num = (objective(&up, false).0 - objective(&dn, false).0) / (2.0 * h);
                let an = grads[p].data[k];
                let err = (num - an).abs() / an.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-5, "param {p}[{k}]: {an} vs {num}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        let a = mat(3, 4, 9);
        let b = mat(5, 4, 10);
        let mut c = Matrix::zeros(3, 5);
        gemm(3, 4, 5, &a.data, false, &b.data, true, &mut c.data, 0.0);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(j, k)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }
}
