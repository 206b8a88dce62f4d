//! Minimal reverse-mode differentiation over row-major f64 matrices.
//!
//! Only the operations the toy transformer needs are provided. A tape
//! borrows the parameter snapshot it differentiates against; parameter
//! nodes do not copy their values.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_t inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        let oi = out.row_mut(i);
        for (j, o) in oi.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    }
    out
}

/// `a · b` for `a: [m,k]`, `b: [k,n]`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let oi = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, b.row(p), oi);
            }
        }
    }
    out
}

/// `aᵀ · b` accumulated into `out` for `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    for i in 0..a.rows {
        let bi = b.row(i);
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, bi, out.row_mut(p));
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(usize),
    Add(Var, Var),
    AddRow(Var, Var),
    MatMulT(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(Mat::zeros(0, 0), Op::Param(idx));
        self.param_vars[idx] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let m = Mat::from_vec(va.rows, va.cols, data);
        self.push(m, Op::Add(a, b))
    }

    /// `x + 1·bias` with `bias: [1, cols]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut m = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, m.cols), "add_row shapes");
        for r in 0..m.rows {
            for (o, bv) in m.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(m, Op::AddRow(x, bias))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let m = matmul_t(self.value(a), self.value(b));
        self.push(m, Op::MatMulT(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = matmul(self.value(a), self.value(b));
        self.push(m, Op::MatMul(a, b))
    }

    /// `x · Wᵀ + b` for a `[out, in]` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let m = Mat::from_vec(v.rows, v.cols, v.data.iter().map(|a| a * s).collect());
        self.push(m, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = Mat::from_vec(v.rows, v.cols, v.data.iter().map(|&a| a.max(0.0)).collect());
        self.push(m, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = v.cols as f64;
        let mut xhat = Mat::zeros(v.rows, v.cols);
        let mut out = Mat::zeros(v.rows, v.cols);
        let mut inv_std = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for (h, a) in xr.iter_mut().zip(row) {
                *h = (a - mean) * is;
            }
            let xr = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g.data[j] * xr[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut m = self.value(x).clone();
        for r in 0..m.rows {
            let row = m.row_mut(r);
            let live = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row[..live].iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row[..live].iter_mut() {
                *v /= sum;
            }
            row[live..].fill(0.0);
        }
        self.push(m, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x);
        let mut m = Mat::zeros(v.rows, width);
        for r in 0..v.rows {
            m.row_mut(r).copy_from_slice(&v.row(r)[start..start + width]);
        }
        self.push(m, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut m = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                m.row_mut(r)[at..at + v.cols].copy_from_slice(v.row(r));
            }
            at += v.cols;
        }
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut m = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(m, Op::Gather(table, ids.to_vec()))
    }

    /// Mean token cross-entropy of row-wise logits; a `1 × 1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let mut probs = l.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            loss += sum.ln() - (l.row(r)[t] - max);
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let m = Mat::from_vec(1, 1, vec![loss / targets.len() as f64]);
        self.push(m, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// took part in the computation.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut out: Vec<Option<Mat>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize, f: impl FnOnce(&mut Mat)) {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Mat::zeros(rows, cols));
            }
            f(slot.as_mut().unwrap());
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, g);
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, vb));
                    acc_with(&mut grads, *b, vb.rows, vb.cols, |gb| matmul_tn_acc(&g, va, gb));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul_t(&g, vb));
                    acc_with(&mut grads, *b, vb.rows, vb.cols, |gb| matmul_tn_acc(va, &g, gb));
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    let m = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    acc(&mut grads, *x, m);
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let data = g.data.iter().zip(&vx.data).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let n = g.cols as f64;
                    let mut gg = Mat::zeros(1, g.cols);
                    let mut gbias = Mat::zeros(1, g.cols);
                    let mut gx = Mat::zeros(g.rows, g.cols);
                    let mut dxhat = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..g.cols {
                            gg.data[j] += gr[j] * xr[j];
                            gbias.data[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let is = inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let p = &self.nodes[i].value;
                    let mut gx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let s = dot(pr, gr);
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = pr[j] * (gr[j] - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let vx = self.value(*x);
                    let start = *start;
                    acc_with(&mut grads, *x, vx.rows, vx.cols, |gx| {
                        for r in 0..g.rows {
                            for (o, v) in gx.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut m = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            m.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        acc(&mut grads, p, m);
                        at += w;
                    }
                }
                Op::Gather(table, ids) => {
                    let vt = self.value(*table);
                    acc_with(&mut grads, *table, vt.rows, vt.cols, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.data[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.row_mut(r)[t] -= 1.0;
                    }
                    for v in gl.data.iter_mut() {
                        *v *= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(params: &mut [Mat], idx: usize, k: usize, f: &dyn Fn(&[Mat]) -> f64) -> f64 {
        let h = 1e-6;
        let orig = params[idx].data[k];
        params[idx].data[k] = orig + h;
        let up = f(params);
        params[idx].data[k] = orig - h;
        let down = f(params);
        params[idx].data[k] = orig;
        (up - down) / (2.0 * h)
    }

    fn check(params: Vec<Mat>, build: &dyn Fn(&mut Tape) -> Var) {
        let f = |ps: &[Mat]| {
            let mut t = Tape::new(ps);
            let l = build(&mut t);
            t.value(l).data[0]
        };
        let mut ps = params;
        let grads = {
            let mut t = Tape::new(&ps);
            let l = build(&mut t);
            t.backward(l)
        };
        for idx in 0..ps.len() {
            for k in 0..ps[idx].data.len() {
                let analytic = grads[idx].as_ref().map_or(0.0, |g| g.data[k]);
                let numeric = numeric_grad(&mut ps, idx, k, &f);
                assert!(
                    (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {idx}[{k}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    fn seq(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 0.37).sin()).collect())
    }

    #[test]
    fn matmul_shapes_and_values() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(matmul(&a, &b).data, vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_t(&a, &a).data, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn linear_relu_layernorm_gradients() {
        let params = vec![seq(3, 4, 0.0), seq(5, 4, 1.0), seq(1, 5, 2.0), seq(1, 5, 3.0), seq(1, 5, 4.0)];
        check(params, &|t| {
            let x = t.param(0);
            let w = t.param(1);
            let b = t.param(2);
            let y = t.linear(x, w, b);
            let y = t.relu(y);
            let (g, bb) = (t.param(3), t.param(4));
            let y = t.layer_norm(y, g, bb);
            let s = t.scale(y, 0.7);
            t.cross_entropy(s, &[0, 4, 2])
        });
    }

    #[test]
    fn attention_path_gradients() {
        let params = vec![seq(6, 4, 0.5), seq(3, 8, 1.5), seq(4, 4, 2.5)];
        check(params, &|t| {
            let e = t.param(0);
            let x = t.gather(e, &[1, 3, 3, 5]);
            let q = t.slice_cols(x, 0, 2);
            let k = t.slice_cols(x, 2, 2);
            let s = t.matmul_t(q, k);
            let p = t.softmax(s, true);
            let v = t.param(2);
            let o = t.matmul(p, v);
            let o2 = t.scale(o, -1.3);
            let cat = t.concat_cols(&[o, o2]);
            let w = t.param(1);
            let logits = t.matmul_t(cat, w);
            let logits = t.add(logits, logits);
            t.cross_entropy(logits, &[0, 1, 2, 1])
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let params = vec![Mat::from_vec(2, 2, vec![1.0, 5.0, 2.0, 3.0])];
        let mut t = Tape::new(&params);
        let x = t.param(0);
        let p = t.softmax(x, true);
        assert_eq!(t.value(p).row(0), &[1.0, 0.0]);
        assert!((t.value(p).row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
