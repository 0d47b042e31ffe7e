//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Each forward op appends one node carrying its value and a backward
//! closure that scatters the incoming gradient into its inputs. Gradients
//! of parameter leaves are flushed into the [`ParamStore`] accumulators at
//! the end of [`Tape::backward`], so repeated backward calls accumulate.
//!
//! One tape belongs to one thread; inference creates tapes with gradients
//! disabled, in which case no closures are recorded.

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt_accum, matmul_at_b_accum, matmul_into, Tensor};
use rand::Rng;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Tensor], &[f64], &mut [Vec<f64>])>;

pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    param_of: Vec<Option<ParamId>>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::with_grad(true)
    }

    /// A tape that records no backward closures; used for inference.
    pub fn no_grad() -> Tape {
        Tape::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Tape {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            param_of: Vec::new(),
            grad_enabled,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    fn next_id(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(if self.grad_enabled { back } else { None });
        self.param_of.push(None);
        Var(self.values.len() - 1)
    }

    /// A constant leaf; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// A parameter leaf; its gradient is flushed into the store's
    /// accumulator by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).tensor.clone(), None);
        self.param_of[v.0] = Some(id);
        v
    }

    /// Run reverse-mode accumulation from a scalar loss and flush parameter
    /// gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) {
        assert_eq!(
            self.values[loss.0].shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let mut grads: Vec<Vec<f64>> = self.values.iter().map(|t| vec![0.0; t.len()]).collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[i] {
                let own = std::mem::take(&mut grads[i]);
                if own.iter().any(|&g| g != 0.0) {
                    back(&self.values, &own, &mut grads);
                }
            }
        }
        for (i, pid) in self.param_of.iter().enumerate() {
            if let Some(pid) = pid {
                if !grads[i].is_empty() {
                    store.accumulate_grad(*pid, &grads[i]);
                }
            }
        }
    }

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(
            k, k2,
            "matmul: shape mismatch ({m}, {k}) vs ({k2}, {n})"
        );
        let mut out = Tensor::zeros(m, n);
        matmul_into(self.values[a.0].data(), m, k, self.values[b.0].data(), n, out.data_mut());
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                matmul_a_bt_accum(g, m, n, vals[b.0].data(), k, &mut grads[a.0]);
                matmul_at_b_accum(vals[a.0].data(), m, k, g, n, &mut grads[b.0]);
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = &self.values[a.0];
        let mut out = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                out.set(j, i, src.at(i, j));
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let ga = &mut grads[a.0];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let (m, n) = self.shape(a);
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |_vals, g, grads| {
                for (ga, &gv) in grads[a.0].iter_mut().zip(g) {
                    *ga += gv;
                }
                for (gb, &gv) in grads[b.0].iter_mut().zip(g) {
                    *gb += gv;
                }
            })),
        )
    }

    /// Broadcasts `b` (1 x n) over every row of `a` (m x n).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        assert_eq!((bm, bn), (1, n), "add_bias: shape mismatch ({m}, {n}) vs ({bm}, {bn})");
        let bias = self.values[b.0].data().to_vec();
        let mut out = self.values[a.0].clone();
        for r in 0..m {
            for c in 0..n {
                let v = out.at(r, c) + bias[c];
                out.set(r, c, v);
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for (ga, &gv) in grads[a.0].iter_mut().zip(g) {
                    *ga += gv;
                }
                let gb = &mut grads[b.0];
                for r in 0..m {
                    for c in 0..n {
                        gb[c] += g[r * n + c];
                    }
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let (m, n) = self.shape(a);
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |vals, g, grads| {
                for ((ga, &gv), &bv) in grads[a.0].iter_mut().zip(g).zip(vals[b.0].data()) {
                    *ga += gv * bv;
                }
                for ((gb, &gv), &av) in grads[b.0].iter_mut().zip(g).zip(vals[a.0].data()) {
                    *gb += gv * av;
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let data = self.values[a.0].data().iter().map(|x| x * c).collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |_vals, g, grads| {
                for (ga, &gv) in grads[a.0].iter_mut().zip(g) {
                    *ga += c * gv;
                }
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let data = self.values[a.0].data().iter().map(|x| x + c).collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |_vals, g, grads| {
                for (ga, &gv) in grads[a.0].iter_mut().zip(g) {
                    *ga += gv;
                }
            })),
        )
    }

    /// Multiply every entry of `a` by the scalar variable `s` (1 x 1).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar_var: scalar required");
        let (m, n) = self.shape(a);
        let sv = self.values[s.0].item();
        let data = self.values[a.0].data().iter().map(|x| x * sv).collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |vals, g, grads| {
                let sv = vals[s.0].item();
                let mut ds = 0.0;
                for ((ga, &gv), &av) in grads[a.0].iter_mut().zip(g).zip(vals[a.0].data()) {
                    *ga += gv * sv;
                    ds += gv * av;
                }
                grads[s.0][0] += ds;
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = self.shape(a);
        let (m2, q) = self.shape(b);
        assert_eq!(m, m2, "concat_cols: shape mismatch ({m}, {p}) vs ({m2}, {q})");
        let mut out = Tensor::zeros(m, p + q);
        for r in 0..m {
            out.data_mut()[r * (p + q)..r * (p + q) + p].copy_from_slice(self.values[a.0].row(r));
            out.data_mut()[r * (p + q) + p..(r + 1) * (p + q)].copy_from_slice(self.values[b.0].row(r));
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for r in 0..m {
                    for c in 0..p {
                        grads[a.0][r * p + c] += g[r * (p + q) + c];
                    }
                    for c in 0..q {
                        grads[b.0][r * q + c] += g[r * (p + q) + p + c];
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat_rows: empty input");
        let n = self.shape(vars[0]).1;
        let mut rows = 0;
        for &v in vars {
            let (r, c) = self.shape(v);
            assert_eq!(c, n, "concat_rows: column mismatch {c} vs {n}");
            rows += r;
        }
        let mut out = Tensor::zeros(rows, n);
        let mut off = 0;
        let mut spans = Vec::with_capacity(vars.len());
        for &v in vars {
            let t = &self.values[v.0];
            out.data_mut()[off..off + t.len()].copy_from_slice(t.data());
            spans.push((v, off, t.len()));
            off += t.len();
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for &(v, off, len) in &spans {
                    for (ga, &gv) in grads[v.0].iter_mut().zip(&g[off..off + len]) {
                        *ga += gv;
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols: {start}+{len} > {n}");
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&self.values[a.0].row(r)[start..start + len]);
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for r in 0..m {
                    for c in 0..len {
                        grads[a.0][r * n + start + c] += g[r * len + c];
                    }
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows: {start}+{len} > {m}");
        let data = self.values[a.0].data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::new(len, n, data),
            Some(Box::new(move |_vals, g, grads| {
                for (ga, &gv) in grads[a.0][start * n..(start + len) * n].iter_mut().zip(g) {
                    *ga += gv;
                }
            })),
        )
    }

    /// Gather rows of an embedding table; duplicate ids accumulate on the
    /// way back.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.shape(table);
        let mut out = Tensor::zeros(ids.len(), d);
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < rows, "embed_rows: id {id} out of range {rows}");
            out.data_mut()[k * d..(k + 1) * d].copy_from_slice(self.values[table.0].row(id));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for (k, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        grads[table.0][id * d + c] += g[k * d + c];
                    }
                }
            })),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        assert!(m >= 1, "mean_rows: empty input");
        let mut out = Tensor::zeros(1, n);
        for r in 0..m {
            for c in 0..n {
                out.data_mut()[c] += self.values[a.0].at(r, c);
            }
        }
        for v in out.data_mut() {
            *v /= m as f64;
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let inv = 1.0 / m as f64;
                for r in 0..m {
                    for c in 0..n {
                        grads[a.0][r * n + c] += g[c] * inv;
                    }
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s: f64 = self.values[a.0].data().iter().sum();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, g, grads| {
                let gv = g[0];
                for ga in grads[a.0].iter_mut().take(m * n) {
                    *ga += gv;
                }
            })),
        )
    }

    /// Row-wise softmax. When `keep` is given (row-major, same size as the
    /// input), masked-out entries get probability exactly zero. Every row
    /// must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Var {
        let (m, n) = self.shape(a);
        if let Some(k) = keep {
            assert_eq!(k.len(), m * n, "softmax mask size mismatch");
        }
        let keep: Vec<bool> = keep.map(|k| k.to_vec()).unwrap_or_else(|| vec![true; m * n]);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = self.values[a.0].row(r);
            let krow = &keep[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (v, &k) in row.iter().zip(krow) {
                if k && *v > mx {
                    mx = *v;
                }
            }
            assert!(mx.is_finite(), "softmax row {r} has no kept entries");
            let mut z = 0.0;
            for (c, (&v, &k)) in row.iter().zip(krow).enumerate() {
                if k {
                    let e = (v - mx).exp();
                    out.set(r, c, e);
                    z += e;
                }
            }
            for c in 0..n {
                let v = out.at(r, c) / z;
                out.set(r, c, v);
            }
        }
        let out_id = self.next_id();
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let y = &vals[out_id];
                for r in 0..m {
                    let yrow = y.row(r);
                    let grow = &g[r * n..(r + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        if keep[r * n + c] {
                            grads[a.0][r * n + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            })),
        )
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, n), "layer_norm beta shape");
        let mut out = Tensor::zeros(m, n);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = self.values[x.0].row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * inv;
            }
        }
        for r in 0..m {
            for c in 0..n {
                out.set(
                    r,
                    c,
                    xhat[r * n + c] * self.values[gamma.0].at(0, c) + self.values[beta.0].at(0, c),
                );
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let gam = vals[gamma.0].data();
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..n {
                        let dxh = grow[c] * gam[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[c];
                        grads[gamma.0][c] += grow[c] * xh[c];
                        grads[beta.0][c] += grow[c];
                    }
                    let inv = inv_std[r];
                    let nf = n as f64;
                    for c in 0..n {
                        let dxh = grow[c] * gam[c];
                        grads[x.0][r * n + c] +=
                            inv * (dxh - sum_dxhat / nf - xh[c] * sum_dxhat_xhat / nf);
                    }
                }
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out_id = self.next_id();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |vals, g, grads| {
                for ((ga, &gv), &y) in grads[a.0].iter_mut().zip(g).zip(vals[out_id].data()) {
                    *ga += gv * y * (1.0 - y);
                }
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.max(0.0)).collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |vals, g, grads| {
                for ((ga, &gv), &x) in grads[a.0].iter_mut().zip(g).zip(vals[a.0].data()) {
                    if x > 0.0 {
                        *ga += gv;
                    }
                }
            })),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.ln()).collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |vals, g, grads| {
                for ((ga, &gv), &x) in grads[a.0].iter_mut().zip(g).zip(vals[a.0].data()) {
                    *ga += gv / x;
                }
            })),
        )
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(r < m && c < n, "pick: ({r}, {c}) out of ({m}, {n})");
        let v = self.values[a.0].at(r, c);
        self.push(
            Tensor::scalar(v),
            Some(Box::new(move |_vals, g, grads| {
                grads[a.0][r * n + c] += g[0];
            })),
        )
    }

    /// Scatter a 1 x m row into a 1 x `width` row; duplicate target ids
    /// accumulate.
    pub fn scatter_cols(&mut self, src: Var, ids: &[usize], width: usize) -> Var {
        let (m, n) = self.shape(src);
        assert_eq!(m, 1, "scatter_cols: row vector required");
        assert_eq!(n, ids.len(), "scatter_cols: id count mismatch");
        let mut out = Tensor::zeros(1, width);
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < width, "scatter_cols: id {id} out of range {width}");
            out.data_mut()[id] += self.values[src.0].data()[k];
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for (k, &id) in ids.iter().enumerate() {
                    grads[src.0][k] += g[id];
                }
            })),
        )
    }

    /// Relative-position score term for causal self-attention:
    /// `out[j, i] = scale * q[j] . table[idx[j*t + i]]` for `i <= j`, zero
    /// above the diagonal.
    pub fn rel_scores(&mut self, q: Var, table: Var, idx: &[usize], scale: f64) -> Var {
        let (t, dh) = self.shape(q);
        let (rows, dh2) = self.shape(table);
        assert_eq!(dh, dh2, "rel_scores: dim mismatch {dh} vs {dh2}");
        assert_eq!(idx.len(), t * t, "rel_scores: index matrix size");
        let mut out = Tensor::zeros(t, t);
        for j in 0..t {
            let qrow = self.values[q.0].row(j);
            for i in 0..=j {
                let id = idx[j * t + i];
                assert!(id < rows, "rel_scores: id {id} out of range {rows}");
                let emb = self.values[table.0].row(id);
                let dot: f64 = qrow.iter().zip(emb).map(|(a, b)| a * b).sum();
                out.set(j, i, scale * dot);
            }
        }
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                for j in 0..t {
                    for i in 0..=j {
                        let gv = g[j * t + i];
                        if gv == 0.0 {
                            continue;
                        }
                        let id = idx[j * t + i];
                        let emb = vals[table.0].row(id);
                        let qrow = vals[q.0].row(j);
                        for c in 0..dh {
                            grads[q.0][j * dh + c] += gv * scale * emb[c];
                            grads[table.0][id * dh + c] += gv * scale * qrow[c];
                        }
                    }
                }
            })),
        )
    }

    /// Relative-position context term:
    /// `out[j] = sum_{i <= j} attn[j, i] * table[idx[j*t + i]]`.
    pub fn rel_context(&mut self, attn: Var, table: Var, idx: &[usize]) -> Var {
        let (t, t2) = self.shape(attn);
        assert_eq!(t, t2, "rel_context: square attention required");
        let (rows, dh) = self.shape(table);
        assert_eq!(idx.len(), t * t, "rel_context: index matrix size");
        let mut out = Tensor::zeros(t, dh);
        for j in 0..t {
            for i in 0..=j {
                let a = self.values[attn.0].at(j, i);
                if a == 0.0 {
                    continue;
                }
                let id = idx[j * t + i];
                assert!(id < rows, "rel_context: id {id} out of range {rows}");
                let emb = self.values[table.0].row(id);
                for c in 0..dh {
                    out.data_mut()[j * dh + c] += a * emb[c];
                }
            }
        }
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                for j in 0..t {
                    let grow = &g[j * dh..(j + 1) * dh];
                    for i in 0..=j {
                        let id = idx[j * t + i];
                        let emb = vals[table.0].row(id);
                        let a = vals[attn.0].at(j, i);
                        let mut da = 0.0;
                        for c in 0..dh {
                            da += grow[c] * emb[c];
                            grads[table.0][id * dh + c] += a * grow[c];
                        }
                        grads[attn.0][j * t + i] += da;
                    }
                }
            })),
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p == 0.0 {
            return a;
        }
        assert!((0.0..1.0).contains(&p), "dropout prob {p} out of range");
        let (m, n) = self.shape(a);
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(
            Tensor::new(m, n, data),
            Some(Box::new(move |_vals, g, grads| {
                for ((ga, &gv), &mv) in grads[a.0].iter_mut().zip(g).zip(&mask) {
                    *ga += gv * mv;
                }
            })),
        )
    }

    /// `-log_probs[0, target]` as a scalar loss term.
    pub fn cross_entropy_from_log_probs(&mut self, log_probs: Var, target: usize) -> Var {
        let picked = self.pick(log_probs, 0, target);
        self.scale(picked, -1.0)
    }

    /// Convenience: `1 - s` for a scalar variable.
    pub fn one_minus(&mut self, s: Var) -> Var {
        let neg = self.scale(s, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Sum a list of same-shape vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", t);
        (s, id)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::no_grad();
        let a = tape.leaf(Tensor::new(1, 2, vec![0.0, 0.0]));
        let y = tape.softmax_rows(a, None);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::no_grad();
        let a = tape.leaf(Tensor::new(1, 4, vec![5.0, 1.0, 3.0, 2.0]));
        let y = tape.softmax_rows(a, Some(&[false, true, false, true]));
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[2], 0.0);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::new(1, 4, vec![3.0; 4]));
        let gamma = tape.leaf(Tensor::new(1, 4, vec![1.0; 4]));
        let beta = tape.leaf(Tensor::zeros(1, 4));
        let y = tape.layer_norm(x, gamma, beta, 1e-5);
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut store, id) = store_with(Tensor::new(2, 3, vec![1.0; 6]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut store);
        assert_eq!(store.get(id).grad.data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_zero_scaled_value_is_zero() {
        let (mut store, id) = store_with(Tensor::new(1, 3, vec![2.0, -1.0, 5.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let y = tape.sigmoid(p);
        let z = tape.scale(y, 0.0);
        let loss = tape.sum_all(z);
        tape.backward(loss, &mut store);
        assert_eq!(store.get(id).grad.data(), &[0.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut store, id) = store_with(Tensor::new(1, 2, vec![1.0, 2.0]));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let loss = tape.sum_all(p);
            tape.backward(loss, &mut store);
        }
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    }

    /// Central finite differences for a scalar-valued function of one
    /// parameter tensor.
    fn finite_diff<F>(store: &mut ParamStore, id: ParamId, f: F) -> Vec<f64>
    where
        F: Fn(&ParamStore) -> f64,
    {
        let h = 1e-5;
        let n = store.get(id).tensor.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = f(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = f(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            out[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let b = store.add("b", Tensor::new(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let av = tape.param(s, a);
            let bv = tape.param(s, b);
            let y = tape.matmul(av, bv);
            let sig = tape.sigmoid(y);
            let loss = tape.sum_all(sig);
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let y = tape.matmul(av, bv);
        let sig = tape.sigmoid(y);
        let loss = tape.sum_all(sig);
        tape.backward(loss, &mut store);

        for id in [a, b] {
            let fd = finite_diff(&mut store, id, run);
            let ad = store.get(id).grad.data().to_vec();
            for (x, y) in ad.iter().zip(&fd) {
                assert!(rel_err(*x, *y) < 1e-6, "ad {x} fd {y}");
            }
        }
    }

    /// Randomized finite-difference sweep over every op, many seeds.
    #[test]
    fn all_ops_pass_finite_difference_check() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let m = 3;
            let n = 4;
            let x = store.add(
                "x",
                Tensor::new(m, n, (0..m * n).map(|_| rng.gen_range(-1.5..1.5)).collect()),
            );
            let w = store.add(
                "w",
                Tensor::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            );
            let gamma = store.add("gamma", Tensor::new(1, n, (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()));
            let beta = store.add("beta", Tensor::new(1, n, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()));
            let table = store.add(
                "table",
                Tensor::new(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            );

            // A function that routes through most ops and ends in a scalar.
            let idx: Vec<usize> = (0..m * m).map(|i| i % 6).collect();
            let run = move |s: &ParamStore| -> (f64, Option<(Tape, Var)>) {
                let mut tape = Tape::new();
                let xv = tape.param(s, x);
                let wv = tape.param(s, w);
                let gv = tape.param(s, gamma);
                let bv = tape.param(s, beta);
                let tv = tape.param(s, table);

                let h = tape.matmul(xv, wv);
                let hb = tape.add_bias(h, bv);
                let ln = tape.layer_norm(hb, gv, bv, 1e-5);
                let r = tape.relu(ln);
                let t = tape.transpose(r);
                let back = tape.transpose(t);
                let merged = tape.add(back, ln);
                let part = tape.slice_cols(merged, 0, 2);
                let q = tape.slice_rows(part, 0, m);
                let scores = tape.rel_scores(q, tv, &idx, 0.7);
                let keep: Vec<bool> = (0..m * m).map(|i| i % m <= i / m).collect();
                let attn = tape.softmax_rows(scores, Some(&keep));
                let ctx = tape.rel_context(attn, tv, &idx);
                let emb = tape.embed_rows(tv, &[1, 3, 1]);
                let mixed = tape.mul(ctx, emb);
                let pooled = tape.mean_rows(mixed);
                let sct = tape.scatter_cols(pooled, &[1, 0], 3);
                let sig = tape.sigmoid(sct);
                let gsc = tape.pick(sig, 0, 0);
                let scaled = tape.mul_scalar_var(sct, gsc);
                let along = tape.concat_cols(scaled, sct);
                let row2 = tape.concat_rows(&[along, along]);
                let pos = tape.sigmoid(row2);
                let lg = tape.log(pos);
                let summed = tape.sum_all(lg);
                let total = tape.scale(summed, 0.5);
                (tape.value(total).item(), Some((tape, total)))
            };

            let (_, pair) = run(&store);
            let (mut tape, loss) = pair.unwrap();
            tape.backward(loss, &mut store);
            let grads: Vec<(ParamId, Vec<f64>)> = [x, w, gamma, beta, table]
                .iter()
                .map(|&id| (id, store.get(id).grad.data().to_vec()))
                .collect();
            for (id, ad) in grads {
                let fd = finite_diff(&mut store, id, |s| run(s).0);
                for (k, (a, b)) in ad.iter().zip(&fd).enumerate() {
                    assert!(
                        rel_err(*a, *b) < 1e-4,
                        "seed {seed} param {:?} idx {k}: ad {a} fd {b}",
                        store.get(id).name
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::no_grad();
        let a = tape.leaf(Tensor::new(5, 7, (0..35).map(|_| rng.gen_range(-4.0..4.0)).collect()));
        let y = tape.softmax_rows(a, None);
        for r in 0..5 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(tape.value(y).row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::no_grad();
        let a = tape.leaf(Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(a, 0.0, &mut rng);
        assert_eq!(a, y);
    }
}
