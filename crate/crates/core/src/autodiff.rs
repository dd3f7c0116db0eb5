//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A `Tape` records the forward computation as a flat list of nodes, each
//! holding its value and a backward closure that scatters the incoming
//! gradient to its parents. Everything runs at f64 and is deterministic,
//! which the sampler/training reproducibility contracts rely on.
//!
//! Tapes built with `Tape::inference()` skip backward bookkeeping entirely;
//! sampling uses that mode.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &mut Grads)>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    fn accum(&mut self, id: usize, g: Tensor) {
        match &mut self.slots[id] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: no backward closures are recorded.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            backward: if self.grad_enabled { backward } else { None },
        });
        Var(id)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Backpropagate from a scalar node. Returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(self.grad_enabled, "backward on inference tape");
        assert_eq!(self.nodes[root.0].value.numel(), 1, "root must be scalar");
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[id].backward {
                back(&g, &mut grads);
            }
            grads.slots[id] = Some(g);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.clone());
                grads.accum(b.0, dout.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.clone());
                grads.accum(b.0, dout.scale(-1.0));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.mul(&bv);
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.mul(&bv));
                grads.accum(b.0, dout.mul(&av));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.scale(c));
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let value = av.map(|x| x * sigmoid_scalar(x));
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let g = av.zip_map(dout, |x, d| {
                    let s = sigmoid_scalar(x);
                    d * (s + x * s * (1.0 - s))
                });
                grads.accum(a.0, g);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let g = out.zip_map(dout, |y, d| d * y * (1.0 - y));
                grads.accum(a.0, g);
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).reshaped(shape);
        let orig = self.value(a).shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.reshaped(&orig));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).mean());
        let shape = self.value(a).shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, Tensor::filled(&shape, dout.data()[0] / n));
            })),
        )
    }

    /// Scalar `mean(a * w)` with constant weights `w`.
    pub fn mean_weighted(&mut self, a: Var, w: &Tensor) -> Var {
        let av = self.value(a);
        assert!(av.same_shape(w), "mean_weighted shape mismatch");
        let n = av.numel() as f64;
        let value = Tensor::scalar(av.dot(w) / n);
        let w = w.clone();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, w.scale(dout.data()[0] / n));
            })),
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- linear algebra ----

    /// `x [n,din] * w^T [din,dout] + b -> [n,dout]` with weight stored `[dout,din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let dout_dim = wv.shape()[0];
        assert_eq!(wv.shape()[1], din, "linear dims");
        let mut value = xv.matmul_nt(&wv);
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            assert_eq!(bias.numel(), dout_dim);
            let vd = value.data_mut();
            for i in 0..n {
                for j in 0..dout_dim {
                    vd[i * dout_dim + j] += bias.data()[j];
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                // dout [n,dout]; dx = dout*w; dw = dout^T*x; db = col sums.
                grads.accum(x.0, dout.matmul(&wv));
                grads.accum(w.0, dout.matmul_tn(&xv));
                if let Some(bv) = b {
                    let mut db = vec![0.0; dout_dim];
                    for i in 0..n {
                        for j in 0..dout_dim {
                            db[j] += dout.data()[i * dout_dim + j];
                        }
                    }
                    grads.accum(bv.0, Tensor::from_vec(&[dout_dim], db));
                }
            })),
        )
    }

    /// `a [m,k] * b^T [k,n] -> [m,n]` where `b` is `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.matmul_nt(&bv);
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.matmul(&bv));
                grads.accum(b.0, dout.matmul_tn(&av));
            })),
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table).clone();
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < vocab, "token id {id} out of vocab {vocab}");
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::from_vec(&[ids.len(), dim], data);
        let ids = ids.to_vec();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let mut dt = Tensor::zeros(&[vocab, dim]);
                {
                    let dtd = dt.data_mut();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dtd[id * dim + j] += dout.data()[row * dim + j];
                        }
                    }
                }
                grads.accum(table.0, dt);
            })),
        )
    }

    /// L2-normalize a vector to unit length.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let norm = av.norm().max(1e-12);
        let value = av.scale(1.0 / norm);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let proj = y.dot(dout);
                let g = dout.zip_map(&y, |d, yi| (d - yi * proj) / norm);
                grads.accum(a.0, g);
            })),
        )
    }

    /// Mean cross-entropy over rows; `targets[i]` indexes the true class.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits).clone();
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), n);
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                probs[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                probs[i * m + j] /= z;
            }
            loss += z.ln() + mx - row[targets[i]];
        }
        loss /= n as f64;
        let targets = targets.to_vec();
        let probs = Tensor::from_vec(&[n, m], probs);
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |dout, grads| {
                let s = dout.data()[0] / n as f64;
                let mut g = probs.scale(s);
                {
                    let gd = g.data_mut();
                    for (i, &t) in targets.iter().enumerate() {
                        gd[i * m + t] -= s;
                    }
                }
                grads.accum(logits.0, g);
            })),
        )
    }

    // ---- convolution and friends ----

    /// 2-D convolution, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (cin, h, win) = dims3(&xv);
        let ws = wv.shape();
        let (cout, kcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;
        let col = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let wmat = wv.reshaped(&[cout, cin * kh * kw]);
        let mut value = wmat.matmul(&col).reshaped(&[cout, ho, wo]);
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            let vd = value.data_mut();
            for c in 0..cout {
                let bc = bias.data()[c];
                for p in &mut vd[c * ho * wo..(c + 1) * ho * wo] {
                    *p += bc;
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let dmat = dout.reshaped(&[cout, ho * wo]);
                // Recompute col instead of storing it.
                let col = im2col(&xv, kh, kw, stride, pad, ho, wo);
                let wmat = wv.reshaped(&[cout, cin * kh * kw]);
                let dw = dmat.matmul_nt(&col).reshaped(&[cout, cin, kh, kw]);
                grads.accum(w.0, dw);
                let dcol = wmat.matmul_tn(&dmat);
                let dx = col2im(&dcol, cin, h, win, kh, kw, stride, pad, ho, wo);
                grads.accum(x.0, dx);
                if let Some(bv) = b {
                    let mut db = vec![0.0; cout];
                    for c in 0..cout {
                        db[c] = dout.data()[c * ho * wo..(c + 1) * ho * wo].iter().sum();
                    }
                    grads.accum(bv.0, Tensor::from_vec(&[cout], db));
                }
            })),
        )
    }

    /// Depthwise 3x3 convolution, stride 1, pad 1.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (c, h, win) = dims3(&xv);
        assert_eq!(wv.shape(), &[c, 3, 3], "dwconv weight shape");
        let mut value = Tensor::zeros(&[c, h, win]);
        {
            let vd = value.data_mut();
            dw3x3_forward(xv.data(), wv.data(), vd, c, h, win);
            if let Some(bv) = b {
                let bias = self.value(bv).clone();
                for ch in 0..c {
                    let bc = bias.data()[ch];
                    for p in &mut vd[ch * h * win..(ch + 1) * h * win] {
                        *p += bc;
                    }
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let mut dw = Tensor::zeros(&[c, 3, 3]);
                let mut dx = Tensor::zeros(&[c, h, win]);
                dw3x3_backward(
                    xv.data(),
                    wv.data(),
                    dout.data(),
                    dw.data_mut(),
                    dx.data_mut(),
                    c,
                    h,
                    win,
                );
                grads.accum(w.0, dw);
                grads.accum(x.0, dx);
                if let Some(bv) = b {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = dout.data()[ch * h * win..(ch + 1) * h * win].iter().sum();
                    }
                    grads.accum(bv.0, Tensor::from_vec(&[c], db));
                }
            })),
        )
    }

    /// GroupNorm over `(C,H,W)` with per-channel affine.
    pub fn groupnorm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (c, h, w) = dims3(&xv);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(gv.numel(), c, "groupnorm affine width {} vs channels {c}", gv.numel());
        let cs = c / groups;
        let n = cs * h * w;
        let mut xhat = vec![0.0; c * h * w];
        let mut inv_std = vec![0.0; groups];
        let mut value = Tensor::zeros(&[c, h, w]);
        {
            let vd = value.data_mut();
            for g in 0..groups {
                let lo = g * cs * h * w;
                let hi = lo + n;
                let seg = &xv.data()[lo..hi];
                let mean = seg.iter().sum::<f64>() / n as f64;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[g] = istd;
                for (i, &v) in seg.iter().enumerate() {
                    let ch = (lo + i) / (h * w);
                    let xn = (v - mean) * istd;
                    xhat[lo + i] = xn;
                    vd[lo + i] = gv.data()[ch] * xn + bv.data()[ch];
                }
            }
        }
        let xhat = Tensor::from_vec(&[c, h, w], xhat);
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for i in ch * h * w..(ch + 1) * h * w {
                        dgamma[ch] += dout.data()[i] * xhat.data()[i];
                        dbeta[ch] += dout.data()[i];
                    }
                }
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let dxd = dx.data_mut();
                    for g in 0..groups {
                        let lo = g * cs * h * w;
                        let istd = inv_std[g];
                        // dxhat for this group, plus the two mean-subtraction terms.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in lo..lo + n {
                            let ch = i / (h * w);
                            let dxh = dout.data()[i] * gv.data()[ch];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.data()[i];
                        }
                        for i in lo..lo + n {
                            let ch = i / (h * w);
                            let dxh = dout.data()[i] * gv.data()[ch];
                            dxd[i] = istd
                                * (dxh
                                    - sum_dxhat / n as f64
                                    - xhat.data()[i] * sum_dxhat_xhat / n as f64);
                        }
                    }
                }
                grads.accum(x.0, dx);
                grads.accum(gamma.0, Tensor::from_vec(&[c], dgamma));
                grads.accum(beta.0, Tensor::from_vec(&[c], dbeta));
            })),
        )
    }

    /// Multi-head attention `softmax(QK^T/sqrt(dh)) V`, fused forward/backward.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_impl(q, k, v, heads).0
    }

    /// Attention that also returns a copy of the pre-softmax logits, shaped
    /// `[heads, nq, nk]`, for diagnostics (not differentiated).
    pub fn attention_with_logits(&mut self, q: Var, k: Var, v: Var, heads: usize) -> (Var, Tensor) {
        self.attention_impl(q, k, v, heads)
    }

    fn attention_impl(&mut self, q: Var, k: Var, v: Var, heads: usize) -> (Var, Tensor) {
        let qv = self.value(q).clone();
        let kv = self.value(k).clone();
        let vv = self.value(v).clone();
        let (nq, d) = (qv.shape()[0], qv.shape()[1]);
        let nk = kv.shape()[0];
        assert_eq!(kv.shape()[1], d);
        assert_eq!(vv.shape(), kv.shape());
        assert!(d % heads == 0, "attn dim {d} not divisible by heads {heads}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = Tensor::zeros(&[nq, d]);
        let mut logits = Tensor::zeros(&[heads, nq, nk]);
        let mut probs = Tensor::zeros(&[heads, nq, nk]);
        {
            let od = out.data_mut();
            for hd in 0..heads {
                let qh = col_block(&qv, hd * dh, dh);
                let kh = col_block(&kv, hd * dh, dh);
                let vh = col_block(&vv, hd * dh, dh);
                let mut s = qh.matmul_nt(&kh);
                for x in s.data_mut() {
                    *x *= scale;
                }
                logits.data_mut()[hd * nq * nk..(hd + 1) * nq * nk]
                    .copy_from_slice(s.data());
                softmax_rows_inplace(&mut s, nk);
                probs.data_mut()[hd * nq * nk..(hd + 1) * nq * nk].copy_from_slice(s.data());
                let oh = s.matmul(&vh);
                for i in 0..nq {
                    for j in 0..dh {
                        od[i * d + hd * dh + j] = oh.data()[i * dh + j];
                    }
                }
            }
        }
        let var = self.push(
            out,
            Some(Box::new(move |dout, grads| {
                let mut dq = Tensor::zeros(&[nq, d]);
                let mut dk = Tensor::zeros(&[nk, d]);
                let mut dv = Tensor::zeros(&[nk, d]);
                for hd in 0..heads {
                    let p = Tensor::from_vec(
                        &[nq, nk],
                        probs.data()[hd * nq * nk..(hd + 1) * nq * nk].to_vec(),
                    );
                    let doh = col_block(dout, hd * dh, dh);
                    let kh = col_block(&kv, hd * dh, dh);
                    let vh = col_block(&vv, hd * dh, dh);
                    let qh = col_block(&qv, hd * dh, dh);
                    let dvh = p.matmul_tn(&doh);
                    let dp = doh.matmul_nt(&vh);
                    // dS = P o (dP - rowsum(dP o P))
                    let mut ds = Tensor::zeros(&[nq, nk]);
                    {
                        let dsd = ds.data_mut();
                        for i in 0..nq {
                            let mut row_dot = 0.0;
                            for j in 0..nk {
                                row_dot += dp.data()[i * nk + j] * p.data()[i * nk + j];
                            }
                            for j in 0..nk {
                                dsd[i * nk + j] = p.data()[i * nk + j]
                                    * (dp.data()[i * nk + j] - row_dot)
                                    * scale;
                            }
                        }
                    }
                    let dqh = ds.matmul(&kh);
                    let dkh = ds.matmul_tn(&qh);
                    scatter_col_block(&mut dq, &dqh, hd * dh);
                    scatter_col_block(&mut dk, &dkh, hd * dh);
                    scatter_col_block(&mut dv, &dvh, hd * dh);
                }
                grads.accum(q.0, dq);
                grads.accum(k.0, dk);
                grads.accum(v.0, dv);
            })),
        );
        (var, logits)
    }

    /// Transpose a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = Tensor::zeros(&[c, r]);
        {
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[j * r + i] = av.data()[i * c + j];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |dout, grads| {
                let mut g = Tensor::zeros(&[r, c]);
                {
                    let gd = g.data_mut();
                    for i in 0..c {
                        for j in 0..r {
                            gd[j * c + i] = dout.data()[i * r + j];
                        }
                    }
                }
                grads.accum(a.0, g);
            })),
        )
    }

    /// Stack 1-D vectors (equal length) into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let dim = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.numel(), dim, "stack_rows length mismatch");
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(&[rows.len(), dim], data);
        let rows = rows.to_vec();
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                for (i, r) in rows.iter().enumerate() {
                    let g = Tensor::from_vec(&[dim], dout.data()[i * dim..(i + 1) * dim].to_vec());
                    grads.accum(r.0, g);
                }
            })),
        )
    }

    /// Add a constant tensor (not differentiated).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let value = self.value(a).add(c);
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(a.0, dout.clone());
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let (c, h, w) = dims3(&xv);
        let mut value = Tensor::zeros(&[c, 2 * h, 2 * w]);
        {
            let vd = value.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let s = xv.data()[ch * h * w + y * w + xx];
                        let base = ch * 4 * h * w;
                        vd[base + (2 * y) * 2 * w + 2 * xx] = s;
                        vd[base + (2 * y) * 2 * w + 2 * xx + 1] = s;
                        vd[base + (2 * y + 1) * 2 * w + 2 * xx] = s;
                        vd[base + (2 * y + 1) * 2 * w + 2 * xx + 1] = s;
                    }
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let dxd = dx.data_mut();
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let base = ch * 4 * h * w;
                                dxd[ch * h * w + y * w + xx] = dout.data()
                                    [base + (2 * y) * 2 * w + 2 * xx]
                                    + dout.data()[base + (2 * y) * 2 * w + 2 * xx + 1]
                                    + dout.data()[base + (2 * y + 1) * 2 * w + 2 * xx]
                                    + dout.data()[base + (2 * y + 1) * 2 * w + 2 * xx + 1];
                            }
                        }
                    }
                }
                grads.accum(x.0, dx);
            })),
        )
    }

    /// Global average pool `(C,H,W) -> (C,)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let (c, h, w) = dims3(&xv);
        let hw = (h * w) as f64;
        let mut value = vec![0.0; c];
        for ch in 0..c {
            value[ch] = xv.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw;
        }
        self.push(
            Tensor::from_vec(&[c], value),
            Some(Box::new(move |dout, grads| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let dxd = dx.data_mut();
                    for ch in 0..c {
                        let g = dout.data()[ch] / hw;
                        for p in &mut dxd[ch * h * w..(ch + 1) * h * w] {
                            *p = g;
                        }
                    }
                }
                grads.accum(x.0, dx);
            })),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (c1, h, w) = dims3(&av);
        let (c2, h2, w2) = dims3(&bv);
        assert_eq!((h, w), (h2, w2), "concat spatial mismatch");
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        self.push(
            Tensor::from_vec(&[c1 + c2, h, w], data),
            Some(Box::new(move |dout, grads| {
                let split = c1 * h * w;
                grads.accum(
                    a.0,
                    Tensor::from_vec(&[c1, h, w], dout.data()[..split].to_vec()),
                );
                grads.accum(
                    b.0,
                    Tensor::from_vec(&[c2, h, w], dout.data()[split..].to_vec()),
                );
            })),
        )
    }

    /// Broadcast-add a per-channel vector to a `(C,H,W)` grid.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x).clone();
        let vv = self.value(v).clone();
        let (c, h, w) = dims3(&xv);
        assert_eq!(vv.numel(), c, "channel vec length");
        let mut value = xv.clone();
        {
            let vd = value.data_mut();
            for ch in 0..c {
                let add = vv.data()[ch];
                for p in &mut vd[ch * h * w..(ch + 1) * h * w] {
                    *p += add;
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |dout, grads| {
                grads.accum(x.0, dout.clone());
                let mut dv = vec![0.0; c];
                for ch in 0..c {
                    dv[ch] = dout.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                grads.accum(v.0, Tensor::from_vec(&[c], dv));
            })),
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected 3-D tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn softmax_rows_inplace(m: &mut Tensor, cols: usize) {
    let rows = m.numel() / cols;
    let d = m.data_mut();
    for i in 0..rows {
        let row = &mut d[i * cols..(i + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
}

fn col_block(m: &Tensor, from: usize, width: usize) -> Tensor {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&m.data()[i * cols + from..i * cols + from + width]);
    }
    Tensor::from_vec(&[rows, width], out)
}

fn scatter_col_block(dst: &mut Tensor, src: &Tensor, from: usize) {
    let cols = dst.shape()[1];
    let width = src.shape()[1];
    let rows = src.shape()[0];
    let dd = dst.data_mut();
    for i in 0..rows {
        for j in 0..width {
            dd[i * cols + from + j] += src.data()[i * width + j];
        }
    }
}

pub(crate) fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (cin, h, w) = dims3(x);
    let k = cin * kh * kw;
    let l = ho * wo;
    let mut col = vec![0.0; k * l];
    let xd = x.data();
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..ho {
                    let iy = oy * stride + i;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + j;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        col[row * l + oy * wo + ox] = xd[c * h * w + iy * w + (ix - pad)];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[k, l], col)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Tensor,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let l = ho * wo;
    let mut dx = Tensor::zeros(&[cin, h, w]);
    let dd = dx.data_mut();
    let cd = dcol.data();
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..ho {
                    let iy = oy * stride + i;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + j;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        dd[c * h * w + iy * w + (ix - pad)] += cd[row * l + oy * wo + ox];
                    }
                }
            }
        }
    }
    dx
}

fn dw3x3_forward(x: &[f64], w: &[f64], out: &mut [f64], c: usize, h: usize, win: usize) {
    for ch in 0..c {
        let xo = ch * h * win;
        let wo_ = ch * 9;
        for y in 0..h {
            for xx in 0..win {
                let mut acc = 0.0;
                for i in 0..3 {
                    let iy = y + i;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for j in 0..3 {
                        let ix = xx + j;
                        if ix < 1 || ix > win {
                            continue;
                        }
                        acc += x[xo + iy * win + (ix - 1)] * w[wo_ + i * 3 + j];
                    }
                }
                out[xo + y * win + xx] = acc;
            }
        }
    }
}

fn dw3x3_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    win: usize,
) {
    for ch in 0..c {
        let xo = ch * h * win;
        let wo_ = ch * 9;
        for y in 0..h {
            for xx in 0..win {
                let g = dout[xo + y * win + xx];
                if g == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    let iy = y + i;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for j in 0..3 {
                        let ix = xx + j;
                        if ix < 1 || ix > win {
                            continue;
                        }
                        dw[wo_ + i * 3 + j] += x[xo + iy * win + (ix - 1)] * g;
                        dx[xo + iy * win + (ix - 1)] += w[wo_ + i * 3 + j] * g;
                    }
                }
            }
        }
    }
}
