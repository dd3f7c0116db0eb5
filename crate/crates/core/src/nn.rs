//! Parameter storage and thin layer helpers over the autodiff tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named, ordered parameter set. Registration order is the canonical order
/// for optimizers and gradient reduction, so runs stay deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let idx = self.tensors.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[*idx]
    }

    pub fn get_idx(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn set_idx(&mut self, idx: usize, t: Tensor) {
        assert!(self.tensors[idx].same_shape(&t), "param shape change");
        self.tensors[idx] = t;
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let idx = self.index[name];
        self.set_idx(idx, t);
    }

    pub fn name_of(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Binds store parameters to tape variables on demand and remembers the
/// binding so gradients can be read back by parameter index.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<(usize, Var)>,
    cache: HashMap<usize, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: Vec::new(),
            cache: HashMap::new(),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::inference(),
            store,
            bound: Vec::new(),
            cache: HashMap::new(),
        }
    }

    /// Bind (or fetch the already-bound) parameter by name.
    pub fn p(&mut self, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.cache.get(&idx) {
            return *v;
        }
        let v = self.tape.input(self.store.get_idx(idx).clone());
        self.cache.insert(idx, v);
        self.bound.push((idx, v));
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every bound parameter, as (store index, grad) in
    /// deterministic store order. Parameters not touched by the loss get a
    /// zero gradient.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = self
            .bound
            .iter()
            .map(|&(idx, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get_idx(idx).shape()));
                (idx, g)
            })
            .collect();
        out.sort_by_key(|(idx, _)| *idx);
        out
    }
}

// ---- initializers ----

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

pub fn conv_init(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng)
}

pub fn linear_init(dout: usize, din: usize, rng: &mut impl Rng) -> Tensor {
    kaiming_uniform(&[dout, din], din, rng)
}

/// Largest divisor of `channels` that is at most `cap`; used for GroupNorm
/// group counts so any channel width normalizes cleanly.
pub fn norm_groups(channels: usize, cap: usize) -> usize {
    let cap = cap.min(channels);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

// ---- layer descriptors ----
//
// Layers own their parameter names, not the tensors; `init` registers the
// tensors into a store and `fwd` binds them through a Ctx.

#[derive(Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2dLayer {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.register(
            &format!("{}.w", self.name),
            conv_init(self.cout, self.cin, self.k, rng),
        );
        store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    /// Register with zero weights; used for control-branch projections and
    /// the final output conv so conditioning starts silent.
    pub fn init_zero(&self, store: &mut ParamStore, _rng: &mut impl Rng) {
        store.register(
            &format!("{}.w", self.name),
            Tensor::zeros(&[self.cout, self.cin, self.k, self.k]),
        );
        store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn fwd(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&format!("{}.w", self.name));
        let b = cx.p(&format!("{}.b", self.name));
        cx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        LinearLayer {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.register(
            &format!("{}.w", self.name),
            linear_init(self.dout, self.din, rng),
        );
        store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn init_zero(&self, store: &mut ParamStore, _rng: &mut impl Rng) {
        store.register(
            &format!("{}.w", self.name),
            Tensor::zeros(&[self.dout, self.din]),
        );
        store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn fwd(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&format!("{}.w", self.name));
        let b = cx.p(&format!("{}.b", self.name));
        cx.tape.linear(x, w, Some(b))
    }

    /// Forward without bias binding (weight only).
    pub fn fwd_no_bias(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(&format!("{}.w", self.name));
        cx.tape.linear(x, w, None)
    }
}

#[derive(Clone)]
pub struct GroupNormLayer {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        GroupNormLayer {
            name: name.into(),
            channels,
            groups: norm_groups(channels, 8),
        }
    }

    pub fn init(&self, store: &mut ParamStore, _rng: &mut impl Rng) {
        store.register(
            &format!("{}.g", self.name),
            Tensor::filled(&[self.channels], 1.0),
        );
        store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn fwd(&self, cx: &mut Ctx, x: Var) -> Var {
        let g = cx.p(&format!("{}.g", self.name));
        let b = cx.p(&format!("{}.b", self.name));
        cx.tape.groupnorm(x, g, b, self.groups)
    }
}

/// Small strided conv encoder: three stride-2 convs, global average pool,
/// two-layer head. Used for the identity encoder and both evaluation oracles
/// (with different widths so architectures stay distinct).
#[derive(Clone)]
pub struct SmallEncoder {
    pub prefix: String,
    pub widths: [usize; 3],
    pub hidden: usize,
    pub out_dim: usize,
    convs: Vec<Conv2dLayer>,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

impl SmallEncoder {
    pub fn new(prefix: &str, in_ch: usize, widths: [usize; 3], hidden: usize, out_dim: usize) -> Self {
        let convs = vec![
            Conv2dLayer::new(format!("{prefix}.conv0"), in_ch, widths[0], 3, 2),
            Conv2dLayer::new(format!("{prefix}.conv1"), widths[0], widths[1], 3, 2),
            Conv2dLayer::new(format!("{prefix}.conv2"), widths[1], widths[2], 3, 2),
        ];
        let fc1 = LinearLayer::new(format!("{prefix}.fc1"), widths[2], hidden);
        let fc2 = LinearLayer::new(format!("{prefix}.fc2"), hidden, out_dim);
        SmallEncoder {
            prefix: prefix.to_string(),
            widths,
            hidden,
            out_dim,
            convs,
            fc1,
            fc2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    /// Raw head output `[out_dim]` (callers normalize or squash).
    pub fn fwd(&self, cx: &mut Ctx, img: Var) -> Var {
        let mut h = img;
        for c in &self.convs {
            h = c.fwd(cx, h);
            h = cx.tape.silu(h);
        }
        let pooled = cx.tape.global_avg_pool(h);
        let n = cx.tape.value(pooled).numel();
        let row = cx.tape.reshape(pooled, &[1, n]);
        let h = self.fc1.fwd(cx, row);
        let h = cx.tape.silu(h);
        let out = self.fc2.fwd(cx, h);
        let m = cx.tape.value(out).numel();
        cx.tape.reshape(out, &[m])
    }
}

/// AdamW with decoupled weight decay over a parameter store.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..store.len())
                .map(|i| Tensor::zeros(store.get_idx(i).shape()))
                .collect(),
            v: (0..store.len())
                .map(|i| Tensor::zeros(store.get_idx(i).shape()))
                .collect(),
        }
    }

    /// Apply one update. `grads` maps store index -> gradient; indices absent
    /// from the map are skipped (frozen or untouched parameters).
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, g) in grads {
            let m = &mut self.m[*idx];
            let v = &mut self.v[*idx];
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                    vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                }
            }
            let mut p = store.get_idx(*idx).clone();
            {
                let pd = p.data_mut();
                for i in 0..pd.len() {
                    let mhat = m.data()[i] / bc1;
                    let vhat = v.data()[i] / bc2;
                    pd[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps)
                        + self.weight_decay * pd[i]);
                }
            }
            store.set_idx(*idx, p);
        }
    }

    pub fn state_tensors(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(
                "optimizer state length mismatch".to_string(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_groups_divides() {
        for c in [1, 3, 5, 8, 12, 16, 24, 32, 48, 100] {
            let g = norm_groups(c, 8);
            assert_eq!(c % g, 0);
            assert!(g <= 8.min(c));
        }
    }

    #[test]
    fn adamw_reduces_quadratic() {
        // Minimize mean((x - 3)^2) over a single parameter vector.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.register("x", Tensor::randn(&[4], &mut rng));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..500 {
            let x = store.get("x").clone();
            let g = x.map(|v| 2.0 * (v - 3.0) / 4.0);
            opt.apply(&mut store, &[(0, g)]);
        }
        for &v in store.get("x").data() {
            assert!((v - 3.0).abs() < 1e-3, "got {v}");
        }
    }

    #[test]
    fn ctx_binds_once_and_reports_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.register("w", Tensor::randn(&[2, 3], &mut rng));
        let mut cx = Ctx::new(&store);
        let w1 = cx.p("w");
        let w2 = cx.p("w");
        assert_eq!(w1, w2);
        let x = cx.tape.input(Tensor::randn(&[4, 3], &mut rng));
        let y = cx.tape.linear(x, w1, None);
        let loss = cx.tape.mean_all(y);
        let grads = cx.tape.backward(loss);
        let pg = cx.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.shape(), &[2, 3]);
    }
}
