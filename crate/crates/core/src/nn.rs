//! Parameter storage, layers and the optimizer used by the labeler.

use ndarray::Array2;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Grads, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Parameter gradients in store order; unreached parameters get zeros.
    pub fn gradients(&self, grads: &Grads, store: &ParamStore) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect()
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(fan_in, fan_out, bound, rng));
        let b = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        tape.add_row(y, p.var(self.b))
    }

    pub fn apply(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(store.get(self.w)) + store.get(self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, dim)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, dim)));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Self-attention followed by a feed-forward block, each wrapped in a
/// residual connection and layer normalization.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "channels must divide evenly into heads");
        let bound = 1.0 / (dim as f64).sqrt();
        let wq = store.add(format!("{name}.wq"), uniform(dim, dim, bound, rng));
        let wk = store.add(format!("{name}.wk"), uniform(dim, dim, bound, rng));
        let wv = store.add(format!("{name}.wv"), uniform(dim, dim, bound, rng));
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let ffn1 = Linear::new(store, &format!("{name}.ffn1"), dim, hidden, rng);
        let ffn2 = Linear::new(store, &format!("{name}.ffn2"), hidden, dim, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        Self {
            wq,
            wk,
            wv,
            heads,
            norm1,
            ffn1,
            ffn2,
            norm2,
        }
    }

    /// Attention output before the residual path, one softmax per head.
    pub fn attend(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let q = tape.matmul(x, p.var(self.wq));
        let k = tape.matmul(x, p.var(self.wk));
        let v = tape.matmul(x, p.var(self.wv));
        let dim = tape.value(q).ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let r = (h * dh, (h + 1) * dh);
                (tape.cols(q, r.0, r.1), tape.cols(k, r.0, r.1), tape.cols(v, r.0, r.1))
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let att = self.attend(tape, p, x);
        let x1 = tape.add(x, att);
        let x1 = self.norm1.forward(tape, p, x1);
        let h = self.ffn1.forward(tape, p, x1);
        let h = tape.relu(h);
        let f = self.ffn2.forward(tape, p, h);
        let x2 = tape.add(x1, f);
        self.norm2.forward(tape, p, x2)
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: store.values().iter().map(|v| Array2::zeros(v.dim())).collect(),
            v: store.values().iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(id) * 2.0;
            opt.update(&mut store, &[g], 0.05);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![array![[3.0, 4.0]]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1e-6) > 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
