//! Minimal dense layers with explicit backward passes. Activations are
//! `rows x features` matrices; parameters live in a [`ParamStore`] and
//! gradients accumulate into a parallel [`Grads`].

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

pub type ParamId = usize;

/// Named parameter matrices in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut at = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[at];
                at += 1;
            }
        }
    }
}

/// Gradients, one matrix per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Mat>);

impl Grads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.0 {
            out.extend(g.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self::with_init(store, name, normal_matrix(rng, din, dout, std), Mat::zeros((1, dout)))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, w: Mat, b: Mat) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> Mat {
        x.dot(p.get(self.w)) + p.get(self.b)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Mat, dy: &Mat) -> Mat {
        g.0[self.w] += &x.t().dot(dy);
        g.0[self.b] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&p.get(self.w).t())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Mat,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, d))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.clone().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &rstd.clone().insert_axis(Axis(1));
        let y = &xhat * p.get(self.gamma) + p.get(self.beta);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &LayerNormCache, dy: &Mat) -> Mat {
        g.0[self.gamma] += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.0[self.beta] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * p.get(self.gamma);
        let d = dy.ncols() as f64;
        let m1 = (dxhat.sum_axis(Axis(1)) / d).insert_axis(Axis(1));
        let m2 = ((&dxhat * &c.xhat).sum_axis(Axis(1)) / d).insert_axis(Axis(1));
        (dxhat - &m1 - &(&c.xhat * &m2)) * &c.rstd.clone().insert_axis(Axis(1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *o *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    });
    out
}

fn softmax_rows(s: &mut Mat) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    merged: Mat,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    /// `queries` attend to `context`.
    pub fn forward(&self, p: &ParamStore, queries: &Mat, context: &Mat) -> (Mat, AttentionCache) {
        let q = self.q.forward(p, queries);
        let k = self.k.forward(p, context);
        let v = self.v.forward(p, context);
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = Mat::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut sc);
            merged.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let y = self.out.forward(p, &merged);
        (
            y,
            AttentionCache {
                q,
                k,
                v,
                probs,
                merged,
            },
        )
    }

    /// Returns gradients for the queries and the context.
    pub fn backward(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        c: &AttentionCache,
        queries: &Mat,
        context: &Mat,
        dy: &Mat,
    ) -> (Mat, Mat) {
        let d_merged = self.out.backward(p, g, &c.merged, dy);
        let d = c.q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(c.q.raw_dim());
        let mut dk = Mat::zeros(c.k.raw_dim());
        let mut dv = Mat::zeros(c.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let pr = &c.probs[h];
            let d_o = d_merged.slice(cols);
            dv.slice_mut(cols).assign(&pr.t().dot(&d_o));
            let dp = d_o.dot(&c.v.slice(cols).t());
            let row_dot = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * pr * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dx_q = self.q.backward(p, g, queries, &dq);
        let dx_c = self.k.backward(p, g, context, &dk) + self.v.backward(p, g, context, &dv);
        (dx_q, dx_c)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, MlpCache) {
        let pre = self.fc1.forward(p, x);
        let act = gelu(&pre);
        (self.fc2.forward(p, &act), MlpCache { pre, act })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &MlpCache, x: &Mat, dy: &Mat) -> Mat {
        let d_act = self.fc2.backward(p, g, &c.act, dy);
        let d_pre = gelu_backward(&c.pre, &d_act);
        self.fc1.backward(p, g, x, &d_pre)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

pub struct EncoderCache {
    ln1: LayerNormCache,
    h1: Mat,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Mat,
    mlp: MlpCache,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, EncoderCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, &h1, &h1);
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(p, &x2);
        let (m, mlp) = self.mlp.forward(p, &h2);
        let y = &x2 + &m;
        (
            y,
            EncoderCache {
                ln1,
                h1,
                attn,
                ln2,
                h2,
                mlp,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &EncoderCache, dy: &Mat) -> Mat {
        let dh2 = self.mlp.backward(p, g, &c.mlp, &c.h2, dy);
        let dx2 = dy + &self.ln2.backward(p, g, &c.ln2, &dh2);
        let (dq, dk) = self.attn.backward(p, g, &c.attn, &c.h1, &c.h1, &dx2);
        &dx2 + &self.ln1.backward(p, g, &c.ln1, &(dq + dk))
    }
}

/// Pre-norm block: self-attention over queries, cross-attention to image
/// tokens, then an MLP.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

pub struct DecoderCache {
    ln1: LayerNormCache,
    h1: Mat,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Mat,
    cross_attn: AttentionCache,
    ln3: LayerNormCache,
    h3: Mat,
    mlp: MlpCache,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat, memory: &Mat) -> (Mat, DecoderCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, self_attn) = self.self_attn.forward(p, &h1, &h1);
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(p, &x2);
        let (b, cross_attn) = self.cross_attn.forward(p, &h2, memory);
        let x3 = &x2 + &b;
        let (h3, ln3) = self.ln3.forward(p, &x3);
        let (m, mlp) = self.mlp.forward(p, &h3);
        (
            &x3 + &m,
            DecoderCache {
                ln1,
                h1,
                self_attn,
                ln2,
                h2,
                cross_attn,
                ln3,
                h3,
                mlp,
            },
        )
    }

    /// Returns gradients for the queries and the memory.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &DecoderCache, memory: &Mat, dy: &Mat) -> (Mat, Mat) {
        let dh3 = self.mlp.backward(p, g, &c.mlp, &c.h3, dy);
        let dx3 = dy + &self.ln3.backward(p, g, &c.ln3, &dh3);
        let (dh2, d_mem) = self.cross_attn.backward(p, g, &c.cross_attn, &c.h2, memory, &dx3);
        let dx2 = &dx3 + &self.ln2.backward(p, g, &c.ln2, &dh2);
        let (dq, dk) = self.self_attn.backward(p, g, &c.self_attn, &c.h1, &c.h1, &dx2);
        let dx = &dx2 + &self.ln1.backward(p, g, &c.ln1, &(dq + dk));
        (dx, d_mem)
    }
}
