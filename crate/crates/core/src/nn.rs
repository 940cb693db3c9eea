//! Named parameter storage, layer helpers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named `f32` parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(&p) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    /// Registers every parameter in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for every bound parameter (missing ones are zero).
    pub fn gradients(&self, grads: &mut Gradients<f32>, store: &ParamStore) -> GradMap {
        let mut out = BTreeMap::new();
        for (k, &v) in &self.vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(store.get(k).expect("bound param").shape()));
            out.insert(k.clone(), g);
        }
        GradMap(out)
    }

    /// 2-d convolution using `{name}.weight` and `{name}.bias`.
    pub fn conv2d(
        &self,
        g: &mut Graph<f32>,
        name: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.try_var(&format!("{name}.bias"));
        g.conv2d(x, w, b, stride, pad)
    }

    pub fn conv3d(&self, g: &mut Graph<f32>, name: &str, x: Var, pad: [usize; 3]) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.try_var(&format!("{name}.bias"));
        g.conv3d(x, w, b, pad)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradMap(pub BTreeMap<String, Tensor<f32>>);

impl GradMap {
    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .map(|t| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for t in self.0.values_mut() {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.values().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Deterministic parameter initialisation.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal conv weights `[out, in, kh, kw]` and zero bias.
    pub fn conv2d(&mut self, store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize) {
        self.conv_nd(store, name, &[out, inp, k, k]);
    }

    pub fn conv3d(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        out: usize,
        inp: usize,
        kernel: [usize; 3],
    ) {
        self.conv_nd(store, name, &[out, inp, kernel[0], kernel[1], kernel[2]]);
    }

    fn conv_nd(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        store.insert(format!("{name}.weight"), Tensor::from_vec(shape, w).unwrap());
        store.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
    }

    /// Conv layer with all-zero weights and bias.
    pub fn conv2d_zero(&mut self, store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize) {
        store.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp, k, k]));
        store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.random_range(lo..hi)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.0 {
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            if self.lr == 0.0 {
                continue;
            }
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= (self.lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}
