//! Named parameter storage and the small layer types built on it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Padding, Var};
use crate::tensor::{Real, Tensor};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on the graph as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.variable(t.clone())).collect() }
    }
}

/// Graph variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables that already hold the store's tensors, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer that registers parameters under a name prefix.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// `U(-bound, bound)` with `bound = 1 / sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..bound)));
        self.store.add(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let t = Tensor::full(shape, T::c(value));
        self.store.add(self.full_name(name), t)
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, bias: bool) -> Conv {
        self.scope(name, |b| {
            let fan_in = k * k * cin;
            let weight = b.uniform("weight", &[fan_in, cout], fan_in);
            let bias = bias.then(|| b.uniform("bias", &[cout], fan_in));
            Conv { weight, bias, k, cin, cout }
        })
    }

    /// Convolution whose weight and bias start at zero.
    pub fn zero_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, bias: bool) -> Conv {
        self.scope(name, |b| {
            let weight = b.constant("weight", &[k * k * cin, cout], 0.0);
            let bias = bias.then(|| b.constant("bias", &[cout], 0.0));
            Conv { weight, bias, k, cin, cout }
        })
    }

    pub fn depthwise(&mut self, name: &str, k: usize, channels: usize) -> DepthwiseConv {
        self.scope(name, |b| DepthwiseConv { weight: b.uniform("weight", &[k * k, channels], k * k), k })
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> LayerNorm {
        self.scope(name, |b| LayerNorm { weight: b.constant("weight", &[channels], 1.0) })
    }
}

/// Same-size convolution over an `[H, W, cin]` map; `k = 1` is a per-pixel
/// linear map and also accepts `[N, cin]` token matrices.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = p.var(self.weight);
        let y = if self.k == 1 { g.linear(x, w) } else { g.conv2d(x, w, self.k, Padding::Reflect) };
        match self.bias {
            Some(b) => g.add_cols(y, p.var(b)),
            None => y,
        }
    }

    pub fn numel(&self) -> usize {
        self.k * self.k * self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.depthwise_conv2d(x, p.var(self.weight), self.k)
    }
}

/// Channel layer normalization with a gain and no bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.weight), T::c(Self::EPS))
    }
}
