use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BufferUpdate, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Dropout and batch norm behave differently in the two modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, read-only parameters, the mode and a
/// seeded generator for dropout masks and reparameterization noise.
pub struct Ctx<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    cache: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    updates: Vec<BufferUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Ctx {
            graph: Graph::new(),
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: HashMap::new(),
            frozen: HashSet::new(),
            updates: Vec::new(),
        }
    }

    /// Treats `ids` as constants: later [`Ctx::param`] calls return nodes
    /// without gradient and batch-norm buffers of frozen layers stay fixed.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Tape node for a stored parameter; repeated calls share the node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let v = if self.frozen.contains(&id) {
            self.graph.input(self.params.get(id))
        } else {
            self.graph.param(id, self.params.get(id))
        };
        self.cache.insert(id, v);
        v
    }

    /// Parameter value as a constant (no gradient).
    pub fn constant_param(&mut self, id: ParamId) -> Var {
        self.graph.input(self.params.get(id))
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.graph.input(t)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.graph.leaf(t)
    }

    /// Reparameterized Gaussian sample using this context's generator.
    pub fn reparam(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let n = self.graph.value(mu).len();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        self.graph.reparam(mu, logvar, eps)
    }

    pub fn finish(self) -> (Graph, Vec<BufferUpdate>) {
        (self.graph, self.updates)
    }
}

/// Backpropagates `loss` and adds the gradient of every parameter node in
/// `graph` to the matching tensor in `store`.
pub fn accumulate_grads(graph: &Graph, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = graph.backward(loss)?;
    for (id, v) in graph.param_nodes() {
        if let Some(g) = grads.wrt(v) {
            store.get_mut(id).accumulate_grad(g)?;
        }
    }
    Ok(())
}

/// `mu + exp(logvar/2) ⊙ ε` with ε drawn from a generator seeded by `seed`.
pub fn reparam_sample(g: &mut Graph, mu: Var, logvar: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(mu).len();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    g.reparam(mu, logvar, eps)
}

/// A layer: a forward rule over parameters held in a [`ParamStore`].
pub trait Module: Send + Sync {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var>;

    /// Trainable parameters owned by this module.
    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (fin as f64).sqrt();
        let weight = ps.register(
            &format!("{name}.weight"),
            uniform_tensor(&[fout, fin], bound, rng),
            true,
        )?;
        let bias = ps.register(&format!("{name}.bias"), uniform_tensor(&[fout], bound, rng), true)?;
        Ok(Linear {
            weight,
            bias,
            fin,
            fout,
        })
    }
}

impl Module for Linear {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.graph.linear(x, w, Some(b))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Strided 1-D convolution; padding is fixed at construction.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let weight = ps.register(
            &format!("{name}.weight"),
            uniform_tensor(&[cout, cin, kernel], bound, rng),
            true,
        )?;
        let bias = ps.register(&format!("{name}.bias"), uniform_tensor(&[cout], bound, rng), true)?;
        Ok(Conv1d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Output length for an input of `len` samples.
    pub fn out_len(&self, ps: &ParamStore, len: usize) -> usize {
        let k = ps.get(self.weight).shape()[2];
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

impl Module for Conv1d {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.graph.conv1d(x, w, Some(b), self.stride, self.pad)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cout * kernel) as f64).sqrt();
        let weight = ps.register(
            &format!("{name}.weight"),
            uniform_tensor(&[cin, cout, kernel], bound, rng),
            true,
        )?;
        let bias = ps.register(&format!("{name}.bias"), uniform_tensor(&[cout], bound, rng), true)?;
        Ok(ConvTranspose1d {
            weight,
            bias,
            stride,
            pad,
            out_pad,
        })
    }
}

impl Module for ConvTranspose1d {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.graph
            .conv_transpose1d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Batch normalization over the channel axis of `[B, C]` or `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: ps.register(&format!("{name}.gamma"), Tensor::filled([channels], 1.0), true)?,
            beta: ps.register(&format!("{name}.beta"), Tensor::zeros([channels]), true)?,
            running_mean: ps.register(&format!("{name}.running_mean"), Tensor::zeros([channels]), false)?,
            running_var: ps.register(&format!("{name}.running_var"), Tensor::filled([channels], 1.0), false)?,
            momentum: Self::MOMENTUM,
            eps: 1e-5,
        })
    }
}

impl Module for BatchNorm {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Eval => {
                let ps = cx.params;
                let stats = (ps.get(self.running_mean).data(), ps.get(self.running_var).data());
                let (y, _, _) = cx.graph.batch_norm(x, gamma, beta, self.eps, Some(stats))?;
                Ok(y)
            }
            Mode::Train => {
                let (y, mean, var) = cx.graph.batch_norm(x, gamma, beta, self.eps, None)?;
                let shape = cx.graph.shape(x);
                let n = shape[0] * shape[2..].iter().product::<usize>();
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = cx.params.get(self.running_mean).data();
                let rv = cx.params.get(self.running_var).data();
                let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect();
                if cx.is_frozen(self.gamma) {
                    return Ok(y);
                }
                cx.updates.push(BufferUpdate {
                    id: self.running_mean,
                    value: new_mean,
                });
                cx.updates.push(BufferUpdate {
                    id: self.running_var,
                    value: new_var,
                });
                Ok(y)
            }
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Inverted dropout; identity in evaluation mode.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub const DEFAULT_P: f64 = 0.1;

    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout { p })
    }
}

impl Module for Dropout {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        if cx.mode == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let n = cx.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if cx.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        cx.graph.dropout_mask(x, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Gelu,
}

impl Module for Activation {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(match *self {
            Activation::Relu => cx.graph.relu(x),
            Activation::LeakyRelu(s) => cx.graph.leaky_relu(x, s),
            Activation::Gelu => cx.graph.gelu(x),
        })
    }
}

/// Reshapes the non-batch axes.
#[derive(Clone, Debug)]
pub struct Reshape(pub Vec<usize>);

impl Module for Reshape {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let batch = cx.graph.shape(x)[0];
        let mut shape = vec![batch];
        shape.extend(&self.0);
        cx.graph.reshape(x, &shape)
    }
}

/// Keeps `[start, start + len)` of the last axis.
#[derive(Clone, Debug)]
pub struct Crop {
    pub start: usize,
    pub len: usize,
}

impl Module for Crop {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        cx.graph.slice_last(x, self.start, self.len)
    }
}

/// Modules applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Module>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: impl Module + 'static) {
        self.layers.push(Box::new(m));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Module for Sequential {
    fn forward(&self, cx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(cx, x)?;
        }
        Ok(x)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn dropout_eval_is_identity() {
        let ps = ParamStore::new();
        let mut cx = Ctx::new(&ps, Mode::Eval, 0);
        let x = cx.input(&Tensor::filled([4, 8], 2.0));
        let d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&mut cx, x).unwrap(), x);
    }

    #[test]
    fn dropout_train_zeroes_and_rescales() {
        let ps = ParamStore::new();
        let mut cx = Ctx::new(&ps, Mode::Train, 3);
        let x = cx.input(&Tensor::filled([1, 1000], 1.0));
        let y = Dropout::new(0.1).unwrap().forward(&mut cx, x).unwrap();
        let v = cx.graph.value(y);
        assert!(v.iter().all(|&a| a == 0.0 || (a - 1.0 / 0.9).abs() < 1e-15));
        let zeros = v.iter().filter(|&&a| a == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros}");
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2).unwrap();
        ps.get_mut(bn.running_mean).data_mut().copy_from_slice(&[1.0, -1.0]);
        ps.get_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 1.0]);
        let x = Tensor::new([1, 2, 2], vec![3.0, 5.0, 0.0, 1.0]).unwrap();
        let run = |ps: &ParamStore| {
            let mut cx = Ctx::new(ps, Mode::Eval, 0);
            let xv = cx.input(&x);
            let y = bn.forward(&mut cx, xv).unwrap();
            cx.graph.value(y).to_vec()
        };
        let a = run(&ps);
        assert_eq!(a, run(&ps));
        let s = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert!((a[0] - 2.0 * s).abs() < 1e-12);
        assert!((a[3] - 2.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1).unwrap();
        let x = Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut cx = Ctx::new(&ps, Mode::Train, 0);
        let xv = cx.input(&x);
        let y = bn.forward(&mut cx, xv).unwrap();
        let mean: f64 = cx.graph.value(y).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let (_, updates) = cx.finish();
        ps.apply_buffer_updates(updates);
        assert!((ps.get(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        let expect = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((ps.get(bn.running_var).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_gradient_or_buffer_updates() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut ps, "lin", 2, 1, &mut rng).unwrap();
        let bn = BatchNorm::new(&mut ps, "bn", 1).unwrap();
        let mut cx = Ctx::new(&ps, Mode::Train, 0);
        cx.freeze(lin.param_ids().into_iter().chain(bn.param_ids()));
        let x = cx.leaf(&Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        let h = lin.forward(&mut cx, x).unwrap();
        let y = bn.forward(&mut cx, h).unwrap();
        let y = cx.graph.square(y);
        let loss = cx.graph.sum(y);
        let (graph, updates) = cx.finish();
        assert!(updates.is_empty());
        assert_eq!(graph.param_nodes().count(), 0);
        assert!(graph.backward(loss).unwrap().wrt(x).is_some());
    }

    #[test]
    fn reparam_deterministic_and_degenerate() {
        let mut g = Graph::new();
        let mu = g.input(&Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let lv = g.input(&Tensor::filled([3], -60.0));
        let a = reparam_sample(&mut g, mu, lv, 11).unwrap();
        let b = reparam_sample(&mut g, mu, lv, 11).unwrap();
        assert_eq!(g.value(a), g.value(b));
        for (x, m) in g.value(a).iter().zip([1.0, -2.0, 0.5]) {
            assert!((x - m).abs() < 1e-10);
        }
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        let n = 10_000;
        let mut g = Graph::new();
        let mu = g.input(&Tensor::filled([n], 1.5));
        let lv = g.input(&Tensor::filled([n], 0.0));
        let z = reparam_sample(&mut g, mu, lv, 5).unwrap();
        let mean = g.value(z).iter().sum::<f64>() / n as f64;
        // standard error 1/100; 3 sigma
        assert!((mean - 1.5).abs() < 3.0 / 100.0, "{mean}");
    }

    #[test]
    fn reparam_gradients_flow() {
        let mut g = Graph::new();
        let mu = g.leaf(&Tensor::filled([2], 0.0));
        let lv = g.leaf(&Tensor::filled([2], 0.0));
        let z = reparam_sample(&mut g, mu, lv, 1).unwrap();
        let loss = g.sum(z);
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.wrt(mu).unwrap(), &[1.0, 1.0]);
        assert!(gr.wrt(lv).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sequential_collects_params() {
        let mut ps = ParamStore::new();
        let mut r = rng();
        let mut s = Sequential::new();
        s.push(Linear::new(&mut ps, "a", 3, 4, &mut r).unwrap());
        s.push(Activation::Gelu);
        s.push(Linear::new(&mut ps, "b", 4, 2, &mut r).unwrap());
        assert_eq!(s.param_ids().len(), 4);
        let mut cx = Ctx::new(&ps, Mode::Eval, 0);
        let x = cx.input(&Tensor::zeros([5, 3]));
        let y = s.forward(&mut cx, x).unwrap();
        assert_eq!(cx.graph.shape(y), &[5, 2]);
    }
}
