//! Named parameter storage, forward sessions and the basic layers built on them.
//!
//! Layers only hold ids into a [`ParamStore`]; the same layer value therefore
//! runs against an `f32` store for training and an `f64` copy for gradient
//! checks.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Conv2dOptions, Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Learnable tensors and non-learnable buffers, each keyed by a unique dotted name
/// and kept in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.check_fresh(&name)?;
        let (i, _) = self.params.insert_full(name, value);
        Ok(ParamId(i))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.check_fresh(&name)?;
        let (i, _) = self.buffers.insert_full(name, value);
        Ok(BufferId(i))
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers.get_index_of(name).map(BufferId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites a named param or buffer; shapes must agree.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(s) => s,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown tensor {name}")))?,
        };
        if slot.shape() != value.shape() {
            return Err(Error::shapes("assign", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced during a training forward, applied to the
/// running buffers once the step is done.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Element> StatUpdate<T> {
    /// Exponential running average; the variance update uses the unbiased estimate.
    pub fn apply(&self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        let n = self.stats.count as f64;
        let unbias = T::of(n / (n - 1.0).max(1.0));
        for (r, &b) in store.buffer_mut(self.mean).data_mut().iter_mut().zip(&self.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.buffer_mut(self.var).data_mut().iter_mut().zip(&self.stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// One forward pass: a tape, a read-only parameter store and the params bound so far.
pub struct Session<'a, T: Element = f32> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    trainable: bool,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Element> Session<'a, T> {
    /// Parameters enter the tape as constants.
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.num_params()],
            mode,
            trainable: false,
            updates: Vec::new(),
        }
    }

    /// Parameters enter the tape as gradient-receiving leaves.
    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.param(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `v` for parameter `id` from now on, e.g. a perturbed copy under test.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.store.buffer(id)
    }

    pub fn push_update(&mut self, u: StatUpdate<T>) {
        self.updates.push(u);
    }

    pub fn take_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    /// Gradient for every parameter, zeros for those the loss did not reach.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.store
            .param_ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.get_or_zeros(v, self.store.param(id)),
                None => Tensor::zeros(self.store.param(id).shape().to_vec()),
            })
            .collect()
    }
}

/// Registers parameters under a dotted name prefix and draws their initial values.
pub struct Builder<'a, T: Element, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Element, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let n = self.full_name(name);
        self.store.add_param(n, value)
    }

    /// Replaces the initial value of an already registered parameter.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = self.store.param_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::shapes("set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let n = self.full_name(name);
        self.store.add_buffer(n, value)
    }

    /// Uniform in `±gain·sqrt(3 / fan_in)`, i.e. variance `gain² / fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..shape.iter().product()).map(|_| T::of(dist.sample(self.rng))).collect();
        self.param(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..shape.iter().product()).map(|_| T::of(dist.sample(self.rng))).collect();
        self.param(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape.to_vec()))
    }
}

/// Gain for weights feeding a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    /// `kernel` is `(kh, kw)`; weights are fan-in scaled with the given gain, bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let groups = opts.groups.max(1);
        if !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "conv {name}: channels {c_in}->{c_out} not divisible by {groups} groups"
            )));
        }
        let per_group = c_in / groups;
        let weight = b.uniform("weight", &[c_out, per_group, kernel.0, kernel.1], per_group * kernel.0 * kernel.1, gain)?;
        let bias = if bias { Some(b.zeros("bias", &[c_out])?) } else { None };
        Ok(Self { weight, bias, opts })
    }

    /// 1×1 convolution with bias.
    pub fn pointwise<T: Element, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        gain: f64,
    ) -> Result<Self> {
        Self::build(b, name, c_in, c_out, (1, 1), Conv2dOptions::default(), true, gain)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|id| s.param(id));
        s.tape.conv2d(x, w, b, self.opts)
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            gamma: b.ones("weight", &[c])?,
            beta: b.zeros("bias", &[c])?,
            running_mean: b.buffer("running_mean", Tensor::zeros([c]))?,
            running_var: b.buffer("running_var", Tensor::ones([c]))?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm_train(x, g, b, BN_EPS)?;
                s.push_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                let (m, v) = (store.buffer(self.running_mean).clone(), store.buffer(self.running_var).clone());
                s.tape.batch_norm_eval(x, g, b, m.data(), v.data(), BN_EPS)
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            gamma: b.ones("weight", &[d])?,
            beta: b.zeros("bias", &[d])?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Affine map over the trailing axis; weight stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Element, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            weight: b.uniform("weight", &[d_in, d_out], d_in, 1.0)?,
            bias: if bias { Some(b.zeros("bias", &[d_out])?) } else { None },
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(id) => {
                let b = s.param(id);
                s.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn build3x3<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            conv: Conv2d::build(&mut b, "conv", c_in, c_out, (3, 3), Conv2dOptions::default().padding(1), true, RELU_GAIN)?,
            bn: BatchNorm2d::build(&mut b, "bn", c_out)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }
}
