use super::conv::{self, Conv2dOptions};
use super::{elementwise, matmul, norm, pool, resample, shape, softmax};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu { x: Var, mask: Vec<u32> },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs { x: Var, sign: Vec<u32> },
    Clamp { x: Var, pass: Vec<u32> },
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOptions,
    },
    MaxPool { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Softmax { x: Var, axis: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => vec![*a, *b],
            Scale(x, _) | Offset(x) | Gelu(x) | Sigmoid(x) | Log(x) | Sum(x) | Mean(x)
            | GlobalAvgPool(x) | Upsample(x) | Reshape(x) => vec![*x],
            Relu { x, .. }
            | Abs { x, .. }
            | Clamp { x, .. }
            | MaxPool { x, .. }
            | Permute { x, .. }
            | Narrow { x, .. }
            | Softmax { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. }
            | BatchNormEval { x, gamma, beta, .. }
            | LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { xs, .. } => xs.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DecisionMode {
    Off,
    Record,
    Replay,
}

/// Branch choices of piecewise ops (ReLU sign, max-pool argmax, clamp range,
/// loss bounding boxes). Recording them at one point and replaying them at
/// nearby points evaluates the same smooth piece of the function, which is what
/// finite differences must compare against the analytic gradient.
struct Decisions {
    mode: DecisionMode,
    log: Vec<Vec<u32>>,
    cursor: usize,
    mismatches: usize,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    decisions: Decisions,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            decisions: Decisions {
                mode: DecisionMode::Off,
                log: Vec::new(),
                cursor: 0,
                mismatches: 0,
            },
        }
    }

    /// A tape that logs every piecewise branch decision.
    pub fn recording() -> Self {
        let mut t = Self::new();
        t.decisions.mode = DecisionMode::Record;
        t
    }

    /// A tape that reuses previously recorded branch decisions.
    pub fn replaying(log: Vec<Vec<u32>>) -> Self {
        let mut t = Self::new();
        t.decisions.mode = DecisionMode::Replay;
        t.decisions.log = log;
        t
    }

    pub fn take_decisions(&mut self) -> Vec<Vec<u32>> {
        std::mem::take(&mut self.decisions.log)
    }

    /// Decisions that differed from what a fresh evaluation would have chosen.
    pub fn decision_mismatches(&self) -> usize {
        self.decisions.mismatches
    }

    pub(crate) fn resolve(&mut self, op: &'static str, fresh: Vec<u32>) -> Result<Vec<u32>> {
        let d = &mut self.decisions;
        match d.mode {
            DecisionMode::Off => Ok(fresh),
            DecisionMode::Record => {
                d.log.push(fresh.clone());
                Ok(fresh)
            }
            DecisionMode::Replay => {
                let Some(recorded) = d.log.get(d.cursor) else {
                    return Err(Error::Contract(format!("{op}: decision log exhausted")));
                };
                if recorded.len() != fresh.len() {
                    return Err(Error::Contract(format!(
                        "{op}: replayed decision length {} != {}",
                        recorded.len(),
                        fresh.len()
                    )));
                }
                if *recorded != fresh {
                    d.mismatches += 1;
                }
                d.cursor += 1;
                Ok(recorded.clone())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        super::ensure_finite(op_name, value.data())?;
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads[..i],
                };
                self.backprop(Var(i), &g, &mut sink)?;
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(self.nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, out: Var, g: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => elementwise::add_backward(self, *a, *b, g, sink),
            Op::Sub(a, b) => elementwise::sub_backward(self, *a, *b, g, sink),
            Op::Mul(a, b) => elementwise::mul_backward(self, *a, *b, g, sink),
            Op::Div(a, b) => elementwise::div_backward(self, *a, *b, g, sink),
            Op::Scale(x, c) => {
                let c = *c;
                sink.add_with(*x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a = *a + gi * c;
                    }
                });
            }
            Op::Offset(x) => sink.add_slice(*x, g),
            Op::Relu { x, mask } | Op::Clamp { x, pass: mask } => {
                sink.add_with(*x, |acc| {
                    for ((a, &gi), &m) in acc.iter_mut().zip(g).zip(mask) {
                        if m == 1 {
                            *a = *a + gi;
                        }
                    }
                });
            }
            Op::Abs { x, sign } => {
                sink.add_with(*x, |acc| {
                    for ((a, &gi), &s) in acc.iter_mut().zip(g).zip(sign) {
                        match s {
                            1 => *a = *a + gi,
                            2 => *a = *a - gi,
                            _ => {}
                        }
                    }
                });
            }
            Op::Gelu(x) => elementwise::gelu_backward(self, *x, g, sink),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                sink.add_with(*x, |acc| {
                    for ((a, &gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *a = *a + gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                sink.add_with(*x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a = *a + gi / xi;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                sink.add_with(*x, |acc| acc.iter_mut().for_each(|a| *a = *a + g0));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                let g0 = g[0] / n;
                sink.add_with(*x, |acc| acc.iter_mut().for_each(|a| *a = *a + g0));
            }
            Op::Matmul(a, b) => matmul::matmul_backward(self, *a, *b, g, sink),
            Op::Conv2d { x, w, b, opts } => conv::conv2d_backward(self, *x, *w, *b, *opts, g, sink),
            Op::MaxPool { x, argmax } => pool::maxpool_backward(*x, argmax, g, sink),
            Op::GlobalAvgPool(x) => pool::global_avg_pool_backward(self, *x, g, sink),
            Op::Softmax { x, axis } => {
                softmax::softmax_backward(node.value.shape(), node.value.data(), *axis, *x, g, sink)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => norm::batch_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, g, sink),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => norm::batch_norm_eval_backward(self, *x, *gamma, *beta, mean, inv_std, g, sink),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => norm::layer_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, g, sink),
            Op::Upsample(x) => resample::upsample_backward(self, *x, node.value.shape(), g, sink),
            Op::Reshape(x) => sink.add_slice(*x, g),
            Op::Permute { x, perm } => shape::permute_backward(self, *x, perm, g, sink),
            Op::Concat { xs, axis } => shape::concat_backward(self, xs, *axis, node.value.shape(), g, sink),
            Op::Narrow { x, axis, start } => {
                shape::narrow_backward(self, *x, *axis, *start, node.value.shape(), g, sink)
            }
        }
        Ok(())
    }
}

/// Gradient accumulator handed to backward rules. Only holds slots for nodes
/// earlier than the one being processed.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Element> GradSink<'_, T> {
    pub fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the accumulator for `v`, creating it zeroed if absent.
    pub fn add_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.need(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    pub fn add_slice(&mut self, v: Var, contrib: &[T]) {
        self.add_with(v, |acc| {
            for (a, &c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        });
    }

    pub fn add_vec(&mut self, v: Var, contrib: Vec<T>) {
        if !self.need(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

impl<T: Element> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        conv::conv2d(self, x, w, b, opts)
    }
}
