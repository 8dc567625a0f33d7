use super::tape::{GradSink, Op, Tape, Var};
use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

/// Index plan for a binary op whose operands differ only by singleton extents.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(pb.iter()) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(Error::shapes(op, a, b));
            }
        }
        let masked = |padded: &[usize]| -> Vec<usize> {
            strides(padded)
                .into_iter()
                .zip(padded.iter())
                .map(|(s, &e)| if e == 1 { 0 } else { s })
                .collect()
        };
        Ok(Self {
            a_strides: masked(&pa),
            b_strides: masked(&pb),
            out,
        })
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let n = numel(&self.out);
        let mut idx = vec![0usize; rank];
        let (mut ai, mut bi) = (0usize, 0usize);
        for o in 0..n {
            f(o, ai, bi);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                ai += self.a_strides[d];
                bi += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ai -= self.a_strides[d] * self.out[d];
                bi -= self.b_strides[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

fn binary<T: Element>(
    tape: &Tape<T>,
    op: &'static str,
    a: Var,
    b: Var,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() == bv.shape() {
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(av.shape().to_vec(), data));
    }
    let plan = Broadcast::plan(op, av.shape(), bv.shape())?;
    let mut data = vec![T::zero(); numel(&plan.out)];
    let (ad, bd) = (av.data(), bv.data());
    plan.for_each(|o, i, j| data[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(plan.out, data))
}

/// Accumulates `ga(o, i, j)` into the gradient of `a` and `gb(o, i, j)` into `b`.
fn binary_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    sink: &mut GradSink<'_, T>,
    ga: impl Fn(usize, usize, usize) -> T,
    gb: impl Fn(usize, usize, usize) -> T,
) {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa == sb {
        sink.add_with(a, |acc| acc.iter_mut().enumerate().for_each(|(i, v)| *v = *v + ga(i, i, i)));
        sink.add_with(b, |acc| acc.iter_mut().enumerate().for_each(|(i, v)| *v = *v + gb(i, i, i)));
        return;
    }
    let plan = Broadcast::plan("broadcast", &sa, &sb).expect("validated in forward");
    sink.add_with(a, |acc| plan.for_each(|o, i, j| acc[i] = acc[i] + ga(o, i, j)));
    sink.add_with(b, |acc| plan.for_each(|o, i, j| acc[j] = acc[j] + gb(o, i, j)));
}

pub(super) fn add_backward<T: Element>(tape: &Tape<T>, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    binary_backward(tape, a, b, sink, |o, _, _| g[o], |o, _, _| g[o]);
}

pub(super) fn sub_backward<T: Element>(tape: &Tape<T>, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    binary_backward(tape, a, b, sink, |o, _, _| g[o], |o, _, _| -g[o]);
}

pub(super) fn mul_backward<T: Element>(tape: &Tape<T>, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let (ad, bd) = (tape.value(a).data(), tape.value(b).data());
    binary_backward(tape, a, b, sink, |o, _, j| g[o] * bd[j], |o, i, _| g[o] * ad[i]);
}

pub(super) fn div_backward<T: Element>(tape: &Tape<T>, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let (ad, bd) = (tape.value(a).data(), tape.value(b).data());
    binary_backward(
        tape,
        a,
        b,
        sink,
        |o, _, j| g[o] / bd[j],
        |o, i, j| -g[o] * ad[i] / (bd[j] * bd[j]),
    );
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub(super) fn gelu_backward<T: Element>(tape: &Tape<T>, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let xv = tape.value(x).data();
    sink.add_with(x, |acc| {
        for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
            *a = *a + gi * gelu_grad(xi);
        }
    });
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Hadamard product with singleton-extent broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "hadamard", a, b, |x, y| x * y)?;
        self.push("hadamard", v, Op::Mul(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul(a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).map(|e| e + c);
        self.push("offset", v, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let fresh = self
            .value(x)
            .data()
            .iter()
            .map(|&v| u32::from(v > T::zero()))
            .collect();
        let mask = self.resolve("relu", fresh)?;
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m == 1 { v } else { T::zero() })
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("relu", v, Op::Relu { x, mask })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu);
        self.push("gelu", v, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| {
            if e >= T::zero() {
                T::one() / (T::one() + (-e).exp())
            } else {
                let z = e.exp();
                z / (T::one() + z)
            }
        });
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&e| e <= T::zero()) {
            return Err(Error::domain("log", "argument must be positive"));
        }
        let v = xv.map(|e| e.ln());
        self.push("log", v, Op::Log(x))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let fresh = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v > T::zero() {
                    1
                } else if v < T::zero() {
                    2
                } else {
                    0
                }
            })
            .collect();
        let sign = self.resolve("abs", fresh)?;
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(&sign)
            .map(|(&v, &s)| match s {
                1 => v,
                2 => -v,
                _ => v.abs(),
            })
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("abs", v, Op::Abs { x, sign })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let fresh = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v < lo {
                    0
                } else if v > hi {
                    2
                } else {
                    1
                }
            })
            .collect();
        let pass = self.resolve("clamp", fresh)?;
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(&pass)
            .map(|(&v, &p)| match p {
                0 => lo,
                2 => hi,
                _ => v,
            })
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("clamp", v, Op::Clamp { x, pass })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let m = xv.sum() / T::of(xv.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hadamard_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f32>::new();
        let av = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let a = t.constant(av.clone());
        let ones = t.constant(Tensor::ones([2, 3, 4]));
        let zeros = t.constant(Tensor::zeros([2, 3, 4]));
        let p1 = t.mul(a, ones).unwrap();
        assert!(t.value(p1).bit_eq(&av));
        let p0 = t.mul(a, zeros).unwrap();
        assert!(t.value(p0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let av = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
        let bv = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
        let mut t = Tape::new();
        let (a, b) = (t.constant(av.clone()), t.constant(bv.clone()));
        let p = t.hadamard(a, b).unwrap();
        for i in 0..15 {
            assert!((t.value(p).data()[i] - av.data()[i] * bv.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn singleton_broadcast() {
        let mut t = Tape::<f64>::new();
        let a = t.var(Tensor::from_fn([2, 3, 2, 2], |i| i as f64));
        let s = t.var(Tensor::new([1, 3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap());
        let p = t.mul(a, s).unwrap();
        assert_eq!(t.value(p).at(&[1, 2, 1, 0]), t.value(a).at(&[1, 2, 1, 0]) * 100.0);
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        // d/ds_c = sum of a over the channel's elements
        let want: f64 = (0..2)
            .flat_map(|n| (0..4).map(move |k| (n * 12 + 4 + k) as f64))
            .sum();
        assert_eq!(g.get(s).unwrap().data()[1], want);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([3, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros([2]));
        assert!(matches!(t.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::ones([2]));
        let b = t.constant(Tensor::zeros([2]));
        assert!(matches!(t.div(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn abs_tie_has_zero_subgradient() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let a = t.abs(x).unwrap();
        let l = t.sum(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }
}
