use super::tape::{GradSink, Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn softmax_backward<T: Element>(
    shape: &[usize],
    y: &[T],
    axis: usize,
    x: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (outer, len, inner) = split(shape, axis);
    sink.add_with(x, |acc| {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..len {
                    let k = idx(j);
                    acc[k] = acc[k] + y[k] * (g[k] - dot);
                }
            }
        }
    });
}

impl<T: Element> Tape<T> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split(&shape, axis);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        self.push("softmax", v, Op::Softmax { x, axis })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_pair() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new([2], vec![1000.0, 1000.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xv = Tensor::<f64>::randn([3, 4, 5], 3.0, &mut rng);
        for axis in 0..3 {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let y = t.softmax(x, axis).unwrap();
            let yv = t.value(y);
            let s = yv.shape().to_vec();
            let (outer, len, inner) = split(&s, axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|j| yv.data()[(o * len + j) * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
            assert!(yv.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn bad_axis() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros([2, 2]));
        assert!(t.softmax(x, 2).is_err());
    }
}
