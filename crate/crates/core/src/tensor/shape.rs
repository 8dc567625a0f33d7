use super::tape::{GradSink, Op, Tape, Var};
use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

/// Calls `f(out_index, in_index)` for every element of the permuted layout.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..numel(&out_shape) {
        f(o, src);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(super) fn permute_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    perm: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let in_shape = tape.shape(x).to_vec();
    sink.add_with(x, |acc| for_each_permuted(&in_shape, perm, |o, i| acc[i] = acc[i] + g[o]));
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(super) fn concat_backward<T: Element>(
    tape: &Tape<T>,
    xs: &[Var],
    axis: usize,
    out_shape: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (outer, inner) = outer_inner(out_shape, axis);
    let total = out_shape[axis];
    let mut offset = 0;
    for &x in xs {
        let len = tape.shape(x)[axis];
        sink.add_with(x, |acc| {
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                let dst = &mut acc[o * len * inner..(o + 1) * len * inner];
                for (a, &v) in dst.iter_mut().zip(src) {
                    *a = *a + v;
                }
            }
        });
        offset += len;
    }
}

pub(super) fn narrow_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let total = tape.shape(x)[axis];
    let (outer, inner) = outer_inner(out_shape, axis);
    let len = out_shape[axis];
    sink.add_with(x, |acc| {
        for o in 0..outer {
            let dst = &mut acc[(o * total + start) * inner..(o * total + start + len) * inner];
            let src = &g[o * len * inner..(o + 1) * len * inner];
            for (a, &v) in dst.iter_mut().zip(src) {
                *a = *a + v;
            }
        }
    });
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {in_shape:?}")));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for_each_permuted(&in_shape, perm, |o, i| out[o] = xd[i]);
        let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
        let v = Tensor::from_parts(out_shape, out);
        self.push("permute", v, Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, inner) = outer_inner(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let v = Tensor::from_parts(out_shape, out);
        self.push("concat", v, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let (outer, inner) = outer_inner(&shape, axis);
        let total = shape[axis];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let v = Tensor::from_parts(out_shape, out);
        self.push("narrow", v, Op::Narrow { x, axis, start })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = t.permute(x, &[0, 2, 1]).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 3]);
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(t.value(y).at(&[n, j, i]), t.value(x).at(&[n, i, j]));
                }
            }
        }
        assert!(t.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut t = Tape::<f64>::new();
        let a = t.var(Tensor::from_fn([2, 1, 3], |i| i as f64));
        let b = t.var(Tensor::from_fn([2, 2, 3], |i| 100.0 + i as f64));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 3]);
        let back = t.narrow(c, 1, 1, 2).unwrap();
        assert!(t.value(back).bit_eq(t.value(b)));
        let l = t.sum(back).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(a).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_shape_mismatch() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros([1, 2, 3]));
        let b = t.constant(Tensor::zeros([1, 2, 4]));
        assert!(t.concat(&[a, b], 1).is_err());
    }
}
