use super::gemm::gemm;
use super::tape::{GradSink, Op, Tape, Var};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single matrix shared across all of `a`'s leading extents.
    shared_b: bool,
}

fn dims(a: &[usize], b: &[usize]) -> Result<Dims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", format!("operands must be at least 2-D: {a:?} vs {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shapes("matmul", a, b));
    }
    if b.len() == 2 {
        let batch = numel(&a[..a.len() - 2]);
        return Ok(Dims {
            batch: 1,
            m: batch * m,
            k,
            n,
            shared_b: true,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shapes("matmul", a, b));
    }
    Ok(Dims {
        batch: numel(&a[..a.len() - 2]),
        m,
        k,
        n,
        shared_b: false,
    })
}

pub(super) fn matmul_backward<T: Element>(tape: &Tape<T>, a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let d = dims(av.shape(), bv.shape()).expect("validated in forward");
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    sink.add_with(a, |acc| {
        for i in 0..d.batch {
            gemm(
                false,
                true,
                d.m,
                d.n,
                d.k,
                T::one(),
                &g[i * sc..(i + 1) * sc],
                &bv.data()[i * sb..(i + 1) * sb],
                T::one(),
                &mut acc[i * sa..(i + 1) * sa],
            );
        }
    });
    sink.add_with(b, |acc| {
        for i in 0..d.batch {
            gemm(
                true,
                false,
                d.k,
                d.m,
                d.n,
                T::one(),
                &av.data()[i * sa..(i + 1) * sa],
                &g[i * sc..(i + 1) * sc],
                T::one(),
                &mut acc[i * sb..(i + 1) * sb],
            );
        }
    });
}

impl<T: Element> Tape<T> {
    /// Matrix product over the trailing two axes. `b` may be a single matrix
    /// applied to every leading index of `a`, or carry the same leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = dims(av.shape(), bv.shape())?;
        let mut out_shape = av.shape()[..av.rank() - 1].to_vec();
        out_shape.push(d.n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (sa, sb, sc) = (d.m * d.k, if d.shared_b { 0 } else { d.k * d.n }, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                false,
                false,
                d.m,
                d.k,
                d.n,
                T::one(),
                &av.data()[i * sa..(i + 1) * sa],
                &bv.data()[i * sb..i * sb + d.k * d.n],
                T::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let v = Tensor::from_parts(out_shape, out);
        self.push("matmul", v, Op::Matmul(a, b))
    }
}
