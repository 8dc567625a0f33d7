use super::tape::{GradSink, Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(super) fn maxpool_backward<T: Element>(x: Var, argmax: &[u32], g: &[T], sink: &mut GradSink<'_, T>) {
    sink.add_with(x, |acc| {
        for (&src, &gi) in argmax.iter().zip(g) {
            acc[src as usize] = acc[src as usize] + gi;
        }
    });
}

pub(super) fn global_avg_pool_backward<T: Element>(tape: &Tape<T>, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let s = tape.shape(x);
    let plane = s[2] * s[3];
    let inv = T::one() / T::of(plane as f64);
    sink.add_with(x, |acc| {
        for (c, &gi) in g.iter().enumerate() {
            let share = gi * inv;
            acc[c * plane..(c + 1) * plane].iter_mut().for_each(|a| *a = *a + share);
        }
    });
}

impl<T: Element> Tape<T> {
    /// Non-overlapping `window × window` max pooling. Ties route the gradient
    /// to the first element in row-major scan order.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("maxpool2d", format!("expected NCHW, got {s:?}")));
        }
        if window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
            return Err(Error::dim(
                "maxpool2d",
                format!("spatial extents {}x{} not divisible by window {window}", s[2], s[3]),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let data = xv.data();
        let mut fresh = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    fresh.push(best as u32);
                }
            }
        }
        let argmax = self.resolve("maxpool2d", fresh)?;
        let xv = self.value(x);
        let out: Vec<T> = argmax.iter().map(|&i| xv.data()[i as usize]).collect();
        let v = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        self.push("maxpool2d", v, Op::MaxPool { x, argmax })
    }

    /// Mean over each channel's spatial plane, shaped `N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let plane = s[2] * s[3];
        if plane == 0 {
            return Err(Error::domain("global_avg_pool", "empty spatial plane"));
        }
        let inv = T::of(plane as f64).recip();
        let out = xv
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_parts(vec![s[0], s[1], 1, 1], out);
        self.push("global_avg_pool", v, Op::GlobalAvgPool(x))
    }
}
