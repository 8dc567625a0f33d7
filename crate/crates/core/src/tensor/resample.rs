use super::tape::{GradSink, Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, frac)` for each output coordinate under the
/// half-pixel (align-corners-false) convention.
fn taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(super) fn upsample_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    out_shape: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let s = tape.shape(x).to_vec();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    if (h, w) == (oh, ow) {
        sink.add_slice(x, g);
        return;
    }
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    sink.add_with(x, |acc| {
        for p in 0..planes {
            let src = &mut acc[p * h * w..(p + 1) * h * w];
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                    let gv = gp[oy * ow + ox];
                    src[y0 * w + x0] = src[y0 * w + x0] + gv * wy0 * wx0;
                    src[y0 * w + x1] = src[y0 * w + x1] + gv * wy0 * wx1;
                    src[y1 * w + x0] = src[y1 * w + x0] + gv * wy1 * wx0;
                    src[y1 * w + x1] = src[y1 * w + x1] + gv * wy1 * wx1;
                }
            }
        }
    });
}

impl<T: Element> Tape<T> {
    /// Bilinear resampling of an NCHW map to `out_h × out_w` (align-corners-false).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("upsample_bilinear", format!("expected NCHW, got {s:?}")));
        }
        if out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::domain("upsample_bilinear", "extents must be at least 1"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x);
        let v = if (h, w) == (out_h, out_w) {
            xv.clone()
        } else {
            let (ty, tx) = (taps(h, out_h), taps(w, out_w));
            let xd = xv.data();
            let mut out = Vec::with_capacity(planes * out_h * out_w);
            for p in 0..planes {
                let src = &xd[p * h * w..(p + 1) * h * w];
                for &(y0, y1, fy) in &ty {
                    let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
                    for &(x0, x1, fx) in &tx {
                        let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                        let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                        let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                        out.push(top * wy0 + bottom * wy1);
                    }
                }
            }
            Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out)
        };
        self.push("upsample_bilinear", v, Op::Upsample(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar interpolation written directly from the half-pixel mapping.
    fn interp_1d(values: &[f64], out: usize, o: usize) -> f64 {
        let n = values.len();
        let pos = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    }

    #[test]
    fn same_size_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let xv = Tensor::<f32>::randn([2, 3, 5, 7], 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.upsample_bilinear(x, 5, 7).unwrap();
        assert!(t.value(y).bit_eq(&xv));
    }

    #[test]
    fn two_to_four() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let y = t.upsample_bilinear(x, 1, 4).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.5, 1.5, 2.0]);
        for o in 0..4 {
            assert_eq!(t.value(y).data()[o], interp_1d(&[0.0, 2.0], 4, o));
        }
    }

    #[test]
    fn constant_stays_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full([1, 2, 3, 3], 0.75));
        for (h, w) in [(1, 1), (4, 9), (8, 8), (2, 5)] {
            let y = t.upsample_bilinear(x, h, w).unwrap();
            assert!(t.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        }
    }

    #[test]
    fn separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let xv = Tensor::<f64>::randn([1, 1, 3, 4], 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.upsample_bilinear(x, 7, 5).unwrap();
        // interpolate each source row along x, then the resulting column along y
        for oy in 0..7 {
            for ox in 0..5 {
                let col: Vec<f64> = (0..3)
                    .map(|iy| {
                        let row: Vec<f64> = (0..4).map(|ix| xv.at(&[0, 0, iy, ix])).collect();
                        interp_1d(&row, 5, ox)
                    })
                    .collect();
                let want = interp_1d(&col, 7, oy);
                assert!((t.value(y).at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
            }
        }
    }
}
