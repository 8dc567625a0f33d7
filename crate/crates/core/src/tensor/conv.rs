use rayon::prelude::*;

use super::gemm::gemm;
use super::tape::{GradSink, Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Hyper-parameters of a 2-D convolution. Padding and dilation are per axis
/// (rows, columns) so that `n×1` and `1×n` kernels keep their input extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn padding2(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    opts: Conv2dOptions,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], b: Option<&[usize]>, opts: Conv2dOptions) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shapes("conv2d", x, w));
        }
        if opts.stride == 0 || opts.dilation.0 == 0 || opts.dilation.1 == 0 || opts.groups == 0 {
            return Err(Error::domain("conv2d", "stride, dilation and groups must be at least 1"));
        }
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        let g = opts.groups;
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::shapes("conv2d", x, w));
        }
        if let Some(b) = b {
            if b != [cout] {
                return Err(Error::shapes("conv2d", w, b));
            }
        }
        let out = |inp: usize, pad: usize, dil: usize, k: usize| -> Option<usize> {
            let span = dil * (k - 1) + 1;
            let padded = inp + 2 * pad;
            (padded >= span).then(|| (padded - span) / opts.stride + 1)
        };
        let oh = out(h, opts.padding.0, opts.dilation.0, kh);
        let ow = out(wd, opts.padding.1, opts.dilation.1, kw);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 && kh > 0 && kw > 0 => Ok(Self {
                n,
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                oh,
                ow,
                groups: g,
                opts,
            }),
            _ => Err(Error::domain(
                "conv2d",
                format!("input {x:?} with kernel {w:?} and {opts:?} yields an empty output"),
            )),
        }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Pointwise convolutions read the input plane directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.opts.stride == 1
            && self.opts.padding == (0, 0)
    }

    /// Output columns `[lo, hi)` whose input column `ox*s + off` lies inside `0..len`.
    fn valid_range(out_len: usize, stride: usize, off: isize, len: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (len as isize) <= off {
            0
        } else {
            ((len as isize - off + s - 1) / s).min(out_len as isize)
        };
        let lo = lo.min(out_len as isize) as usize;
        (lo, (hi.max(lo as isize)) as usize)
    }

    /// Fills `cols` (`k × p`) from one group's input planes (`cin_g × h × w`).
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let (s, (ph, pw), (dh, dw)) = (self.opts.stride, self.opts.padding, self.opts.dilation);
        let (oh, ow, p) = (self.oh, self.ow, self.p());
        for c in 0..self.cin_g() {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let xoff = (kx * dw) as isize - pw as isize;
                    let (lo, hi) = Self::valid_range(ow, s, xoff, self.w);
                    for oy in 0..oh {
                        let iy = (oy * s + ky * dh) as isize - ph as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        if s == 1 {
                            let start = (lo as isize + xoff) as usize;
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = src[(ox as isize * s as isize + xoff) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto one group's input planes.
    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let (s, (ph, pw), (dh, dw)) = (self.opts.stride, self.opts.padding, self.opts.dilation);
        let (oh, ow, p) = (self.oh, self.ow, self.p());
        for c in 0..self.cin_g() {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let srcrow = &cols[row * p..(row + 1) * p];
                    let xoff = (kx * dw) as isize - pw as isize;
                    let (lo, hi) = Self::valid_range(ow, s, xoff, self.w);
                    for oy in 0..oh {
                        let iy = (oy * s + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &srcrow[oy * ow..(oy + 1) * ow];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in lo..hi {
                            let ix = (ox as isize * s as isize + xoff) as usize;
                            dst[ix] = dst[ix] + line[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    opts: Conv2dOptions,
) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let bv = b.map(|b| tape.value(b));
    let geo = Geometry::new(xv.shape(), wv.shape(), bv.map(|b| b.shape()), opts)?;
    let (p, k, cin_g, cout_g) = (geo.p(), geo.k(), geo.cin_g(), geo.cout_g());
    let in_item = geo.cin * geo.h * geo.w;
    let out_item = geo.cout * p;
    let mut out = vec![T::zero(); geo.n * out_item];
    let (xd, wd) = (xv.data(), wv.data());
    let bd = bv.map(|b| b.data());
    out.par_chunks_mut(out_item.max(1))
        .enumerate()
        .for_each(|(ni, dst)| {
            let xin = &xd[ni * in_item..(ni + 1) * in_item];
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            for gi in 0..geo.groups {
                let xg = &xin[gi * cin_g * geo.h * geo.w..(gi + 1) * cin_g * geo.h * geo.w];
                let colm: &[T] = if geo.is_pointwise() {
                    xg
                } else {
                    geo.im2col(xg, &mut cols);
                    &cols
                };
                gemm(
                    false,
                    false,
                    cout_g,
                    k,
                    p,
                    T::one(),
                    &wd[gi * cout_g * k..(gi + 1) * cout_g * k],
                    colm,
                    T::zero(),
                    &mut dst[gi * cout_g * p..(gi + 1) * cout_g * p],
                );
            }
            if let Some(bd) = bd {
                for (co, &bias) in bd.iter().enumerate() {
                    dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        });
    let v = Tensor::from_parts(vec![geo.n, geo.cout, geo.oh, geo.ow], out);
    tape.push("conv2d", v, Op::Conv2d { x, w, b, opts })
}

pub(super) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    opts: Conv2dOptions,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let geo = Geometry::new(xv.shape(), wv.shape(), None, opts).expect("validated in forward");
    let (p, k, cin_g, cout_g) = (geo.p(), geo.k(), geo.cin_g(), geo.cout_g());
    let in_item = geo.cin * geo.h * geo.w;
    let out_item = geo.cout * p;
    let (xd, wd) = (xv.data(), wv.data());
    let need_x = sink.need(x);
    let need_w = sink.need(w);

    if let Some(b) = b {
        sink.add_with(b, |acc| {
            for ni in 0..geo.n {
                for (co, a) in acc.iter_mut().enumerate() {
                    let row = &g[ni * out_item + co * p..ni * out_item + (co + 1) * p];
                    *a = *a + row.iter().copied().sum::<T>();
                }
            }
        });
    }
    if !need_x && !need_w {
        return;
    }

    // Per-item partial weight gradients are summed afterwards in item order so
    // the result does not depend on thread scheduling.
    let mut dx = if need_x { vec![T::zero(); geo.n * in_item] } else { Vec::new() };
    let per_item = |ni: usize, dx_item: Option<&mut [T]>| -> Vec<T> {
        let xin = &xd[ni * in_item..(ni + 1) * in_item];
        let gout = &g[ni * out_item..(ni + 1) * out_item];
        let mut dw = if need_w { vec![T::zero(); wd.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); k * p];
        let mut dx_item = dx_item;
        for gi in 0..geo.groups {
            let gslice = &gout[gi * cout_g * p..(gi + 1) * cout_g * p];
            let xg = &xin[gi * cin_g * geo.h * geo.w..(gi + 1) * cin_g * geo.h * geo.w];
            if need_w {
                let colm: &[T] = if geo.is_pointwise() {
                    xg
                } else {
                    geo.im2col(xg, &mut cols);
                    &cols
                };
                gemm(
                    false,
                    true,
                    cout_g,
                    p,
                    k,
                    T::one(),
                    gslice,
                    colm,
                    T::zero(),
                    &mut dw[gi * cout_g * k..(gi + 1) * cout_g * k],
                );
            }
            if let Some(dxi) = dx_item.as_deref_mut() {
                let wg = &wd[gi * cout_g * k..(gi + 1) * cout_g * k];
                let dxg = &mut dxi[gi * cin_g * geo.h * geo.w..(gi + 1) * cin_g * geo.h * geo.w];
                if geo.is_pointwise() {
                    gemm(true, false, k, cout_g, p, T::one(), wg, gslice, T::one(), dxg);
                } else {
                    gemm(true, false, k, cout_g, p, T::one(), wg, gslice, T::zero(), &mut cols);
                    geo.col2im(&cols, dxg);
                }
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = if need_x {
        dx.par_chunks_mut(in_item.max(1))
            .enumerate()
            .map(|(ni, chunk)| per_item(ni, Some(chunk)))
            .collect()
    } else {
        (0..geo.n).into_par_iter().map(|ni| per_item(ni, None)).collect()
    };

    if need_w {
        sink.add_with(w, |acc| {
            for part in &partials {
                for (a, &d) in acc.iter_mut().zip(part) {
                    *a = *a + d;
                }
            }
        });
    }
    if need_x {
        sink.add_vec(x, dx);
    }
}
