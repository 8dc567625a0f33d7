use super::tape::{GradSink, Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

fn nchw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 4 {
        return Err(Error::dim(op, format!("expected NCHW, got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

fn check_affine(op: &'static str, c: usize, gamma: &[usize], beta: &[usize]) -> Result<()> {
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(op, format!("affine params {gamma:?}/{beta:?} for {c} features")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (n, c, hw) = nchw("batch_norm", tape.shape(x)).expect("validated");
    let gm = tape.value(gamma).data();
    let m = T::of((n * hw) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for k in base..base + hw {
                sum_g[ci] = sum_g[ci] + g[k];
                sum_gx[ci] = sum_gx[ci] + g[k] * xhat[k];
            }
        }
    }
    sink.add_slice(beta, &sum_g);
    sink.add_slice(gamma, &sum_gx);
    sink.add_with(x, |acc| {
        for ni in 0..n {
            for ci in 0..c {
                let scale = gm[ci] * inv_std[ci] / m;
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    acc[k] = acc[k] + scale * (m * g[k] - sum_g[ci] - xhat[k] * sum_gx[ci]);
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_eval_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (n, c, hw) = nchw("batch_norm", tape.shape(x)).expect("validated");
    let xd = tape.value(x).data();
    let gm = tape.value(gamma).data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for k in base..base + hw {
                sum_g[ci] = sum_g[ci] + g[k];
                sum_gx[ci] = sum_gx[ci] + g[k] * (xd[k] - mean[ci]) * inv_std[ci];
            }
        }
    }
    sink.add_slice(beta, &sum_g);
    sink.add_slice(gamma, &sum_gx);
    sink.add_with(x, |acc| {
        for ni in 0..n {
            for ci in 0..c {
                let scale = gm[ci] * inv_std[ci];
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    acc[k] = acc[k] + scale * g[k];
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = *tape.shape(x).last().expect("validated");
    let gm = tape.value(gamma).data();
    let df = T::of(d as f64);
    sink.add_with(beta, |acc| {
        for row in g.chunks(d) {
            for (a, &gi) in acc.iter_mut().zip(row) {
                *a = *a + gi;
            }
        }
    });
    sink.add_with(gamma, |acc| {
        for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
            for ((a, &gi), &xi) in acc.iter_mut().zip(row).zip(xr) {
                *a = *a + gi * xi;
            }
        }
    });
    sink.add_with(x, |acc| {
        for (r, ((arow, grow), xrow)) in acc
            .chunks_mut(d)
            .zip(g.chunks(d))
            .zip(xhat.chunks(d))
            .enumerate()
        {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let dxh = grow[j] * gm[j];
                s1 = s1 + dxh;
                s2 = s2 + dxh * xrow[j];
            }
            let scale = inv_std[r] / df;
            for j in 0..d {
                let dxh = grow[j] * gm[j];
                arow[j] = arow[j] + scale * (df * dxh - s1 - xrow[j] * s2);
            }
        }
    });
}

impl<T: Element> Tape<T> {
    /// Training-mode batch norm over `(N, H, W)` per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = nchw("batch_norm", self.shape(x))?;
        check_affine("batch_norm", c, self.shape(gamma), self.shape(beta))?;
        if eps <= 0.0 {
            return Err(Error::domain("batch_norm", "eps must be positive"));
        }
        let m = n * hw;
        if m < 2 {
            return Err(Error::domain(
                "batch_norm",
                format!("normalization group of {m} element(s) in training mode"),
            ));
        }
        let xd = self.value(x).data();
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                mean[ci] = mean[ci] + xd[base..base + hw].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mu = mean[ci];
                var[ci] = var[ci]
                    + xd[base..base + hw]
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let e = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + e).sqrt().recip()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    xhat[k] = (xd[k] - mean[ci]) * inv_std[ci];
                    out[k] = gm[ci] * xhat[k] + bt[ci];
                }
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let var_out = self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((var_out, BatchStats { mean, var, count: m }))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = nchw("batch_norm", self.shape(x))?;
        check_affine("batch_norm", c, self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics length"));
        }
        let e = T::of(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + e).sqrt().recip()).collect();
        let mean = running_mean.to_vec();
        let xd = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    out[k] = gm[ci] * (xd[k] - mean[ci]) * inv_std[ci] + bt[ci];
                }
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(
            "batch_norm",
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Normalizes over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(Error::dim("layer_norm", "rank-0 input"));
        };
        check_affine("layer_norm", d, self.shape(gamma), self.shape(beta))?;
        if eps <= 0.0 || d == 0 {
            return Err(Error::domain("layer_norm", "eps must be positive and features non-empty"));
        }
        let xd = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let df = T::of(d as f64);
        let e = T::of(eps);
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xd.chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let is = (var + e).sqrt().recip();
            inv_std.push(is);
            for j in 0..d {
                let k = r * d + j;
                xhat[k] = (row[j] - mu) * is;
                out[k] = gm[j] * xhat[k] + bt[j];
            }
        }
        let v = Tensor::from_parts(shape, out);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}
