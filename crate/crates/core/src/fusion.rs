//! Bilinear fusion of the transformer and convolutional bottleneck features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ParamId, Session};
use crate::tensor::{Element, Var};

/// Channel attention, spatial attention and Hadamard cross-term over features
/// aligned to a common `C_f × h × w`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub align_z: Conv2d,
    pub align_u: Conv2d,
    /// Shared 1×1 conv `w` of the channel attention.
    pub ca_w: Conv2d,
    pub zeta: ParamId,
    pub gamma: ParamId,
    pub w1: Conv2d,
    pub w2: Conv2d,
    pub b_conv: Conv2d,
    pub out_proj: Conv2d,
}

/// Intermediate maps exposed for inspection.
pub struct FusionOutput {
    pub out: Var,
    /// `N×C×C` channel affinity.
    pub channel_map: Var,
    /// `N×hw×hw` position affinity.
    pub spatial_map: Var,
    pub bilinear: Var,
}

fn nchw<T: Element>(s: &Session<'_, T>, op: &'static str, x: Var) -> Result<[usize; 4]> {
    let sh = s.tape.shape(x);
    <[usize; 4]>::try_from(sh).map_err(|_| Error::dim(op, format!("expected NCHW, got {sh:?}")))
}

/// `N×C×C` channel affinity `softmax(F Fᵀ / √C)` over the last axis.
fn channel_affinity<T: Element>(s: &mut Session<'_, T>, f: Var) -> Result<Var> {
    let [n, c, h, w] = nchw(s, "channel_attention", f)?;
    let f1 = s.tape.reshape(f, [n, c, h * w])?;
    let f2 = s.tape.permute(f1, &[0, 2, 1])?;
    let aff = s.tape.matmul(f1, f2)?;
    let aff = s.tape.scale(aff, 1.0 / (c as f64).sqrt())?;
    s.tape.softmax(aff, 2)
}

impl FusionBlock {
    /// `d_z` transformer channels, `c_u` convolutional channels, `c_f` fused channels.
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, d_z: usize, c_u: usize, c_f: usize) -> Result<Self> {
        let mut b = b.sub("fusion");
        Ok(Self {
            align_z: Conv2d::pointwise(&mut b, "align_z", d_z, c_f, 1.0)?,
            align_u: Conv2d::pointwise(&mut b, "align_u", c_u, c_f, 1.0)?,
            ca_w: Conv2d::pointwise(&mut b, "channel.w", c_f, c_f, 1.0)?,
            zeta: b.zeros("channel.zeta", &[1])?,
            gamma: b.zeros("spatial.gamma", &[1])?,
            w1: Conv2d::pointwise(&mut b, "bilinear.w1", c_f, c_f, 1.0)?,
            w2: Conv2d::pointwise(&mut b, "bilinear.w2", c_f, c_f, 1.0)?,
            b_conv: Conv2d::pointwise(&mut b, "bilinear.conv", c_f, c_f, 1.0)?,
            out_proj: Conv2d::pointwise(&mut b, "out_proj", 3 * c_f, c_f, 1.0)?,
        })
    }

    /// `ζ · (M_c g) + w(F)` with `g = w(GAP(F))`.
    pub fn channel_attention<T: Element>(&self, s: &mut Session<'_, T>, f: Var) -> Result<(Var, Var)> {
        let [n, c, _, _] = nchw(s, "channel_attention", f)?;
        let m = channel_affinity(s, f)?;
        let pooled = s.tape.global_avg_pool(f)?;
        let g = self.ca_w.forward(s, pooled)?;
        let g = s.tape.reshape(g, [n, c, 1])?;
        let mg = s.tape.matmul(m, g)?;
        let mg = s.tape.reshape(mg, [n, c, 1, 1])?;
        let zeta = s.param(self.zeta);
        let attended = s.tape.mul(mg, zeta)?;
        let wf = self.ca_w.forward(s, f)?;
        Ok((s.tape.add(attended, wf)?, m))
    }

    /// `γ · (U M_sᵀ) + U` with `M_s = softmax(UᵀU / √C)` over positions.
    pub fn spatial_attention<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = nchw(s, "spatial_attention", u)?;
        let u1 = s.tape.reshape(u, [n, c, h * w])?;
        let ut = s.tape.permute(u1, &[0, 2, 1])?;
        let aff = s.tape.matmul(ut, u1)?;
        let aff = s.tape.scale(aff, 1.0 / (c as f64).sqrt())?;
        let m = s.tape.softmax(aff, 2)?;
        let mt = s.tape.permute(m, &[0, 2, 1])?;
        let agg = s.tape.matmul(u1, mt)?;
        let agg = s.tape.reshape(agg, [n, c, h, w])?;
        let gamma = s.param(self.gamma);
        let agg = s.tape.mul(agg, gamma)?;
        Ok((s.tape.add(agg, u)?, m))
    }

    /// Aligns both branches to the convolutional extent and fuses them.
    pub fn forward_full<T: Element>(&self, s: &mut Session<'_, T>, z: Var, u: Var) -> Result<FusionOutput> {
        let [_, _, h, w] = nchw(s, "bilinear_fuse", u)?;
        nchw(s, "bilinear_fuse", z)?;
        let z = s.tape.upsample_bilinear(z, h, w)?;
        let za = self.align_z.forward(s, z)?;
        let ua = self.align_u.forward(s, u)?;
        if s.tape.shape(za) != s.tape.shape(ua) {
            return Err(Error::shapes("bilinear_fuse", s.tape.shape(za), s.tape.shape(ua)));
        }
        let (ca, channel_map) = self.channel_attention(s, za)?;
        let (sa, spatial_map) = self.spatial_attention(s, ua)?;
        let p1 = self.w1.forward(s, za)?;
        let p2 = self.w2.forward(s, ua)?;
        let prod = s.tape.hadamard(p1, p2)?;
        let bilinear = self.b_conv.forward(s, prod)?;
        let cat = s.tape.concat(&[ca, sa, bilinear], 1)?;
        let out = self.out_proj.forward(s, cat)?;
        Ok(FusionOutput {
            out,
            channel_map,
            spatial_map,
            bilinear,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, z: Var, u: Var) -> Result<Var> {
        Ok(self.forward_full(s, z, u)?.out)
    }
}

/// Ablation fusion: resample, concatenate, 1×1 conv.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub proj: Conv2d,
}

impl ConcatFusion {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, d_z: usize, c_u: usize, c_f: usize) -> Result<Self> {
        let mut b = b.sub("fusion");
        Ok(Self {
            proj: Conv2d::pointwise(&mut b, "concat_proj", d_z + c_u, c_f, 1.0)?,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, z: Var, u: Var) -> Result<Var> {
        let [_, _, h, w] = nchw(s, "concat_fuse", u)?;
        let z = s.tape.upsample_bilinear(z, h, w)?;
        let cat = s.tape.concat(&[z, u], 1)?;
        self.proj.forward(s, cat)
    }
}
