//! Transformer branch: patch embedding, contextual multi-head self-attention and
//! the layer stack.

use rand::Rng;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, LayerNorm, Linear, ParamId, Session};
use crate::tensor::{Conv2dOptions, Element, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos_embed: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, patch: usize, tokens: usize, dim: usize) -> Result<Self> {
        let mut b = b.sub("embed");
        Ok(Self {
            proj: Linear::build(&mut b, "proj", 3 * patch * patch, dim, true)?,
            pos_embed: b.normal("pos_embed", &[tokens, dim], 0.02)?,
            patch,
        })
    }

    /// `N×3×H×W` image to `N×tokens×D`, tokens in row-major patch order.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let shape = s.tape.shape(image).to_vec();
        let p = self.patch;
        if shape.len() != 4 || shape[1] != 3 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(Error::dim(
                "patch_embed",
                format!("image {shape:?} must be N×3×H×W with extents divisible by {p}"),
            ));
        }
        let (n, gh, gw) = (shape[0], shape[2] / p, shape[3] / p);
        let tokens = s.store().param(self.pos_embed).shape()[0];
        if gh * gw != tokens {
            return Err(Error::dim(
                "patch_embed",
                format!("{gh}×{gw} patch grid does not match {tokens} positional embeddings"),
            ));
        }
        let x = s.tape.reshape(image, [n, 3, gh, p, gw, p])?;
        let x = s.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = s.tape.reshape(x, [n, gh * gw, 3 * p * p])?;
        let x = self.proj.forward(s, x)?;
        let pos = s.param(self.pos_embed);
        s.tape.add(x, pos)
    }
}

/// Multi-head self-attention whose keys are first mixed with their grid
/// neighbours by a depthwise convolution, and whose per-head affinities pass
/// through two 1×1 transforms across the head axis before the softmax.
#[derive(Clone, Debug)]
pub struct Mcsa {
    pub heads: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    /// Depthwise `k×k` over the key grid, no bias.
    pub context: Conv2d,
    /// `m → 2m`, followed by ReLU.
    pub theta: Conv2d,
    /// `2m → m`.
    pub phi: Conv2d,
    pub w_o: Linear,
}

/// `[I; -I]` and `[I, -I]`: `phi(relu(theta(a))) = relu(a) - relu(-a) = a`.
pub fn identity_pair<T: Element>(m: usize) -> (Tensor<T>, Tensor<T>) {
    let theta = Tensor::from_fn([2 * m, m, 1, 1], |i| {
        let (r, c) = (i / m, i % m);
        if r == c {
            T::one()
        } else if r == c + m {
            -T::one()
        } else {
            T::zero()
        }
    });
    let phi = Tensor::from_fn([m, 2 * m, 1, 1], |i| {
        let (r, c) = (i / (2 * m), i % (2 * m));
        if c == r {
            T::one()
        } else if c == r + m {
            -T::one()
        } else {
            T::zero()
        }
    });
    (theta, phi)
}

/// Centre-tap depthwise kernel.
pub fn identity_kernel<T: Element>(channels: usize, k: usize) -> Tensor<T> {
    let centre = (k / 2) * k + k / 2;
    Tensor::from_fn([channels, 1, k, k], |i| if i % (k * k) == centre { T::one() } else { T::zero() })
}

impl Mcsa {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, heads: usize, k: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let w_q = Linear::build(&mut b, "w_q", dim, dim, false)?;
        let w_k = Linear::build(&mut b, "w_k", dim, dim, false)?;
        let w_v = Linear::build(&mut b, "w_v", dim, dim, false)?;
        let opts = Conv2dOptions::default().padding(k / 2).groups(dim);
        let context = Conv2d::build(&mut b, "context", dim, dim, (k, k), opts, false, 1.0)?;
        let theta = Conv2d::pointwise(&mut b, "theta", heads, 2 * heads, 1.0)?;
        let phi = Conv2d::pointwise(&mut b, "phi", 2 * heads, heads, 1.0)?;
        let w_o = Linear::build(&mut b, "w_o", dim, dim, true)?;
        let layer = Self {
            heads,
            w_q,
            w_k,
            w_v,
            context,
            theta,
            phi,
            w_o,
        };
        let (t, p) = identity_pair(heads);
        b.set(layer.context.weight, identity_kernel(dim, k))?;
        b.set(layer.theta.weight, t)?;
        b.set(layer.phi.weight, p)?;
        Ok(layer)
    }

    /// `N×T×D → N×m×T×d`.
    fn split_heads<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        let x = s.tape.reshape(x, [n, t, self.heads, d / self.heads])?;
        s.tape.permute(x, &[0, 2, 1, 3])
    }

    /// Keys laid onto their `g_h×g_w` grid, convolved depthwise, laid back out.
    pub fn contextual_keys<T: Element>(&self, s: &mut Session<'_, T>, keys: Var, grid: (usize, usize)) -> Result<Var> {
        let sh = s.tape.shape(keys).to_vec();
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        if grid.0 * grid.1 != t {
            return Err(Error::Contract(format!("{t} tokens do not form a {}×{} grid", grid.0, grid.1)));
        }
        let g = s.tape.permute(keys, &[0, 2, 1])?;
        let g = s.tape.reshape(g, [n, d, grid.0, grid.1])?;
        let g = self.context.forward(s, g)?;
        let g = s.tape.reshape(g, [n, d, t])?;
        s.tape.permute(g, &[0, 2, 1])
    }

    /// Returns the residual output and the `N×m×T×T` attention map.
    pub fn forward_with_map<T: Element>(&self, s: &mut Session<'_, T>, z: Var, grid: (usize, usize)) -> Result<(Var, Var)> {
        let sh = s.tape.shape(z).to_vec();
        if sh.len() != 3 {
            return Err(Error::dim("mcsa", format!("expected N×T×D, got {sh:?}")));
        }
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        let dh = d / self.heads;
        let q = self.w_q.forward(s, z)?;
        let k = self.w_k.forward(s, z)?;
        let v = self.w_v.forward(s, z)?;
        let k = self.contextual_keys(s, k, grid)?;
        let q = self.split_heads(s, q)?;
        let k = self.split_heads(s, k)?;
        let v = self.split_heads(s, v)?;
        let kt = s.tape.permute(k, &[0, 1, 3, 2])?;
        let aff = s.tape.matmul(q, kt)?;
        let aff = s.tape.scale(aff, 1.0 / (dh as f64).sqrt())?;
        // heads act as channels of a T×T image
        let aff = self.theta.forward(s, aff)?;
        let aff = s.tape.relu(aff)?;
        let aff = self.phi.forward(s, aff)?;
        let a = s.tape.softmax(aff, 3)?;
        let o = s.tape.matmul(a, v)?;
        let o = s.tape.permute(o, &[0, 2, 1, 3])?;
        let o = s.tape.reshape(o, [n, t, d])?;
        let o = self.w_o.forward(s, o)?;
        Ok((s.tape.add(z, o)?, a))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, z: Var, grid: (usize, usize)) -> Result<Var> {
        Ok(self.forward_with_map(s, z, grid)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Pre-norm layer: `y = mcsa(ln1(x))`, `out = y + mlp(ln2(y))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Mcsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cfg: &ArchConfig) -> Result<Self> {
        let mut b = b.sub(name);
        let d = cfg.embed_dim;
        Ok(Self {
            ln1: LayerNorm::build(&mut b, "ln1", d)?,
            attn: Mcsa::build(&mut b, "attn", d, cfg.heads, cfg.context_kernel)?,
            ln2: LayerNorm::build(&mut b, "ln2", d)?,
            mlp: Mlp {
                fc1: Linear::build(&mut b, "mlp.fc1", d, d * cfg.mlp_ratio, true)?,
                fc2: Linear::build(&mut b, "mlp.fc2", d * cfg.mlp_ratio, d, true)?,
            },
        })
    }

    pub fn forward_with_map<T: Element>(&self, s: &mut Session<'_, T>, x: Var, grid: (usize, usize)) -> Result<(Var, Var)> {
        let h = self.ln1.forward(s, x)?;
        let (y, a) = self.attn.forward_with_map(s, h, grid)?;
        let h = self.ln2.forward(s, y)?;
        let h = self.mlp.forward(s, h)?;
        Ok((s.tape.add(y, h)?, a))
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var, grid: (usize, usize)) -> Result<Var> {
        Ok(self.forward_with_map(s, x, grid)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub embed: PatchEmbed,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
}

/// Token stack after the final norm, plus every layer's attention map.
pub struct TransformerOutput {
    pub tokens: Var,
    pub maps: Vec<Var>,
    pub grid: (usize, usize),
}

impl TransformerEncoder {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ArchConfig) -> Result<Self> {
        let mut b = b.sub("transformer");
        let embed = PatchEmbed::build(&mut b, cfg.patch_size, cfg.tokens(), cfg.embed_dim)?;
        let layers = (0..cfg.depth)
            .map(|i| TransformerLayer::build(&mut b, &format!("layer{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            norm: LayerNorm::build(&mut b, "norm", cfg.embed_dim)?,
        })
    }

    /// Runs embedding, layers and final norm on an image.
    pub fn encode_tokens<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<TransformerOutput> {
        let sh = s.tape.shape(image).to_vec();
        let p = self.embed.patch;
        let x = self.embed.forward(s, image)?;
        let grid = (sh[2] / p, sh[3] / p);
        let mut x = x;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward_with_map(s, x, grid)?;
            x = y;
            maps.push(a);
        }
        let tokens = self.norm.forward(s, x)?;
        Ok(TransformerOutput { tokens, maps, grid })
    }

    /// `N×D×g_h×g_w` feature map.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let out = self.encode_tokens(s, image)?;
        tokens_to_map(s, out.tokens, out.grid)
    }
}

/// `N×T×D` tokens laid out channel-major on their grid.
pub fn tokens_to_map<T: Element>(s: &mut Session<'_, T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let sh = s.tape.shape(tokens).to_vec();
    let x = s.tape.permute(tokens, &[0, 2, 1])?;
    s.tape.reshape(x, [sh[0], sh[2], grid.0, grid.1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_pair_composes_to_identity() {
        let (t, p) = identity_pair::<f64>(3);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::randn([1, 3, 4, 4], 1.0, &mut rng));
        let tv = tape.constant(t);
        let pv = tape.constant(p);
        let h = tape.conv2d(x, tv, None, Conv2dOptions::default()).unwrap();
        let h = tape.relu(h).unwrap();
        let y = tape.conv2d(h, pv, None, Conv2dOptions::default()).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }

    #[test]
    fn desk_encoder_shape() {
        let cfg = ArchConfig::default();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TransformerEncoder::build(&mut Builder::new(&mut store, &mut rng), &cfg).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(Tensor::randn([1, 3, 128, 128], 1.0, &mut rng));
        let y = enc.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 64, 8, 8]);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Mcsa::build(&mut Builder::new(&mut store, &mut rng), "attn", 8, 2, 3).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let zv = Tensor::randn([1, 1, 8], 1.0, &mut rng);
        let z = s.tape.constant(zv.clone());
        let (y, a) = attn.forward_with_map(&mut s, z, (1, 1)).unwrap();
        assert!(s.tape.value(a).data().iter().all(|&v| v == 1.0));
        // token + W_o(W_v z)
        let v = attn.w_v.forward(&mut s, z).unwrap();
        let o = attn.w_o.forward(&mut s, v).unwrap();
        let want = s.tape.add(z, o).unwrap();
        assert!(s.tape.value(y).max_abs_diff(s.tape.value(want)) < 1e-12);
    }

    #[test]
    fn zero_image_embeds_to_positions() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let embed = PatchEmbed::build(&mut Builder::new(&mut store, &mut rng), 16, 64, 64).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(Tensor::zeros([2, 3, 128, 128]));
        let y = embed.forward(&mut s, x).unwrap();
        let pos = store.param(embed.pos_embed);
        let yv = s.tape.value(y);
        for n in 0..2 {
            assert_eq!(&yv.data()[n * 64 * 64..(n + 1) * 64 * 64], pos.data());
        }
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let embed = PatchEmbed::build(&mut Builder::new(&mut store, &mut rng), 4, 4, 6).unwrap();
        let img = Tensor::<f64>::randn([1, 3, 8, 8], 1.0, &mut rng);
        // swap the top-left and bottom-right 4×4 patches
        let mut swapped = img.clone();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = (c * 8 + y) * 8 + x;
                    let b = (c * 8 + y + 4) * 8 + x + 4;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let pos = store.param(embed.pos_embed).clone();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let a = s.tape.constant(img);
        let b = s.tape.constant(swapped);
        let ya = embed.forward(&mut s, a).unwrap();
        let yb = embed.forward(&mut s, b).unwrap();
        let (va, vb) = (s.tape.value(ya).clone(), s.tape.value(yb).clone());
        let content = |v: &Tensor<f64>, t: usize, j: usize| v.at(&[0, t, j]) - pos.at(&[t, j]);
        for j in 0..6 {
            assert!((content(&va, 0, j) - content(&vb, 3, j)).abs() < 1e-12);
            assert!((content(&va, 3, j) - content(&vb, 0, j)).abs() < 1e-12);
            assert!((content(&va, 1, j) - content(&vb, 1, j)).abs() < 1e-12);
        }
    }
}
