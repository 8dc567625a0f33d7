//! End-to-end model: encoders, fusion, skip-path context blocks, decoder and head.

mod rfb;

pub use rfb::{Rfb, RfbBranch, BRANCH_SIZES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ArchConfig, Variant, STAGES};
use crate::encoder::UnetEncoder;
use crate::error::{Error, Result};
use crate::fusion::{ConcatFusion, FusionBlock};
use crate::nn::{Builder, Conv2d, ConvBnRelu, ParamStore, Session};
use crate::tensor::{Element, Tensor, Var};
use crate::vit::TransformerEncoder;

/// Mirror decoder: per stage, upsample to the skip extent, concatenate, conv-bn-relu.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Deepest stage first.
    pub stages: Vec<Vec<ConvBnRelu>>,
}

impl Decoder {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ArchConfig) -> Result<Self> {
        let mut b = b.sub("decoder");
        let mut c_prev = cfg.fused_width();
        let mut stages = Vec::with_capacity(STAGES);
        for j in (0..STAGES).rev() {
            let c = cfg.stage_width(j);
            let mut blocks = vec![ConvBnRelu::build3x3(&mut b, &format!("stage{j}.0"), c_prev + c, c)?];
            if cfg.double_conv {
                blocks.push(ConvBnRelu::build3x3(&mut b, &format!("stage{j}.1"), c, c)?);
            }
            stages.push(blocks);
            c_prev = c;
        }
        Ok(Self { stages })
    }

    /// `skips` ordered shallowest first, as the encoder produces them.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, fused: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::dim(
                "decode",
                format!("{} skips for {} stages", skips.len(), self.stages.len()),
            ));
        }
        let mut x = fused;
        for (blocks, j) in self.stages.iter().zip((0..skips.len()).rev()) {
            let skip = skips[j];
            let (xs, ks) = (s.tape.shape(x).to_vec(), s.tape.shape(skip).to_vec());
            if ks.len() != 4 || xs.len() != 4 || ks[2] != 2 * xs[2] || ks[3] != 2 * xs[3] || ks[0] != xs[0] {
                return Err(Error::dim(
                    "decode",
                    format!("stage {j}: skip {ks:?} does not pair with incoming {xs:?}"),
                ));
            }
            let up = s.tape.upsample_bilinear(x, ks[2], ks[3])?;
            x = s.tape.concat(&[up, skip], 1)?;
            for block in blocks {
                x = block.forward(s, x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Bilinear(FusionBlock),
    Concat(ConcatFusion),
    /// Transformer map resampled to the bottleneck extent and projected to the fused width.
    TransformerOnly(Conv2d),
    /// Convolutional bottleneck used as is.
    UnetOnly,
}

/// Module layout of one model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UtNet {
    pub config: ArchConfig,
    pub encoder: Option<UnetEncoder>,
    pub transformer: Option<TransformerEncoder>,
    pub fusion: Fusion,
    pub rfbs: Vec<Rfb>,
    pub decoder: Decoder,
    pub head: Conv2d,
}

/// Forward output together with intermediates useful for inspection.
pub struct ForwardOutput {
    /// `N×2×H×W` probabilities, channel 0 disc, channel 1 cup.
    pub probs: Var,
    pub attention_maps: Vec<Var>,
    pub channel_map: Option<Var>,
    pub spatial_map: Option<Var>,
}

pub const DISC: usize = 0;
pub const CUP: usize = 1;

impl UtNet {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let c_f = cfg.fused_width();
        let encoder = if v.uses_unet() { Some(UnetEncoder::build(b, cfg)?) } else { None };
        let transformer = if v.uses_transformer() {
            Some(TransformerEncoder::build(b, cfg)?)
        } else {
            None
        };
        let fusion = match v {
            Variant::Full | Variant::BilinearFusionNoRfb => {
                Fusion::Bilinear(FusionBlock::build(b, cfg.embed_dim, c_f, c_f)?)
            }
            Variant::ConcatFusion => Fusion::Concat(ConcatFusion::build(b, cfg.embed_dim, c_f, c_f)?),
            Variant::TransformerOnly => {
                let mut fb = b.sub("fusion");
                Fusion::TransformerOnly(Conv2d::pointwise(&mut fb, "align_z", cfg.embed_dim, c_f, 1.0)?)
            }
            Variant::UnetOnly => Fusion::UnetOnly,
        };
        let rfbs = if v.uses_rfb() {
            (0..STAGES)
                .map(|i| Rfb::build(b, &format!("rfb{i}"), cfg.stage_width(i)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let decoder = Decoder::build(b, cfg)?;
        let head = Conv2d::pointwise(&mut b.sub("head"), "conv", cfg.base_width, 2, 1.0)?;
        Ok(Self {
            config: cfg.clone(),
            encoder,
            transformer,
            fusion,
            rfbs,
            decoder,
            head,
        })
    }

    /// Builds the layout and draws initial parameters from `seed`.
    pub fn init(cfg: &ArchConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(&mut Builder::new(&mut store, &mut rng), cfg)?;
        Ok((net, store))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let unit = (1usize << STAGES).max(if cfg.variant.uses_transformer() { cfg.patch_size } else { 1 });
        let ok = shape.len() == 4 && shape[1] == 3 && shape[2] > 0 && shape[2].is_multiple_of(unit) && shape[3] > 0 && shape[3].is_multiple_of(unit);
        if !ok {
            return Err(Error::dim(
                "forward",
                format!("image {shape:?} must be N×3×H×W with H, W positive multiples of {unit}"),
            ));
        }
        if cfg.variant.uses_transformer() && (shape[2] != cfg.image_size || shape[3] != cfg.image_size) {
            return Err(Error::dim(
                "forward",
                format!("image {shape:?} does not match the configured extent {}", cfg.image_size),
            ));
        }
        Ok(())
    }

    pub fn forward_full<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<ForwardOutput> {
        let shape = s.tape.shape(image).to_vec();
        self.check_input(&shape)?;
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let enc = match &self.encoder {
            Some(e) => Some(e.forward(s, image)?),
            None => None,
        };
        let tr = match &self.transformer {
            Some(t) => Some(t.encode_tokens(s, image)?),
            None => None,
        };
        let mut attention_maps = Vec::new();
        let z = match tr {
            Some(out) => {
                attention_maps = out.maps;
                Some(crate::vit::tokens_to_map(s, out.tokens, out.grid)?)
            }
            None => None,
        };
        let (bh, bw) = (h >> STAGES, w >> STAGES);
        let (mut channel_map, mut spatial_map) = (None, None);
        let fused = match (&self.fusion, &enc, z) {
            (Fusion::Bilinear(f), Some(e), Some(z)) => {
                let out = f.forward_full(s, z, e.bottleneck)?;
                channel_map = Some(out.channel_map);
                spatial_map = Some(out.spatial_map);
                out.out
            }
            (Fusion::Concat(f), Some(e), Some(z)) => f.forward(s, z, e.bottleneck)?,
            (Fusion::TransformerOnly(align), None, Some(z)) => {
                let z = s.tape.upsample_bilinear(z, bh, bw)?;
                align.forward(s, z)?
            }
            (Fusion::UnetOnly, Some(e), None) => e.bottleneck,
            _ => return Err(Error::Contract("model layout does not match its variant".into())),
        };
        let skips: Vec<Var> = match &enc {
            Some(e) if !self.rfbs.is_empty() => e
                .skips
                .iter()
                .zip(&self.rfbs)
                .map(|(&k, r)| r.forward(s, k))
                .collect::<Result<_>>()?,
            Some(e) => e.skips.clone(),
            None => (0..STAGES)
                .map(|i| {
                    let c = self.config.stage_width(i);
                    s.tape.constant(Tensor::zeros([n, c, h >> i, w >> i]))
                })
                .collect(),
        };
        let x = self.decoder.forward(s, fused, &skips)?;
        let logits = self.head.forward(s, x)?;
        let probs = s.tape.sigmoid(logits)?;
        Ok(ForwardOutput {
            probs,
            attention_maps,
            channel_map,
            spatial_map,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        Ok(self.forward_full(s, image)?.probs)
    }
}
