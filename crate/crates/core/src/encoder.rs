//! Five-stage convolutional downsampling branch.

use rand::Rng;

use crate::config::{ArchConfig, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBnRelu, Session};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug)]
pub struct UnetEncoder {
    /// One or two conv-bn-relu blocks per stage.
    pub stages: Vec<Vec<ConvBnRelu>>,
}

/// Pre-pool feature map of every stage plus the pooled output of the last one.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl UnetEncoder {
    pub fn build<T: Element, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ArchConfig) -> Result<Self> {
        let mut b = b.sub("encoder");
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = 3;
        for i in 0..STAGES {
            let c = cfg.stage_width(i);
            let mut blocks = vec![ConvBnRelu::build3x3(&mut b, &format!("stage{i}.0"), c_in, c)?];
            if cfg.double_conv {
                blocks.push(ConvBnRelu::build3x3(&mut b, &format!("stage{i}.1"), c, c)?);
            }
            stages.push(blocks);
            c_in = c;
        }
        Ok(Self { stages })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<EncoderOutput> {
        let shape = s.tape.shape(image).to_vec();
        let unit = 1 << self.stages.len();
        if shape.len() != 4 || !shape[2].is_multiple_of(unit) || !shape[3].is_multiple_of(unit) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::dim(
                "unet_encode",
                format!("input {shape:?} must be NCHW with extents divisible by {unit}"),
            ));
        }
        let mut x = image;
        let mut skips = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for block in blocks {
                x = block.forward(s, x)?;
            }
            skips.push(x);
            x = s.tape.maxpool2d(x, 2)?;
        }
        Ok(EncoderOutput { skips, bottleneck: x })
    }
}
