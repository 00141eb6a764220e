use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub groups: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32, groups: 8 }
    }
}

/// Two conv + group-norm + ReLU blocks, a 1-channel projection, bilinear
/// upsampling to the input size and a sigmoid.
#[derive(Debug, Clone)]
pub struct MaskHead {
    blocks: [(Conv2d, GroupNorm); 2],
    project: Conv2d,
    out_size: (usize, usize),
}

impl MaskHead {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, cfg: HeadConfig, out_size: (usize, usize)) -> Result<Self> {
        let same = Conv2dArgs { stride: 1, padding: 1 };
        let block = |pb: &mut ParamBuilder, i: usize, cin: usize| -> Result<(Conv2d, GroupNorm)> {
            let mut b = pb.pp(&format!("block{i}"));
            Ok((
                Conv2d::new(&mut b.pp("conv"), cin, cfg.hidden, 3, same, true)?,
                GroupNorm::new(&mut b.pp("norm"), cfg.groups, cfg.hidden)?,
            ))
        };
        Ok(Self {
            blocks: [block(pb, 1, in_ch)?, block(pb, 2, cfg.hidden)?],
            project: Conv2d::new(&mut pb.pp("project"), cfg.hidden, 1, 1, Conv2dArgs::default(), true)?,
            out_size,
        })
    }

    /// Sets every weight to zero.
    pub fn zero(&self) {
        for (conv, norm) in &self.blocks {
            conv.zero();
            norm.gamma.fill(0.0);
            norm.beta.fill(0.0);
        }
        self.project.zero();
    }

    /// Refined finest feature -> soft mask `1 x H x W` in `[0, 1]`.
    pub fn decode_mask(&self, refined_f3: &Tensor) -> Result<Tensor> {
        if !refined_f3.all_finite() {
            return Err(Error::NonFinite("decoder input".into()));
        }
        let mut h = refined_f3.clone();
        for (conv, norm) in &self.blocks {
            h = norm.forward(&conv.forward(&h)?)?.relu()?;
        }
        let (oh, ow) = self.out_size;
        self.project.forward(&h)?.upsample_bilinear(oh, ow)?.sigmoid()
    }
}
