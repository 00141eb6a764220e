//! Set-wide feature correspondence on the coarsest pyramid level: every map
//! attends to every other map of the set, and the resulting messages are
//! blended with per-position softmax weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, ConvFfn, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsfcConfig {
    pub heads: usize,
    /// Hidden width of the update feed-forward; 0 means the feature width.
    pub ffn_hidden: usize,
}

impl Default for IsfcConfig {
    fn default() -> Self {
        Self { heads: 4, ffn_hidden: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct IsfcParams {
    pub attention: Attention,
    pub ffn1: ConvFfn,
    pub fuse_conv: Conv2d,
}

impl IsfcParams {
    pub fn new(pb: &mut ParamBuilder, channels: usize, cfg: IsfcConfig) -> Result<Self> {
        let hidden = if cfg.ffn_hidden == 0 { channels } else { cfg.ffn_hidden };
        Ok(Self {
            attention: Attention::new(&mut pb.pp("attention"), channels, cfg.heads)?,
            ffn1: ConvFfn::new(&mut pb.pp("ffn1"), &[2 * channels, hidden, channels])?,
            fuse_conv: Conv2d::new(
                &mut pb.pp("fuse_conv"),
                channels,
                channels,
                3,
                Conv2dArgs { stride: 1, padding: 1 },
                true,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.attention.dim()
    }

    /// Message from `f_j` to `f_i`: `f_i + FFN1(f_i ‖ Att(f_i, f_j, f_j))`
    /// with spatial positions as tokens.
    pub fn update(&self, f_i: &Tensor, f_j: &Tensor) -> Result<Tensor> {
        if f_i.shape() != f_j.shape() {
            return Err(Error::shape(
                "isfc update",
                format!("{:?} vs {:?}", f_i.shape(), f_j.shape()),
            ));
        }
        let (c, h, w) = f_i.dims3()?;
        if c != self.channels() {
            return Err(Error::shape(
                "isfc update",
                format!("{c} channels, block width {}", self.channels()),
            ));
        }
        let tokens = |f: &Tensor| f.reshape(&[c, h * w])?.t();
        let att = self.attention.forward(&tokens(f_i)?, &tokens(f_j)?)?;
        let att = att.t()?.reshape(&[c, h, w])?;
        f_i.add(&self.ffn1.forward(&Tensor::cat(&[f_i.clone(), att], 0)?)?)
    }

    /// Update of member `i` from member `j` of `set`.
    pub fn pairwise_update(&self, set: &[Tensor], i: usize, j: usize) -> Result<Tensor> {
        if i == j {
            return Err(Error::SelfEdge(i));
        }
        let get = |k: usize| {
            set.get(k)
                .ok_or_else(|| Error::shape("isfc pairwise_update", format!("index {k} outside a set of {}", set.len())))
        };
        self.update(get(i)?, get(j)?)
    }

    /// Blending weights: softmax across the update axis independently for
    /// every channel and position. Shape `(N-1) x C x H x W`.
    pub fn weights(updates: &[Tensor]) -> Result<Tensor> {
        if updates.is_empty() {
            return Err(Error::EmptyUpdates);
        }
        Tensor::stack(updates, 0)?.softmax(0)
    }

    /// `Conv(Σ_j α_j ⊙ update_j)`.
    pub fn aggregate(&self, updates: &[Tensor]) -> Result<Tensor> {
        let alpha = Self::weights(updates)?;
        let stacked = Tensor::stack(updates, 0)?;
        let shape = updates[0].shape().to_vec();
        let blended = alpha.mul(&stacked)?.sum_keepdim(0)?.reshape(&shape)?;
        self.fuse_conv.forward(&blended)
    }

    /// Refines every member against all others; a single map is returned
    /// unchanged.
    pub fn refine_set(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        if features.len() < 2 {
            return Ok(features.to_vec());
        }
        (0..features.len())
            .map(|i| {
                let updates = (0..features.len())
                    .filter(|&j| j != i)
                    .map(|j| self.pairwise_update(features, i, j))
                    .collect::<Result<Vec<_>>>()?;
                self.aggregate(&updates)
            })
            .collect()
    }
}
