//! Common-semantics mining from the similarity bundle and modulation of the
//! mid-level feature map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Mlp, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};
use crate::types::ClipBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    pub fusion_heads: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self { fusion_heads: 1 }
    }
}

/// The `k` prompt rows with the largest column sums, in descending order.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub rows: Tensor,
    pub indices: Vec<usize>,
}

/// Indices of the `k` largest values, descending; equal values keep the
/// lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::TopKRange { k, p: values.len() });
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    Ok(idx)
}

pub fn distill_text(bundle: &ClipBundle, k: usize) -> Result<Distilled> {
    let indices = top_k_indices(&bundle.sigma, k)?;
    let rows = indices
        .iter()
        .map(|&i| bundle.h_txt.narrow(0, i, 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Distilled {
        rows: Tensor::cat(&rows, 0)?,
        indices,
    })
}

#[derive(Debug, Clone)]
pub struct InteractionParams {
    pub mlp1: Mlp,
    pub mlp2: Mlp,
    pub fusion: Attention,
    pub ffn2: Conv2d,
    pub ffn3: Conv2d,
    pub coarse_decoder: Mlp,
    coarse_size: (usize, usize),
}

impl InteractionParams {
    /// `channels` is the width of the modulated map, `dim` the embedding
    /// width.
    pub fn new(
        pb: &mut ParamBuilder,
        channels: usize,
        dim: usize,
        coarse_size: (usize, usize),
        cfg: InteractionConfig,
    ) -> Result<Self> {
        let unit = Conv2dArgs::default();
        Ok(Self {
            mlp1: Mlp::new(&mut pb.pp("mlp1"), &[2 * dim, dim, dim])?,
            mlp2: Mlp::new(&mut pb.pp("mlp2"), &[dim, dim, dim])?,
            fusion: Attention::new(&mut pb.pp("fusion"), dim, cfg.fusion_heads)?,
            ffn2: Conv2d::new(&mut pb.pp("ffn2"), channels, dim, 1, unit, true)?,
            ffn3: Conv2d::new(&mut pb.pp("ffn3"), dim, channels, 1, unit, true)?,
            coarse_decoder: Mlp::new(&mut pb.pp("coarse_decoder"), &[dim, dim, coarse_size.0 * coarse_size.1])?,
            coarse_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.fusion.dim()
    }

    pub fn coarse_size(&self) -> (usize, usize) {
        self.coarse_size
    }

    /// `ĥ_i = MLP1([h_i ‖ mean_j h_j])`.
    pub fn refine_image_embeddings(&self, h_img: &Tensor) -> Result<Tensor> {
        let (n, d) = h_img.dims2()?;
        if n == 0 || d != self.dim() {
            return Err(Error::shape(
                "refine_image_embeddings",
                format!("{n}x{d} embeddings, width {}", self.dim()),
            ));
        }
        let mean = h_img.mean_keepdim(0)?;
        let tiled = Tensor::cat(&vec![mean; n], 0)?;
        self.mlp1.forward(&Tensor::cat(&[h_img.clone(), tiled], 1)?)
    }

    /// `z_i = ĥ_i + MLP2(Att(ĥ_i, T, T))` with `T` the refined image rows
    /// stacked over the distilled text rows.
    pub fn fuse(&self, h_hat: &Tensor, distilled: &Tensor) -> Result<Tensor> {
        let (_, d) = h_hat.dims2()?;
        let (_, d2) = distilled.dims2()?;
        if d != d2 {
            return Err(Error::shape("fuse", format!("image width {d}, text width {d2}")));
        }
        let tokens = Tensor::cat(&[h_hat.clone(), distilled.clone()], 0)?;
        h_hat.add(&self.mlp2.forward(&self.fusion.forward(h_hat, &tokens)?)?)
    }

    /// `FFN2(f) ⊙ z` with `z` broadcast over every position.
    pub fn gate(&self, f2: &Tensor, z: &Tensor) -> Result<Tensor> {
        if !f2.all_finite() {
            return Err(Error::NonFinite("modulate input".into()));
        }
        let d = self.ffn2.out_channels();
        if z.numel() != d {
            return Err(Error::shape("modulate", format!("embedding of {} values, FFN2 emits {d}", z.numel())));
        }
        self.ffn2.forward(f2)?.mul(&z.reshape(&[d, 1, 1])?)
    }

    /// `FFN3(FFN2(f) ⊙ PAD(z))`.
    pub fn modulate(&self, f2: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.ffn3.forward(&self.gate(f2, z)?)
    }

    /// Soft coarse mask `1 x Hc x Wc` from one refined embedding.
    pub fn coarse_decode(&self, h_hat_i: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if h_hat_i.numel() != d {
            return Err(Error::shape("coarse_decode", format!("{} values, width {d}", h_hat_i.numel())));
        }
        let (hc, wc) = self.coarse_size;
        self.coarse_decoder
            .forward(&h_hat_i.reshape(&[1, d])?)?
            .sigmoid()?
            .reshape(&[1, hc, wc])
    }
}

/// Everything the interaction stage produces for one set.
#[derive(Debug, Clone)]
pub struct InteractionOutput {
    pub refined: Vec<Tensor>,
    pub h_hat: Tensor,
    pub z: Tensor,
    pub coarse: Vec<Tensor>,
    pub distilled: Vec<usize>,
}

impl InteractionParams {
    pub fn forward(&self, f2: &[Tensor], bundle: &ClipBundle, k: usize) -> Result<InteractionOutput> {
        if f2.len() != bundle.n() {
            return Err(Error::shape(
                "interaction",
                format!("{} feature maps, {} image embeddings", f2.len(), bundle.n()),
            ));
        }
        let distilled = distill_text(bundle, k)?;
        let h_hat = self.refine_image_embeddings(&bundle.h_img)?;
        let z = self.fuse(&h_hat, &distilled.rows)?;
        let mut refined = Vec::with_capacity(f2.len());
        let mut coarse = Vec::with_capacity(f2.len());
        for (i, f) in f2.iter().enumerate() {
            refined.push(self.modulate(f, &z.narrow(0, i, 1)?)?);
            coarse.push(self.coarse_decode(&h_hat.narrow(0, i, 1)?)?);
        }
        Ok(InteractionOutput {
            refined,
            h_hat,
            z,
            coarse,
            distilled: distilled.indices,
        })
    }
}
