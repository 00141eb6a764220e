//! Most-likely-class selection from the similarity matrix and text-guided
//! refinement of the finest feature map.

use crate::clip::{ClipBackend, PromptBank};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Mlp, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};
use crate::types::{column_sums, ImageSet, Mask, MASK_THRESHOLD};

/// Index of the largest entry; the lowest index wins ties.
pub fn most_likely_class(upsilon: &[f64]) -> Result<usize> {
    if upsilon.is_empty() {
        return Err(Error::shape("most_likely_class", "empty probability vector"));
    }
    let mut best = 0;
    for (i, v) in upsilon.iter().enumerate() {
        if *v > upsilon[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct RegParams {
    pub mlp3: Mlp,
    pub ffn4: Conv2d,
    pub ffn5: Conv2d,
}

impl RegParams {
    /// `prompts` is P, `channels` the width of F3, `dim` the embedding width.
    pub fn new(pb: &mut ParamBuilder, prompts: usize, channels: usize, dim: usize) -> Result<Self> {
        let unit = Conv2dArgs::default();
        Ok(Self {
            mlp3: Mlp::new(&mut pb.pp("mlp3"), &[prompts, prompts, prompts])?,
            ffn4: Conv2d::new(&mut pb.pp("ffn4"), channels, dim, 1, unit, true)?,
            ffn5: Conv2d::new(&mut pb.pp("ffn5"), dim, channels, 1, unit, true)?,
        })
    }

    /// `Softmax(max over rows of MLP3(s))`, shape `1 x P`.
    pub fn class_probabilities(&self, s: &Tensor) -> Result<Tensor> {
        let (n, p) = s.dims2()?;
        if n == 0 || p != self.mlp3.layers[0].in_dim() {
            return Err(Error::shape(
                "class_probabilities",
                format!("{n}x{p} similarities for {} prompts", self.mlp3.layers[0].in_dim()),
            ));
        }
        self.mlp3.forward(s)?.max_keepdim(0)?.softmax(1)
    }

    /// `FFN4(f) ⊙ h` with `h` broadcast over every position.
    pub fn gate(&self, f3: &Tensor, h_txt_star: &Tensor) -> Result<Tensor> {
        if !f3.all_finite() {
            return Err(Error::NonFinite("regularize input".into()));
        }
        let d = self.ffn4.out_channels();
        if h_txt_star.numel() != d {
            return Err(Error::shape(
                "regularize",
                format!("embedding of {} values, FFN4 emits {d}", h_txt_star.numel()),
            ));
        }
        self.ffn4.forward(f3)?.mul(&h_txt_star.reshape(&[d, 1, 1])?)
    }

    /// `FFN5(FFN4(f) ⊙ PAD(h))`.
    pub fn regularize(&self, f3: &Tensor, h_txt_star: &Tensor) -> Result<Tensor> {
        self.ffn5.forward(&self.gate(f3, h_txt_star)?)
    }
}

/// `‖M ⊙ Softmax(f)‖₂` with the softmax taken over spatial positions of each
/// channel. A mask of another size is area-resampled to the map first.
pub fn masked_attention_norm(f: &Tensor, mask: &Mask) -> Result<f64> {
    let (c, h, w) = f.dims3()?;
    let mask = if (mask.height, mask.width) == (h, w) {
        mask.clone()
    } else {
        mask.downsample(h, w, MASK_THRESHOLD)?
    };
    let attn = f.detach().reshape(&[c, h * w])?.softmax(1)?;
    let sq: f64 = attn
        .data()
        .chunks(h * w)
        .flat_map(|ch| ch.iter().zip(&mask.data).map(|(a, m)| (a * m).powi(2)))
        .sum();
    Ok(sq.sqrt())
}

/// One-hot over the bank for the class whose prompt best matches the
/// foreground-only images, plus that class index.
pub fn gt_class_target(set: &ImageSet, bank: &PromptBank, clip: &dyn ClipBackend) -> Result<(Vec<f64>, usize)> {
    gt_class_target_with(set, &clip.encode_prompts(bank)?, clip)
}

/// As [`gt_class_target`] with the `P x D` prompt embeddings already encoded.
pub fn gt_class_target_with(set: &ImageSet, h_txt: &Tensor, clip: &dyn ClipBackend) -> Result<(Vec<f64>, usize)> {
    let masks = set.gt_masks.as_ref().ok_or(Error::MissingMasks)?;
    let masked = set
        .images
        .iter()
        .zip(masks)
        .map(|(img, m)| img.masked(m))
        .collect::<Result<Vec<_>>>()?;
    let (p, _) = h_txt.dims2()?;
    let h_img = clip.encode_images(&masked)?;
    let s_gt = h_img.matmul(&h_txt.t()?)?;
    let idx = most_likely_class(&column_sums(s_gt.data(), p))?;
    let mut one_hot = vec![0.0; p];
    one_hot[idx] = 1.0;
    Ok((one_hot, idx))
}
