//! Shared domain records: image sets, feature pyramids, CLIP similarity
//! bundles, mask batches and the training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::tensor::Tensor;

/// Soft masks at or above this value count as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Default square raster size after ingestion.
pub const DEFAULT_RESOLUTION: usize = 224;

/// RGB raster, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{} values for {height}x{width}x3", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Planar `3 x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut planar = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * hw + p] = px[c];
            }
        }
        Tensor::from_vec(planar, &[3, self.height, self.width]).expect("consistent shape")
    }

    /// Zeroes every pixel whose mask value is below the threshold.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        if (mask.height, mask.width) != (self.height, self.width) {
            return Err(Error::shape(
                "image.masked",
                format!(
                    "mask {}x{} vs image {}x{}",
                    mask.height, mask.width, self.height, self.width
                ),
            ));
        }
        let mut out = self.clone();
        for (px, m) in out.data.chunks_exact_mut(3).zip(&mask.data) {
            if *m < MASK_THRESHOLD {
                px.fill(0.0);
            }
        }
        Ok(out)
    }
}

/// Single-channel mask, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::shape("mask", format!("{c} channels")));
        }
        Self::new(h, w, t.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, self.height, self.width]).expect("consistent shape")
    }

    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| if *v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// Area-average downsampling to `oh x ow`, then thresholding.
    pub fn downsample(&self, oh: usize, ow: usize, threshold: f64) -> Result<Mask> {
        if oh == 0 || ow == 0 || oh > self.height || ow > self.width {
            return Err(Error::shape(
                "mask.downsample",
                format!("{}x{} -> {oh}x{ow}", self.height, self.width),
            ));
        }
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            let y0 = oy * self.height / oh;
            let y1 = ((oy + 1) * self.height / oh).max(y0 + 1);
            for ox in 0..ow {
                let x0 = ox * self.width / ow;
                let x1 = ((ox + 1) * self.width / ow).max(x0 + 1);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += self.data[y * self.width + x0..y * self.width + x1].iter().sum::<f64>();
                }
                let mean = s / ((y1 - y0) * (x1 - x0)) as f64;
                out[oy * ow + ox] = if mean >= threshold { 1.0 } else { 0.0 };
            }
        }
        Mask::new(oh, ow, out)
    }
}

/// `N` images sharing one common object, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub gt_masks: Option<Vec<Mask>>,
    pub set_id: String,
    /// Metadata only; never read by the model.
    pub class_hint: Option<String>,
}

impl ImageSet {
    pub fn new(set_id: impl Into<String>, images: Vec<Image>) -> Self {
        Self {
            images,
            gt_masks: None,
            set_id: set_id.into(),
            class_hint: None,
        }
    }

    pub fn with_masks(mut self, masks: Vec<Mask>) -> Self {
        self.gt_masks = Some(masks);
        self
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height, i.width))
    }

    /// Reorders images (and masks) so that entry `k` of the result is entry
    /// `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> ImageSet {
        ImageSet {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            gt_masks: self
                .gt_masks
                .as_ref()
                .map(|m| order.iter().map(|&i| m[i].clone()).collect()),
            set_id: self.set_id.clone(),
            class_hint: self.class_hint.clone(),
        }
    }
}

/// Checks every [`ImageSet`] invariant and returns the set unchanged.
pub fn validate_image_set(set: ImageSet) -> Result<ImageSet> {
    let Some((h, w)) = set.resolution() else {
        return Err(Error::EmptySet);
    };
    for (index, img) in set.images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ImageSize {
                index,
                got_h: img.height,
                got_w: img.width,
                want_h: h,
                want_w: w,
            });
        }
        if img.data.len() != h * w * 3 || img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "image {index}: pixel values must be finite and in [0, 1]"
            )));
        }
    }
    if let Some(masks) = &set.gt_masks {
        if masks.len() != set.images.len() {
            return Err(Error::MaskCount {
                images: set.images.len(),
                masks: masks.len(),
            });
        }
        for (index, m) in masks.iter().enumerate() {
            if (m.height, m.width) != (h, w) {
                return Err(Error::MaskSize {
                    index,
                    got_h: m.height,
                    got_w: m.width,
                    want_h: h,
                    want_w: w,
                });
            }
            if !m.is_binary() {
                return Err(Error::Data(format!("mask {index} is not binary")));
            }
        }
    }
    Ok(set)
}

/// Coarse-to-fine backbone features for one image.
///
/// `lateral2`/`lateral3` are the skip contributions the top-down path adds at
/// the two finer levels; they let a refined coarser level be re-propagated.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub(crate) lateral2: Tensor,
    pub(crate) lateral3: Tensor,
}

impl FeaturePyramid {
    pub fn new(f1: Tensor, f2: Tensor, f3: Tensor, lateral2: Tensor, lateral3: Tensor) -> Result<Self> {
        let p = Self {
            f1,
            f2,
            f3,
            lateral2,
            lateral3,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn level(&self, level: usize) -> Option<&Tensor> {
        match level {
            1 => Some(&self.f1),
            2 => Some(&self.f2),
            3 => Some(&self.f3),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [&self.f1, &self.f2, &self.f3]
            .iter()
            .map(|t| t.dims3().map(|(_, h, w)| (h, w)))
            .collect::<Result<Vec<_>>>()?;
        if !sizes.windows(2).all(|s| s[0].0 <= s[1].0 && s[0].1 <= s[1].1) {
            return Err(Error::shape(
                "feature_pyramid",
                format!("spatial sizes must not shrink from coarse to fine: {sizes:?}"),
            ));
        }
        for (name, t) in [("f1", &self.f1), ("f2", &self.f2), ("f3", &self.f3)] {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("feature {name}")));
            }
        }
        Ok(())
    }
}

/// CLIP embeddings for a set and a prompt bank, plus their similarities.
#[derive(Debug, Clone)]
pub struct ClipBundle {
    /// `N x D`, unit rows.
    pub h_img: Tensor,
    /// `P x D`, unit rows.
    pub h_txt: Tensor,
    /// `N x P` cosine similarities.
    pub s: Tensor,
    /// Column sums of `s` (length `P`).
    pub sigma: Vec<f64>,
    pub d: usize,
}

impl ClipBundle {
    pub fn n(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn p(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("h_img", &self.h_img), ("h_txt", &self.h_txt)] {
            let (_, d) = m.dims2()?;
            if d != self.d {
                return Err(Error::shape("clip_bundle", format!("{name} width {d} != {}", self.d)));
            }
            for row in m.data().chunks(d) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::Data(format!("{name} row has norm {norm}")));
                }
            }
        }
        let p = self.p();
        if self.s.data().iter().any(|v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(Error::Data("similarity outside [-1, 1]".into()));
        }
        let sums = column_sums(self.s.data(), p);
        if sums.iter().zip(&self.sigma).any(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(Error::Data("sigma does not match column sums of s".into()));
        }
        Ok(())
    }
}

pub(crate) fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Predicted soft masks (`1 x H x W` tensors) with optional targets.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    pub pred: Vec<Tensor>,
    pub gt: Option<Vec<Mask>>,
    pub coarse_pred: Option<Vec<Tensor>>,
}

impl MaskBatch {
    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn soft_masks(&self) -> Result<Vec<Mask>> {
        self.pred.iter().map(Mask::from_tensor).collect()
    }

    pub fn binarized(&self, threshold: f64) -> Result<Vec<Mask>> {
        Ok(self
            .soft_masks()?
            .iter()
            .map(|m| m.binarize(threshold))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleToggles {
    pub isfc: bool,
    pub clip_interaction: bool,
    pub clip_regularization: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            isfc: true,
            clip_interaction: true,
            clip_regularization: true,
        }
    }
}

impl ModuleToggles {
    pub const BASELINE: ModuleToggles = ModuleToggles {
        isfc: false,
        clip_interaction: false,
        clip_regularization: false,
    };

    /// All eight on/off combinations, baseline first.
    pub fn all_combinations() -> Vec<ModuleToggles> {
        (0..8u8)
            .map(|b| ModuleToggles {
                isfc: b & 1 != 0,
                clip_interaction: b & 2 != 0,
                clip_regularization: b & 4 != 0,
            })
            .collect()
    }

    pub fn uses_clip(&self) -> bool {
        self.clip_interaction || self.clip_regularization
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub iou: bool,
    pub cs: bool,
    pub c: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            iou: true,
            cs: true,
            c: true,
        }
    }
}

pub const PASCAL_VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "dining table",
    "dog",
    "horse",
    "motorbike",
    "person",
    "potted plant",
    "sheep",
    "sofa",
    "train",
    "tv monitor",
];

pub const DEFAULT_PROMPT_TEMPLATE: &str = "A photo of a [CLASS]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the coarse segmentation loss.
    pub lambda1: f64,
    /// Weight of the classification loss.
    pub lambda2: f64,
    /// Number of distilled prompt embeddings.
    pub k: usize,
    pub prompt_vocabulary: Vec<String>,
    pub prompt_template: String,
    pub set_size_train: usize,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    pub modules: ModuleToggles,
    pub losses: LossToggles,
    pub mask_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            k: 5,
            prompt_vocabulary: PASCAL_VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            set_size_train: 5,
            optimizer: OptimizerConfig::default(),
            steps: 1000,
            seed: 0,
            modules: ModuleToggles::default(),
            losses: LossToggles::default(),
            mask_threshold: MASK_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.prompt_vocabulary.len();
        if self.k == 0 || self.k > p {
            return Err(Error::TopKRange { k: self.k, p });
        }
        crate::clip::check_template(&self.prompt_template)?;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.set_size_train == 0 {
            return Err(Error::Config("set_size_train must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("mask_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> Image {
        Image::filled(h, w, [0.2, 0.4, 0.6])
    }

    #[test]
    fn valid_pair_is_returned_unchanged() {
        let set = ImageSet::new("s", vec![img(64, 64), img(64, 64)]);
        assert_eq!(validate_image_set(set.clone()).unwrap(), set);
    }

    #[test]
    fn mask_count_mismatch() {
        let m = Mask::new(8, 8, vec![0.0; 64]).unwrap();
        let set = ImageSet::new("s", vec![img(8, 8), img(8, 8), img(8, 8)]).with_masks(vec![m.clone(), m]);
        let err = validate_image_set(set).unwrap_err();
        assert!(err.to_string().contains("mask count mismatch"), "{err}");
    }

    #[test]
    fn size_mismatch_names_index() {
        let mut images = vec![img(64, 64); 5];
        images[3] = img(64, 32);
        match validate_image_set(ImageSet::new("s", images)) {
            Err(Error::ImageSize { index: 3, got_w: 32, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_set_rejected() {
        assert!(matches!(
            validate_image_set(ImageSet::new("s", vec![])),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn downsample_area_then_threshold() {
        // 4x4 with the top-left 2x2 block plus one extra pixel set.
        let mut d = vec![0.0; 16];
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)] {
            d[y * 4 + x] = 1.0;
        }
        let m = Mask::new(4, 4, d).unwrap().downsample(2, 2, 0.5).unwrap();
        assert_eq!(m.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn train_config_checks() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.k = 21;
        assert!(matches!(c.validate(), Err(Error::TopKRange { .. })));
        c.k = 5;
        c.prompt_template = "[CLASS] and [CLASS]".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toggle_combinations_are_distinct() {
        let all = ModuleToggles::all_combinations();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], ModuleToggles::BASELINE);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
