//! The full co-segmentation model and its set-level forward pass.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{ClipBackendKind, ClipConfig, ExperimentConfig};
use crate::backbone::{Backbone, MaskHead};
use crate::clip::{similarity, ClipBackend, ExternalBackend, FixtureBackend, FixtureStore, PromptBank};
use crate::error::{Error, Result};
use crate::interaction::InteractionParams;
use crate::isfc::IsfcParams;
use crate::losses::{classification_loss, coarse_loss, iou_loss, total_loss, LossParts, LossReport};
use crate::nn::{ParamBuilder, ParamStore};
use crate::regularization::{gt_class_target_with, most_likely_class, RegParams};
use crate::tensor::Tensor;
use crate::types::{ImageSet, MaskBatch, ModuleToggles};

pub fn build_clip(cfg: &ClipConfig) -> Result<Arc<dyn ClipBackend>> {
    Ok(match cfg.backend {
        ClipBackendKind::Real => Arc::new(ExternalBackend::spawn(&cfg.external)?),
        ClipBackendKind::Fixture => {
            let store = match &cfg.fixture {
                Some(path) => FixtureStore::load(path)?,
                None => FixtureStore::new(cfg.dim),
            };
            if cfg.synthesize_missing || cfg.fixture.is_none() {
                Arc::new(FixtureBackend::synthesizing(store))
            } else {
                Arc::new(FixtureBackend::strict(store))
            }
        }
    })
}

/// Everything one forward pass over a set produces.
#[derive(Debug, Clone)]
pub struct SetOutput {
    pub masks: MaskBatch,
    /// Class distribution, when regularisation ran.
    pub upsilon: Option<Tensor>,
    pub class_index: Option<usize>,
    /// Prompt indices kept by distillation, when interaction ran.
    pub distilled: Option<Vec<usize>>,
    /// Finest features entering and leaving regularisation.
    pub f3_before: Vec<Tensor>,
    pub f3_after: Vec<Tensor>,
}

pub struct LccoModel {
    config: ExperimentConfig,
    store: ParamStore,
    backbone: Backbone,
    isfc: IsfcParams,
    interaction: InteractionParams,
    regularization: RegParams,
    head: MaskHead,
    bank: PromptBank,
    clip: Arc<dyn ClipBackend>,
    h_txt: Tensor,
}

impl std::fmt::Debug for LccoModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LccoModel")
            .field("params", &self.store.len())
            .field("clip", &self.clip.identity())
            .finish()
    }
}

impl LccoModel {
    /// Builds every module with weights drawn from `config.train.seed`.
    pub fn new(config: ExperimentConfig, clip: Arc<dyn ClipBackend>) -> Result<Self> {
        config.validate()?;
        let bank = PromptBank::new(&config.train.prompt_vocabulary, &config.train.prompt_template)?;
        let h_txt = clip.encode_prompts(&bank)?.detach();
        let m = &config.model;
        let c = m.backbone.channels;
        let d = clip.dim();
        let res = (m.resolution, m.resolution);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut pb.pp("backbone"), &m.backbone, res)?;
        let isfc = IsfcParams::new(&mut pb.pp("isfc"), c[0], m.isfc)?;
        let interaction = InteractionParams::new(&mut pb.pp("interaction"), c[1], d, m.coarse_size(), m.interaction)?;
        let regularization = RegParams::new(&mut pb.pp("regularization"), bank.len(), c[2], d)?;
        let head = MaskHead::new(&mut pb.pp("head"), c[2], m.head, res)?;
        Ok(Self {
            config,
            store,
            backbone,
            isfc,
            interaction,
            regularization,
            head,
            bank,
            clip,
            h_txt,
        })
    }

    /// Rebuilds the architecture recorded in `ckpt` and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint, clip: Arc<dyn ClipBackend>) -> Result<Self> {
        let model = Self::new(ckpt.config.clone(), clip)?;
        ckpt.apply(&model.store)?;
        Ok(model)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn clip(&self) -> &Arc<dyn ClipBackend> {
        &self.clip
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn prompt_embeddings(&self) -> &Tensor {
        &self.h_txt
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn forward_set(&self, set: &ImageSet) -> Result<SetOutput> {
        self.forward_set_with(set, self.config.train.modules)
    }

    /// Extract pyramids, refine F1 across the set, modulate F2 with CLIP
    /// semantics, regularise F3 with the most likely class, decode masks.
    /// Disabled stages pass their level through unchanged.
    pub fn forward_set_with(&self, set: &ImageSet, toggles: ModuleToggles) -> Result<SetOutput> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let res = self.backbone.resolution();
        for (index, img) in set.images.iter().enumerate() {
            if (img.height, img.width) != res {
                return Err(Error::ImageSize {
                    index,
                    got_h: img.height,
                    got_w: img.width,
                    want_h: res.0,
                    want_w: res.1,
                });
            }
        }
        let mut pyramids = set
            .images
            .iter()
            .map(|img| self.backbone.extract_pyramid(&img.to_tensor()))
            .collect::<Result<Vec<_>>>()?;

        if toggles.isfc {
            let f1: Vec<Tensor> = pyramids.iter().map(|p| p.f1.clone()).collect();
            let refined = self.isfc.refine_set(&f1)?;
            pyramids = pyramids
                .iter()
                .zip(refined)
                .map(|(p, r)| self.backbone.reinject(p, r, 1))
                .collect::<Result<_>>()?;
        }

        let bundle = if toggles.uses_clip() {
            Some(similarity(&self.clip.encode_images(&set.images)?, &self.h_txt)?)
        } else {
            None
        };

        let mut coarse = None;
        let mut distilled = None;
        if let (true, Some(b)) = (toggles.clip_interaction, &bundle) {
            let f2: Vec<Tensor> = pyramids.iter().map(|p| p.f2.clone()).collect();
            let out = self.interaction.forward(&f2, b, self.config.train.k)?;
            pyramids = pyramids
                .iter()
                .zip(out.refined)
                .map(|(p, r)| self.backbone.reinject(p, r, 2))
                .collect::<Result<_>>()?;
            coarse = Some(out.coarse);
            distilled = Some(out.distilled);
        }

        let f3_before: Vec<Tensor> = pyramids.iter().map(|p| p.f3.clone()).collect();
        let mut upsilon = None;
        let mut class_index = None;
        if let (true, Some(b)) = (toggles.clip_regularization, &bundle) {
            let u = self.regularization.class_probabilities(&b.s)?;
            let i_star = most_likely_class(u.data())?;
            let h_star = self.h_txt.narrow(0, i_star, 1)?;
            pyramids = pyramids
                .iter()
                .map(|p| {
                    let r = self.regularization.regularize(&p.f3, &h_star)?;
                    self.backbone.reinject(p, r, 3)
                })
                .collect::<Result<_>>()?;
            upsilon = Some(u);
            class_index = Some(i_star);
        }
        let f3_after: Vec<Tensor> = pyramids.iter().map(|p| p.f3.clone()).collect();

        let pred = f3_after.iter().map(|f| self.head.decode_mask(f)).collect::<Result<Vec<_>>>()?;
        Ok(SetOutput {
            masks: MaskBatch {
                pred,
                gt: set.gt_masks.clone(),
                coarse_pred: coarse,
            },
            upsilon,
            class_index,
            distilled,
            f3_before,
            f3_after,
        })
    }

    /// Weighted training objective for one forward pass over `set`.
    pub fn loss(&self, set: &ImageSet, out: &SetOutput) -> Result<(Tensor, LossReport)> {
        let gt = set.gt_masks.as_ref().ok_or(Error::MissingMasks)?;
        let t = &self.config.train;
        let mut parts = LossParts::default();
        if t.losses.iou {
            parts.iou = Some(iou_loss(&out.masks.pred, gt)?);
        }
        if let (true, Some(coarse)) = (t.losses.cs, &out.masks.coarse_pred) {
            parts.cs = Some(coarse_loss(coarse, gt)?);
        }
        if let (true, Some(u)) = (t.losses.c, &out.upsilon) {
            let (target, _) = gt_class_target_with(set, &self.h_txt, self.clip.as_ref())?;
            parts.c = Some(classification_loss(u, &target)?);
        }
        total_loss(&parts, t.lambda1, t.lambda2, t.losses)
    }
}
