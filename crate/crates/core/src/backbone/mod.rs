//! Segmentation backbone: image -> three coarse-to-fine feature maps, a
//! top-down path that can re-propagate a refined level, and a mask decoder.

mod head;
mod resnet;
pub mod safetensors;
mod stub;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};
use crate::types::FeaturePyramid;

pub use head::{HeadConfig, MaskHead};
pub use resnet::{Resnet50, RESNET50_STAGES};
pub use stub::StubBackbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    PretrainedResnet50,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub identity: BackboneKind,
    /// Stage names feeding F1, F2, F3, coarse to fine.
    pub tap_points: Vec<String>,
    /// Output widths C1, C2, C3.
    pub channels: [usize; 3],
    /// When set, encoder weights never receive gradients.
    pub frozen: bool,
    /// Optional torchvision-layout safetensors file for the ResNet-50 encoder.
    pub weights: Option<std::path::PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::stub()
    }
}

impl BackboneSpec {
    pub fn stub() -> Self {
        Self {
            identity: BackboneKind::Stub,
            tap_points: stub::DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
            channels: [16, 16, 16],
            frozen: false,
            weights: None,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            identity: BackboneKind::PretrainedResnet50,
            tap_points: resnet::DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
            channels: [256, 256, 256],
            frozen: false,
            weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_points.len() != 3 {
            return Err(Error::Config(format!(
                "backbone needs exactly three tap points, got {}",
                self.tap_points.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone channel widths must be positive".into()));
        }
        let strides = self.tap_strides()?;
        if !(strides[0] >= strides[1] && strides[1] >= strides[2]) {
            return Err(Error::Config(format!(
                "tap points {:?} are not ordered coarse to fine",
                self.tap_points
            )));
        }
        Ok(())
    }

    /// Downsampling factor of each tap.
    pub fn tap_strides(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, name) in out.iter_mut().zip(&self.tap_points) {
            *o = match self.identity {
                BackboneKind::Stub => stub::tap_stride(name),
                BackboneKind::PretrainedResnet50 => resnet::tap_stride(name),
            }
            .ok_or_else(|| Error::Config(format!("unknown tap point {name:?}")))?;
        }
        Ok(out)
    }
}

/// Lateral-plus-upsampled top-down merge shared by both backbones.
#[derive(Debug, Clone)]
pub(crate) struct TopDown {
    to_level2: Conv2d,
    to_level3: Conv2d,
}

impl TopDown {
    fn new(pb: &mut ParamBuilder, channels: [usize; 3], bias: bool) -> Result<Self> {
        let args = Conv2dArgs::default();
        Ok(Self {
            to_level2: Conv2d::new(&mut pb.pp("td1"), channels[0], channels[1], 1, args, bias)?,
            to_level3: Conv2d::new(&mut pb.pp("td2"), channels[1], channels[2], 1, args, bias)?,
        })
    }

    fn merge(conv: &Conv2d, coarse: &Tensor, lateral: &Tensor) -> Result<Tensor> {
        let (_, h, w) = lateral.dims3()?;
        lateral.add(&conv.forward(coarse)?.upsample_bilinear(h, w)?)
    }

    fn build(&self, f1: Tensor, lateral2: Tensor, lateral3: Tensor) -> Result<FeaturePyramid> {
        let f2 = Self::merge(&self.to_level2, &f1, &lateral2)?;
        let f3 = Self::merge(&self.to_level3, &f2, &lateral3)?;
        FeaturePyramid::new(f1, f2, f3, lateral2, lateral3)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Stub(StubBackbone),
    Resnet50(Box<Resnet50>),
}

/// A configured backbone with its top-down path.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    resolution: (usize, usize),
    encoder: Encoder,
    top_down: TopDown,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, spec: &BackboneSpec, resolution: (usize, usize)) -> Result<Self> {
        spec.validate()?;
        let strides = spec.tap_strides()?;
        let coarsest = strides[0];
        if !resolution.0.is_multiple_of(coarsest) || !resolution.1.is_multiple_of(coarsest) {
            return Err(Error::Config(format!(
                "resolution {}x{} must be divisible by the coarsest stride {coarsest}",
                resolution.0, resolution.1
            )));
        }
        let encoder = match spec.identity {
            BackboneKind::Stub => Encoder::Stub(StubBackbone::new(&mut pb.pp("stub"), spec, strides)?),
            BackboneKind::PretrainedResnet50 => {
                Encoder::Resnet50(Box::new(Resnet50::new(&mut pb.pp("resnet"), spec)?))
            }
        };
        let top_down = TopDown::new(
            &mut pb.pp("top_down"),
            spec.channels,
            spec.identity != BackboneKind::Stub,
        )?;
        Ok(Self {
            spec: spec.clone(),
            resolution,
            encoder,
            top_down,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn resnet(&self) -> Option<&Resnet50> {
        match &self.encoder {
            Encoder::Resnet50(r) => Some(r),
            Encoder::Stub(_) => None,
        }
    }

    /// Extracts F1, F2, F3 for one `3 x H x W` image in `[0, 1]`.
    pub fn extract_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || (h, w) != self.resolution {
            return Err(Error::shape(
                "extract_pyramid",
                format!(
                    "expected 3x{}x{}, got {c}x{h}x{w}",
                    self.resolution.0, self.resolution.1
                ),
            ));
        }
        let [l1, l2, l3] = match &self.encoder {
            Encoder::Stub(s) => s.laterals(image)?,
            Encoder::Resnet50(r) => r.laterals(image)?,
        };
        self.top_down.build(l1, l2, l3)
    }

    /// Replaces one level and recomputes every finer level through the
    /// top-down path.
    pub fn reinject(&self, pyramid: &FeaturePyramid, refined: Tensor, level: usize) -> Result<FeaturePyramid> {
        let current = pyramid
            .level(level)
            .ok_or_else(|| Error::shape("reinject", format!("level {level} is not 1, 2 or 3")))?;
        if current.shape() != refined.shape() {
            return Err(Error::shape(
                "reinject",
                format!("level {level} is {:?}, refined is {:?}", current.shape(), refined.shape()),
            ));
        }
        match level {
            1 => self
                .top_down
                .build(refined, pyramid.lateral2.clone(), pyramid.lateral3.clone()),
            2 => {
                let f3 = TopDown::merge(&self.top_down.to_level3, &refined, &pyramid.lateral3)?;
                FeaturePyramid::new(
                    pyramid.f1.clone(),
                    refined,
                    f3,
                    pyramid.lateral2.clone(),
                    pyramid.lateral3.clone(),
                )
            }
            _ => FeaturePyramid::new(
                pyramid.f1.clone(),
                pyramid.f2.clone(),
                refined,
                pyramid.lateral2.clone(),
                pyramid.lateral3.clone(),
            ),
        }
    }
}
