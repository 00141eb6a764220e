//! ResNet-50 encoder (torchvision layout, batch-norm in inference mode) with
//! lateral projections onto the configured pyramid widths.

use std::path::Path;

use super::safetensors;
use super::BackboneSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Param, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};

pub(crate) const DEFAULT_TAPS: [&str; 3] = ["layer4", "layer3", "layer2"];

/// (name, output channels, stride relative to the input)
pub const RESNET50_STAGES: [(&str, usize, usize); 4] = [
    ("layer1", 256, 4),
    ("layer2", 512, 8),
    ("layer3", 1024, 16),
    ("layer4", 2048, 32),
];

const BLOCKS: [usize; 4] = [3, 4, 6, 3];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub(crate) fn tap_stride(name: &str) -> Option<usize> {
    RESNET50_STAGES.iter().find(|s| s.0 == name).map(|s| s.2)
}

fn stage_index(name: &str) -> Option<usize> {
    RESNET50_STAGES.iter().position(|s| s.0 == name)
}

#[derive(Debug, Clone)]
struct BatchNorm {
    weight: Param,
    bias: Param,
    running_mean: Param,
    running_var: Param,
}

impl BatchNorm {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        let weight = pb.param("weight", &[c], Init::Const(1.0))?;
        let bias = pb.param("bias", &[c], Init::Zeros)?;
        let mut stats = pb.frozen();
        Ok(Self {
            weight,
            bias,
            running_mean: stats.param("running_mean", &[c], Init::Zeros)?,
            running_var: stats.param("running_var", &[c], Init::Const(1.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.shape()[0];
        let inv_std = self.running_var.tensor().affine(1.0, 1e-5)?.sqrt()?;
        let scale = self.weight.tensor().div(&inv_std)?;
        let shift = self
            .bias
            .tensor()
            .sub(&self.running_mean.tensor().mul(&scale)?)?;
        x.mul(&scale.reshape(&[c, 1, 1])?)?
            .add(&shift.reshape(&[c, 1, 1])?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(pb: &mut ParamBuilder, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out = width * 4;
        let he = |fan_in: usize| Init::Normal {
            std: (2.0 / fan_in as f64).sqrt(),
        };
        let unit = Conv2dArgs::default();
        let downsample = if stride != 1 || in_ch != out {
            Some((
                Conv2d::with_init(&mut pb.pp("downsample").pp("0"), in_ch, out, 1, Conv2dArgs { stride, padding: 0 }, he(in_ch))?,
                BatchNorm::new(&mut pb.pp("downsample").pp("1"), out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::with_init(&mut pb.pp("conv1"), in_ch, width, 1, unit, he(in_ch))?,
            bn1: BatchNorm::new(&mut pb.pp("bn1"), width)?,
            conv2: Conv2d::with_init(&mut pb.pp("conv2"), width, width, 3, Conv2dArgs { stride, padding: 1 }, he(width * 9))?,
            bn2: BatchNorm::new(&mut pb.pp("bn2"), width)?,
            conv3: Conv2d::with_init(&mut pb.pp("conv3"), width, out, 1, unit, he(width))?,
            bn3: BatchNorm::new(&mut pb.pp("bn3"), out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        h.add(&skip)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct Resnet50 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    taps: [usize; 3],
    laterals: [Conv2d; 3],
    encoder_params: Vec<Param>,
}

impl Resnet50 {
    pub(crate) fn new(pb: &mut ParamBuilder, spec: &BackboneSpec) -> Result<Self> {
        let mut taps = [0; 3];
        for (t, name) in taps.iter_mut().zip(&spec.tap_points) {
            *t = stage_index(name).ok_or_else(|| Error::Config(format!("unknown ResNet-50 stage {name:?}")))?;
        }
        let mut encoder_params = Vec::new();
        let (stem_conv, stem_bn, stages) = {
            let mut enc = pb.pp("encoder");
            let mut enc = enc.frozen_if(spec.frozen);
            let stem_conv = Conv2d::with_init(
                &mut enc.pp("conv1"),
                3,
                64,
                7,
                Conv2dArgs { stride: 2, padding: 3 },
                Init::Normal { std: (2.0 / 147.0f64).sqrt() },
            )?;
            let stem_bn = BatchNorm::new(&mut enc.pp("bn1"), 64)?;
            let mut stages = Vec::new();
            let mut in_ch = 64;
            for (s, &(name, out, _)) in RESNET50_STAGES.iter().enumerate() {
                let width = out / 4;
                let mut blocks = Vec::new();
                for b in 0..BLOCKS[s] {
                    let stride = if b == 0 && s > 0 { 2 } else { 1 };
                    blocks.push(Bottleneck::new(&mut enc.pp(name).pp(&b.to_string()), in_ch, width, stride)?);
                    in_ch = out;
                }
                stages.push(blocks);
            }
            (stem_conv, stem_bn, stages)
        };
        for bn in std::iter::once(&stem_bn).chain(stages.iter().flatten().flat_map(|b| {
            [&b.bn1, &b.bn2, &b.bn3]
                .into_iter()
                .chain(b.downsample.as_ref().map(|d| &d.1))
        })) {
            encoder_params.extend([
                bn.weight.clone(),
                bn.bias.clone(),
                bn.running_mean.clone(),
                bn.running_var.clone(),
            ]);
        }
        encoder_params.push(stem_conv.weight.clone());
        for b in stages.iter().flatten() {
            encoder_params.extend([b.conv1.weight.clone(), b.conv2.weight.clone(), b.conv3.weight.clone()]);
            if let Some((c, _)) = &b.downsample {
                encoder_params.push(c.weight.clone());
            }
        }
        let unit = Conv2dArgs::default();
        let mut lat = |i: usize| {
            Conv2d::new(
                &mut pb.pp(&format!("lateral{}", i + 1)),
                RESNET50_STAGES[taps[i]].1,
                spec.channels[i],
                1,
                unit,
                true,
            )
        };
        let laterals = [lat(0)?, lat(1)?, lat(2)?];
        let r = Self {
            stem_conv,
            stem_bn,
            stages,
            taps,
            laterals,
            encoder_params,
        };
        if let Some(path) = &spec.weights {
            r.load_torchvision(path)?;
        }
        Ok(r)
    }

    /// Loads encoder weights from a torchvision-named safetensors file.
    pub fn load_torchvision(&self, path: &Path) -> Result<()> {
        let tensors = safetensors::read(path)?;
        for p in &self.encoder_params {
            let key = p
                .name()
                .split_once("encoder.")
                .map(|(_, k)| k)
                .unwrap_or(p.name());
            let t = tensors
                .get(key)
                .ok_or_else(|| Error::Weights(format!("{}: missing tensor {key}", path.display())))?;
            if t.shape != p.shape() {
                return Err(Error::Weights(format!(
                    "{key}: shape {:?} in file, {:?} expected",
                    t.shape,
                    p.shape()
                )));
            }
            p.set(t.data.clone())?;
        }
        Ok(())
    }

    pub(crate) fn laterals(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), &[3, 1, 1])?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), &[3, 1, 1])?;
        let x = image.sub(&mean)?.div(&std)?;
        let mut h = self
            .stem_bn
            .forward(&self.stem_conv.forward(&x)?)?
            .relu()?
            .max_pool2d(3, 2, 1)?;
        let deepest = *self.taps.iter().max().expect("three taps");
        let mut outputs = Vec::with_capacity(deepest + 1);
        for stage in &self.stages[..=deepest] {
            for block in stage {
                h = block.forward(&h)?;
            }
            outputs.push(h.clone());
        }
        let lat = |i: usize| self.laterals[i].forward(&outputs[self.taps[i]]);
        Ok([lat(0)?, lat(1)?, lat(2)?])
    }
}
