use super::BackboneSpec;
use crate::error::Result;
use crate::nn::{Conv2d, Init, ParamBuilder};
use crate::tensor::{Conv2dArgs, Tensor};

pub(crate) const DEFAULT_TAPS: [&str; 3] = ["pool8", "pool4", "pool2"];

/// `poolN` taps average-pool the image by `N`.
pub(crate) fn tap_stride(name: &str) -> Option<usize> {
    let n: usize = name.strip_prefix("pool")?.parse().ok()?;
    (n > 0).then_some(n)
}

/// Seeded random linear filters at three scales: each tap average-pools the
/// image and applies a bias-free 3x3 convolution. The whole extractor is
/// linear in the input, so an all-zero image yields an all-zero pyramid.
#[derive(Debug, Clone)]
pub struct StubBackbone {
    strides: [usize; 3],
    filters: [Conv2d; 3],
}

impl StubBackbone {
    pub(crate) fn new(pb: &mut ParamBuilder, spec: &BackboneSpec, strides: [usize; 3]) -> Result<Self> {
        let args = Conv2dArgs {
            stride: 1,
            padding: 1,
        };
        let init = Init::Normal {
            std: (2.0 / 27.0f64).sqrt(),
        };
        let mut make = |i: usize| Conv2d::with_init(&mut pb.pp(&format!("filter{}", i + 1)), 3, spec.channels[i], 3, args, init);
        let filters = [make(0)?, make(1)?, make(2)?];
        Ok(Self { strides, filters })
    }

    pub(crate) fn laterals(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let tap = |i: usize| -> Result<Tensor> {
            let pooled = if self.strides[i] == 1 {
                image.clone()
            } else {
                image.avg_pool2d(self.strides[i])?
            };
            self.filters[i].forward(&pooled)
        };
        Ok([tap(0)?, tap(1)?, tap(2)?])
    }
}
