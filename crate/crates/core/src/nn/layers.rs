use super::{Init, Param, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dArgs, Tensor};

/// Affine map on row vectors: `x (T x in) -> x W^T + b (T x out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[out_dim, in_dim], Init::Uniform { fan_in: in_dim })?,
            bias: pb.param("bias", &[out_dim], Init::Uniform { fan_in: in_dim })?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.tensor().t()?)?.add(&self.bias.tensor())
    }

    pub fn zero(&self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every width from input to output, so `[a, b, c]` is two
    /// layers.
    pub fn new(pb: &mut ParamBuilder, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut pb.pp(&i.to_string()), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub args: Conv2dArgs,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        args: Conv2dArgs,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform { fan_in })?;
        let bias = if bias {
            Some(pb.param("bias", &[out_ch], Init::Uniform { fan_in })?)
        } else {
            None
        };
        Ok(Self { weight, bias, args })
    }

    /// Convolution with explicitly initialised weights and no bias.
    pub fn with_init(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        args: Conv2dArgs,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.param("weight", &[out_ch, in_ch, kernel, kernel], init)?;
        Ok(Self {
            weight,
            bias: None,
            args,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(Param::tensor);
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.args)
    }

    pub fn zero(&self) {
        self.weight.fill(0.0);
        if let Some(b) = &self.bias {
            b.fill(0.0);
        }
    }

    /// Sets a square pointwise convolution to the identity map.
    pub fn set_identity(&self) -> Result<()> {
        let [o, i, 1, 1] = *self.weight.shape() else {
            return Err(Error::shape("set_identity", "only 1x1 kernels"));
        };
        if o != i {
            return Err(Error::shape("set_identity", format!("{i} -> {o} is not square")));
        }
        let mut w = vec![0.0; o * i];
        for k in 0..o {
            w[k * i + k] = 1.0;
        }
        self.weight.set(w)?;
        if let Some(b) = &self.bias {
            b.fill(0.0);
        }
        Ok(())
    }
}

/// Convolutional feed-forward network: pointwise convolutions with ReLU
/// between them.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    pub layers: Vec<Conv2d>,
}

impl ConvFfn {
    pub fn new(pb: &mut ParamBuilder, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("a feed-forward network needs at least one layer".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut pb.pp(&i.to_string()), w[0], w[1], 1, Conv2dArgs::default(), true))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.output_layer().out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> &Conv2d {
        self.layers.last().expect("ffn has layers")
    }
}

/// Group normalisation over one `C x H x W` map with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: pb.param("gamma", &[channels], Init::Const(1.0))?,
            beta: pb.param("beta", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        let g = x.reshape(&[self.groups, c / self.groups * h * w])?;
        let centered = g.sub(&g.mean_keepdim(1)?)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        normed
            .reshape(&[c, h, w])?
            .mul(&self.gamma.tensor().reshape(&[c, 1, 1])?)?
            .add(&self.beta.tensor().reshape(&[c, 1, 1])?)
    }
}

/// Multi-head scaled dot-product attention between token matrices.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            q: Linear::new(&mut pb.pp("q"), dim, dim)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim)?,
            out: Linear::new(&mut pb.pp("out"), dim, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Post-softmax weights, one `T x S` matrix per head.
    pub fn weights(&self, query: &Tensor, keys: &Tensor) -> Result<Vec<Tensor>> {
        let q = self.q.forward(query)?;
        let k = self.k.forward(keys)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * hd, hd)?;
                let kh = k.narrow(1, h * hd, hd)?;
                qh.matmul(&kh.t()?)?.affine(scale, 0.0)?.softmax(1)
            })
            .collect()
    }

    /// `query: T x E`, `context: S x E` used as both keys and values.
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (_, e) = query.dims2()?;
        let (_, e2) = context.dims2()?;
        if e != self.dim() || e2 != self.dim() {
            return Err(Error::shape(
                "attention",
                format!("token widths {e}/{e2}, layer width {}", self.dim()),
            ));
        }
        let v = self.v.forward(context)?;
        let hd = self.head_dim();
        let heads = self
            .weights(query, context)?
            .iter()
            .enumerate()
            .map(|(h, a)| a.matmul(&v.narrow(1, h * hd, hd)?))
            .collect::<Result<Vec<_>>>()?;
        self.out.forward(&Tensor::cat(&heads, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_normalises_each_group() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gn = GroupNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 4).unwrap();
        let x = Tensor::from_vec((0..16).map(|i| (i * i) as f64).collect(), &[4, 2, 2]).unwrap();
        let y = gn.forward(&x).unwrap();
        for g in y.data().chunks(8) {
            let m: f64 = g.iter().sum::<f64>() / 8.0;
            let v: f64 = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_single_token_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 2).unwrap();
        let q = Tensor::from_vec(vec![0.1, -0.3, 0.2, 0.9], &[1, 4]).unwrap();
        let kv = Tensor::from_vec(vec![1.0, 2.0, -1.0, 0.5], &[1, 4]).unwrap();
        let got = att.forward(&q, &kv).unwrap();
        let want = att.out.forward(&att.v.forward(&kv).unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
