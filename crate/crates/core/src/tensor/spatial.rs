//! Spatial operators on single-image `C x H x W` tensors.

use std::sync::Arc;

use super::ops::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dArgs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * n];
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Per-axis bilinear taps (align_corners = false).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

impl Tensor {
    /// 2-D convolution of a `C x H x W` map with `O x C x kh x kw` weights.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, args: Conv2dArgs) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let [o, wc, kh, kw] = *weight.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be rank 4, got {:?}", weight.shape()),
            ));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
            }
        }
        let (hp, wp) = (h + 2 * args.padding, w + 2 * args.padding);
        if hp < kh || wp < kw || args.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        let geom = Arc::new(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho: (hp - kh) / args.stride + 1,
            wo: (wp - kw) / args.stride + 1,
            stride: args.stride,
            pad: args.padding,
        });
        let n = geom.ho * geom.wo;
        let ck = c * kh * kw;
        let x = self.0.data.clone();
        let cols: Arc<Vec<f64>> = if geom.pointwise() {
            x.clone()
        } else {
            Arc::new(geom.im2col(&x))
        };
        let wdata = weight.0.data.clone();
        let mut out = vec![0.0; o * n];
        if let Some(b) = bias {
            for (row, bv) in out.chunks_mut(n).zip(b.data()) {
                row.fill(*bv);
            }
        }
        gemm(o, ck, n, &wdata, Layout::Row, &cols, Layout::Row, &mut out);

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        let g2 = geom.clone();
        Ok(Tensor::from_op(out, vec![o, geom.ho, geom.wo], inputs, move |g| {
            let mut gw = vec![0.0; o * ck];
            gemm(o, n, ck, g, Layout::Row, &cols, Layout::Transposed { cols: n }, &mut gw);
            let mut gcols = vec![0.0; ck * n];
            gemm(ck, o, n, &wdata, Layout::Transposed { cols: ck }, g, Layout::Row, &mut gcols);
            let gx = if g2.pointwise() { gcols } else { g2.col2im(&gcols) };
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(g.chunks(n).map(|r| r.iter().sum()).collect()));
            }
            grads
        }))
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if k == 0 || h < k || w < k {
            return Err(Error::shape("avg_pool2d", format!("window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = (ch * h + oy * k + dy) * w + ox * k;
                        s += x[row..row + k].iter().sum::<f64>();
                    }
                    out[(ch * ho + oy) * wo + ox] = s * norm;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, ho, wo], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = g[(ch * ho + oy) * wo + ox] * norm;
                        for dy in 0..k {
                            let row = (ch * h + oy * k + dy) * w + ox * k;
                            gx[row..row + k].iter_mut().for_each(|e| *e += v);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Max pooling with implicit negative-infinity padding.
    pub fn max_pool2d(&self, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if k == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape("max_pool2d", format!("window {k} on {h}x{w}")));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
        let mut arg = vec![usize::MAX; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = (ch * ho + oy) * wo + ox;
                    for dy in 0..k {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (ch * h + iy as usize) * w + ix as usize;
                            if x[src] > out[dst] {
                                out[dst] = x[src];
                                arg[dst] = src;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, ho, wo], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for (gv, &src) in g.iter().zip(&arg) {
                if src != usize::MAX {
                    gx[src] += gv;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear resize to `oh x ow` with half-pixel centers.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(Error::shape("upsample_bilinear", format!("{h}x{w} -> {oh}x{ow}")));
        }
        if (h, w) == (oh, ow) {
            return Ok(self.clone());
        }
        let ty = Arc::new(bilinear_taps(h, oh));
        let tx = Arc::new(bilinear_taps(w, ow));
        let x = self.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[(ch * oh + oy) * ow + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, oh, ow], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = g[(ch * oh + oy) * ow + ox];
                        plane[y0 * w + x0] += v * wy0 * wx0;
                        plane[y0 * w + x1] += v * wy0 * wx1;
                        plane[y1 * w + x0] += v * wy1 * wx0;
                        plane[y1 * w + x1] += v * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
