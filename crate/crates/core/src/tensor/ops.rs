use std::sync::Arc;

use super::{numel, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat output index, the flat index into a (possibly broadcast)
/// operand of shape `src`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0; rank];
    for i in 0..src.len() {
        eff[offset + i] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n = numel(out);
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for slot in idx.iter_mut() {
        *slot = cur;
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += eff[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Binary) -> Result<Tensor> {
        let a = self.0.data.clone();
        let b = rhs.0.data.clone();
        if self.shape() == rhs.shape() {
            let data: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| op.apply(*x, *y)).collect();
            return Ok(Tensor::from_op(
                data,
                self.shape().to_vec(),
                vec![self.clone(), rhs.clone()],
                move |g| {
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let (da, db) = op.partials(a[i], b[i]);
                        ga[i] = g[i] * da;
                        gb[i] = g[i] * db;
                    }
                    vec![Some(ga), Some(gb)]
                },
            ));
        }
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            Error::shape(
                op.name(),
                format!("cannot broadcast {:?} with {:?}", self.shape(), rhs.shape()),
            )
        })?;
        let ia = Arc::new(broadcast_index(self.shape(), &out_shape));
        let ib = Arc::new(broadcast_index(rhs.shape(), &out_shape));
        let data: Vec<f64> = ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| op.apply(a[i], b[j]))
            .collect();
        let (na, nb) = (a.len(), b.len());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for k in 0..g.len() {
                    let (i, j) = (ia[k], ib[k]);
                    let (da, db) = op.partials(a[i], b[j]);
                    ga[i] += g[k] * da;
                    gb[j] += g[k] * db;
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Div)
    }

    /// `f(x)` elementwise, with `df(x, f(x))` supplying the derivative.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
        let x = self.0.data.clone();
        let y: Arc<Vec<f64>> = Arc::new(x.iter().map(|v| f(*v)).collect());
        let y_out = y.as_ref().clone();
        Tensor::from_op(y_out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let grad = g
                .iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(g, (x, y))| g * df(*x, *y))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        Ok(self.unary(f64::exp, |_, y| y))
    }

    pub fn log(&self) -> Result<Tensor> {
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn relu(&self) -> Result<Tensor> {
        Ok(self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Ok(self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn sqr(&self) -> Result<Tensor> {
        Ok(self.unary(|x| x * x, |x, _| 2.0 * x))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    /// `x * mul + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        Ok(self.unary(move |x| x * mul + add, move |_, _| mul))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        Ok(self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Ok(Tensor::from_op(vec![s], vec![1], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        }))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        self.sum_all()?.affine(1.0 / n as f64, 0.0)
    }

    fn check_dim(&self, op: &'static str, dim: usize) -> Result<()> {
        if dim >= self.rank() {
            return Err(Error::shape(
                op,
                format!("dim {dim} out of range for {:?}", self.shape()),
            ));
        }
        Ok(())
    }

    /// (outer, len, inner) decomposition around `dim`.
    fn split_at_dim(&self, dim: usize) -> (usize, usize, usize) {
        let s = self.shape();
        (numel(&s[..dim]), s[dim], numel(&s[dim + 1..]))
    }

    /// Sums along `dim`, keeping it with size 1.
    pub fn sum_keepdim(&self, dim: usize) -> Result<Tensor> {
        self.check_dim("sum_keepdim", dim)?;
        let (outer, len, inner) = self.split_at_dim(dim);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = 1;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_keepdim(&self, dim: usize) -> Result<Tensor> {
        self.check_dim("mean_keepdim", dim)?;
        let len = self.shape()[dim];
        self.sum_keepdim(dim)?.affine(1.0 / len as f64, 0.0)
    }

    /// Maximum along `dim`, keeping it with size 1. The gradient goes to the
    /// first maximal entry.
    pub fn max_keepdim(&self, dim: usize) -> Result<Tensor> {
        self.check_dim("max_keepdim", dim)?;
        let (outer, len, inner) = self.split_at_dim(dim);
        if len == 0 {
            return Err(Error::shape("max_keepdim", "empty dimension"));
        }
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let k = o * inner + i;
                for l in 0..len {
                    let v = x[(o * len + l) * inner + i];
                    if v > out[k] {
                        out[k] = v;
                        arg[k] = l;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = 1;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    gx[(o * len + arg[k]) * inner + i] = g[k];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Numerically stable softmax along `dim`.
    pub fn softmax(&self, dim: usize) -> Result<Tensor> {
        self.check_dim("softmax", dim)?;
        let (outer, len, inner) = self.split_at_dim(dim);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let y_saved = Arc::new(y.clone());
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let y = &y_saved;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let data = self.to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    pub fn unsqueeze(&self, dim: usize) -> Result<Tensor> {
        if dim > self.rank() {
            return Err(Error::shape("unsqueeze", format!("dim {dim}")));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(dim, 1);
        self.reshape(&shape)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_dim("narrow", dim)?;
        let (outer, full, inner) = self.split_at_dim(dim);
        if start + len > full {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) exceeds {full} on dim {dim}", start + len),
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `dim`; all other extents must agree.
    pub fn cat(tensors: &[Tensor], dim: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::shape("cat", "no tensors"))?;
        first.check_dim("cat", dim)?;
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == dim || a == b);
            if !ok {
                return Err(Error::shape(
                    "cat",
                    format!("{:?} vs {:?} along dim {dim}", t.shape(), first.shape()),
                ));
            }
        }
        let outer = numel(&first.shape()[..dim]);
        let inner = numel(&first.shape()[dim + 1..]);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[dim]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = total;
        Ok(Tensor::from_op(out, shape, tensors.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis `dim`.
    pub fn stack(tensors: &[Tensor], dim: usize) -> Result<Tensor> {
        let expanded = tensors
            .iter()
            .map(|t| t.unsqueeze(dim))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&expanded, dim)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let a = self.0.data.clone();
        let b = rhs.0.data.clone();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::Row, &b, Layout::Row, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            move |g| {
                // dA = G B^T, dB = A^T G
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, Layout::Row, &b, Layout::Transposed { cols: n }, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a, Layout::Transposed { cols: k }, g, Layout::Row, &mut gb);
                vec![Some(ga), Some(gb)]
            },
        ))
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Operand stored row-major with its logical shape.
    Row,
    /// Operand stored row-major as the transpose of its logical shape; `cols`
    /// is the column count of the stored matrix.
    Transposed { cols: usize },
}

/// `out += A (m x k) * B (k x n)`, operands addressed through `Layout`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Row => (k as isize, 1),
        Layout::Transposed { cols } => (1, cols as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Row => (n as isize, 1),
        Layout::Transposed { cols } => (1, cols as isize),
    };
    // SAFETY: strides describe in-bounds row-major buffers of the stated
    // logical shapes; `out` is an exclusive m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_index_matches_manual() {
        // (2,1) against (2,3)
        assert_eq!(broadcast_index(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        // (3) against (2,3)
        assert_eq!(broadcast_index(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn broadcast_add_and_grad() {
        let a = Tensor::variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::variable(vec![10.0, 20.0], &[2, 1]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let g = c.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&b).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.get(&a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_and_cat_invert() {
        let x = Tensor::from_vec((0..12).map(f64::from).collect(), &[2, 6]).unwrap();
        let l = x.narrow(1, 0, 2).unwrap();
        let r = x.narrow(1, 2, 4).unwrap();
        assert_eq!(Tensor::cat(&[l, r], 1).unwrap().data(), x.data());
    }

    #[test]
    fn max_keepdim_picks_first_on_ties() {
        let x = Tensor::variable(vec![1.0, 5.0, 5.0], &[3, 1]).unwrap();
        let m = x.max_keepdim(0).unwrap();
        assert_eq!(m.data(), &[5.0]);
        let g = m.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }
}
