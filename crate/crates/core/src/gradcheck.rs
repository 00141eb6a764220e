//! Central finite-difference gradient verification.
//!
//! The check projects a (possibly non-scalar) output onto a fixed
//! pseudo-random direction, differentiates that scalar with the autodiff
//! engine, and compares against `(f(x + h e_k) - f(x - h e_k)) / 2h` computed
//! purely from forward evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Norm-wise relative error per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// A named input: values and shape.
#[derive(Debug, Clone)]
pub struct Input {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            data,
            shape: shape.to_vec(),
        }
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares autodiff and finite-difference gradients of `f` with respect to
/// every input.
pub fn check<F>(inputs: &[Input], f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let probe_inputs = inputs
        .iter()
        .map(|i| Tensor::from_vec(i.data.clone(), &i.shape))
        .collect::<Result<Vec<_>>>()?;
    let out_len = f(&probe_inputs)?.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let direction: Vec<f64> = (0..out_len).map(|_| rng.random_range(0.5..1.5)).collect();
    let dir = Tensor::from_vec(direction.clone(), &[out_len])?;

    let scalar = |xs: &[Tensor]| -> Result<Tensor> {
        let y = f(xs)?;
        let n = y.numel();
        y.reshape(&[n])?.mul(&dir)?.sum_all()
    };

    let vars = inputs
        .iter()
        .map(|i| Tensor::variable(i.data.clone(), &i.shape))
        .collect::<Result<Vec<_>>>()?;
    let grads = scalar(&vars)?.backward()?;

    let eval_plain = |xs: &[Vec<f64>]| -> Result<f64> {
        let ts = xs
            .iter()
            .zip(inputs)
            .map(|(x, i)| Tensor::from_vec(x.clone(), &i.shape))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&ts)?;
        Ok(y.data().iter().zip(&direction).map(|(a, b)| a * b).sum())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()]);
        let mut numeric = vec![0.0; var.numel()];
        for k in 0..var.numel() {
            let orig = values[idx][k];
            values[idx][k] = orig + DEFAULT_STEP;
            let plus = eval_plain(&values)?;
            values[idx][k] = orig - DEFAULT_STEP;
            let minus = eval_plain(&values)?;
            values[idx][k] = orig;
            numeric[k] = (plus - minus) / (2.0 * DEFAULT_STEP);
        }
        relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { relative_errors })
}
