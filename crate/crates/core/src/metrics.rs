//! Precision and Jaccard index on binary masks, in percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Mask;

fn check(pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "metric",
            format!("prediction {}x{}, target {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Data("metrics need binary masks".into()));
    }
    Ok(())
}

/// Percentage of pixels whose label matches.
pub fn precision(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let correct = pred.data.iter().zip(&gt.data).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / pred.data.len() as f64)
}

/// Foreground intersection over union in percent; two empty masks score 100.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (*a == 1.0, *b == 1.0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 })
}

/// Running means of both metrics over an evaluation pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPool {
    pub precision_sum: f64,
    pub jaccard_sum: f64,
    pub count: usize,
}

impl MetricPool {
    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        self.precision_sum += precision(pred, gt)?;
        self.jaccard_sum += jaccard(pred, gt)?;
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricPool) {
        self.precision_sum += other.precision_sum;
        self.jaccard_sum += other.jaccard_sum;
        self.count += other.count;
    }

    pub fn precision(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.precision_sum / self.count as f64
        }
    }

    pub fn jaccard(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.jaccard_sum / self.count as f64
        }
    }
}
