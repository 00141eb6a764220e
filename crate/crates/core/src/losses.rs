//! Training objective: soft IoU on full and coarse masks, binary cross
//! entropy on the class distribution, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LossToggles, Mask, MASK_THRESHOLD};

pub const IOU_EPS: f64 = 1e-6;
pub const BCE_EPS: f64 = 1e-7;

/// `1 - (Σ a⊙b + ε) / (Σ a + Σ b - Σ a⊙b + ε)`.
pub fn soft_iou(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "soft_iou",
            format!("prediction {:?}, target {:?}", pred.shape(), gt.shape()),
        ));
    }
    let inter = pred.mul(gt)?.sum_all()?;
    let union = pred.sum_all()?.add(&gt.sum_all()?)?.sub(&inter)?;
    inter
        .affine(1.0, IOU_EPS)?
        .div(&union.affine(1.0, IOU_EPS)?)?
        .affine(-1.0, 1.0)
}

fn mean_iou(pred: &[Tensor], gt: &[Tensor]) -> Result<Tensor> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::MaskCount {
            images: pred.len(),
            masks: gt.len(),
        });
    }
    let mut total = soft_iou(&pred[0], &gt[0])?;
    for (p, g) in pred.iter().zip(gt).skip(1) {
        total = total.add(&soft_iou(p, g)?)?;
    }
    total.affine(1.0 / pred.len() as f64, 0.0)
}

/// Mean soft IoU loss between `1 x H x W` predictions and masks.
pub fn iou_loss(pred: &[Tensor], gt: &[Mask]) -> Result<Tensor> {
    let gt: Vec<Tensor> = gt.iter().map(Mask::to_tensor).collect();
    mean_iou(pred, &gt)
}

/// Soft IoU against masks area-downsampled to each prediction's size and
/// thresholded at 0.5.
pub fn coarse_loss(coarse_pred: &[Tensor], gt: &[Mask]) -> Result<Tensor> {
    let gt = coarse_pred
        .iter()
        .zip(gt)
        .map(|(p, m)| {
            let (_, h, w) = p.dims3()?;
            Ok(m.downsample(h, w, MASK_THRESHOLD)?.to_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    if gt.len() != coarse_pred.len() {
        return Err(Error::MaskCount {
            images: coarse_pred.len(),
            masks: gt.len(),
        });
    }
    mean_iou(coarse_pred, &gt)
}

/// Mean binary cross entropy over the `P` entries with predictions clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn classification_loss(upsilon: &Tensor, target: &[f64]) -> Result<Tensor> {
    let p = upsilon.numel();
    if p != target.len() || p == 0 {
        return Err(Error::shape(
            "classification_loss",
            format!("{p} probabilities, {} targets", target.len()),
        ));
    }
    let u = upsilon.reshape(&[p])?.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let t = Tensor::from_vec(target.to_vec(), &[p])?;
    let pos = t.mul(&u.log()?)?;
    let neg = t.affine(-1.0, 1.0)?.mul(&u.affine(-1.0, 1.0)?.log()?)?;
    pos.add(&neg)?.mean_all()?.neg()
}

/// Individual terms before weighting; a missing term contributes zero.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub iou: Option<Tensor>,
    pub cs: Option<Tensor>,
    pub c: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_iou: f64,
    pub l_cs: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `L_iou + λ1 L_cs + λ2 L_c` over the enabled terms. Returns the
/// differentiable total and the scalar report.
pub fn total_loss(parts: &LossParts, lambda1: f64, lambda2: f64, toggles: LossToggles) -> Result<(Tensor, LossReport)> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got {lambda1} and {lambda2}"
        )));
    }
    let mut total = Tensor::scalar(0.0);
    let mut report = LossReport {
        l_iou: 0.0,
        l_cs: 0.0,
        l_c: 0.0,
        l_total: 0.0,
        lambda1,
        lambda2,
    };
    let terms = [
        (toggles.iou, &parts.iou, 1.0, &mut report.l_iou),
        (toggles.cs, &parts.cs, lambda1, &mut report.l_cs),
        (toggles.c, &parts.c, lambda2, &mut report.l_c),
    ];
    for (on, term, weight, slot) in terms {
        if let (true, Some(t)) = (on, term) {
            *slot = t.item()?;
            if weight != 0.0 {
                total = total.add(&t.affine(weight, 0.0)?)?;
            }
        }
    }
    report.l_total = total.item()?;
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss (iou {}, cs {}, c {})",
            report.l_iou, report.l_cs, report.l_c
        )));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, Input};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), &[1, h, w]).unwrap()
    }

    #[test]
    fn soft_iou_examples() {
        let gt = t(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        assert_abs_diff_eq!(soft_iou(&gt, &gt).unwrap().item().unwrap(), 0.0, epsilon = 1e-6);
        let disjoint = t(&[0.0, 1.0, 1.0, 1.0], 2, 2);
        assert_abs_diff_eq!(soft_iou(&disjoint, &gt).unwrap().item().unwrap(), 1.0, epsilon = 1e-5);
        let pred = t(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        assert_abs_diff_eq!(soft_iou(&pred, &gt).unwrap().item().unwrap(), 0.5, epsilon = 1e-6);
        assert!(soft_iou(&pred, &t(&[1.0], 1, 1)).is_err());
    }

    #[test]
    fn coarse_loss_uses_downsampled_targets() {
        let gt = Mask::new(4, 4, (0..16).map(|i| f64::from(i % 4 < 2)).collect()).unwrap();
        let perfect = t(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        assert_abs_diff_eq!(coarse_loss(&[perfect], std::slice::from_ref(&gt)).unwrap().item().unwrap(), 0.0, epsilon = 1e-6);
        let wrong = t(&[0.0, 1.0, 0.0, 1.0], 2, 2);
        assert_abs_diff_eq!(coarse_loss(&[wrong], std::slice::from_ref(&gt)).unwrap().item().unwrap(), 1.0, epsilon = 1e-5);
        let half = t(&[1.0, 1.0, 1.0, 1.0], 2, 2);
        assert_abs_diff_eq!(coarse_loss(&[half], &[gt]).unwrap().item().unwrap(), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn bce_examples() {
        let one_hot = Tensor::from_vec(vec![0.0, 1.0, 0.0], &[1, 3]).unwrap();
        assert_abs_diff_eq!(
            classification_loss(&one_hot, &[0.0, 1.0, 0.0]).unwrap().item().unwrap(),
            0.0,
            epsilon = 1e-5
        );
        let half = Tensor::from_vec(vec![0.5, 0.5], &[2]).unwrap();
        assert_abs_diff_eq!(
            classification_loss(&half, &[1.0, 0.0]).unwrap().item().unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let a = classification_loss(&Tensor::from_vec(vec![0.2, 0.7], &[2]).unwrap(), &[1.0, 0.0]).unwrap();
        let b = classification_loss(&Tensor::from_vec(vec![0.7, 0.2], &[2]).unwrap(), &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(a.item().unwrap(), b.item().unwrap(), epsilon = 1e-15);
        assert!(classification_loss(&half, &[1.0]).is_err());
    }

    #[test]
    fn total_loss_arithmetic_and_toggles() {
        let s = |v: f64| Some(Tensor::scalar(v));
        let all = LossToggles::default();
        let ones = LossParts { iou: s(1.0), cs: s(1.0), c: s(1.0) };
        assert_eq!(total_loss(&ones, 1.0, 1.0, all).unwrap().1.l_total, 3.0);
        assert_eq!(total_loss(&ones, 0.0, 0.0, all).unwrap().1.l_total, 1.0);
        let parts = LossParts { iou: s(0.37), cs: s(0.81), c: s(0.29) };
        let (_, r) = total_loss(&parts, 0.5, 0.25, all).unwrap();
        assert_abs_diff_eq!(r.l_total, 0.37 + 0.5 * 0.81 + 0.25 * 0.29, epsilon = 1e-12);
        let only_iou = LossToggles { iou: true, cs: false, c: false };
        let (_, r) = total_loss(&parts, 0.5, 0.25, only_iou).unwrap();
        assert_eq!((r.l_cs, r.l_c, r.l_total), (0.0, 0.0, 0.37));
        assert!(matches!(total_loss(&parts, -1.0, 0.0, all), Err(Error::Config(_))));
        let nan = LossParts { iou: s(f64::NAN), ..Default::default() };
        assert!(matches!(total_loss(&nan, 1.0, 1.0, all), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn iou_is_bounded(a in proptest::collection::vec(0.0f64..=1.0, 9), b in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let l = soft_iou(&t(&a, 3, 3), &t(&b, 3, 3)).unwrap().item().unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn bce_is_nonnegative(u in proptest::collection::vec(0.0f64..=1.0, 4), k in 0usize..4) {
            let mut target = vec![0.0; 4];
            target[k] = 1.0;
            let l = classification_loss(&Tensor::from_vec(u, &[4]).unwrap(), &target).unwrap().item().unwrap();
            prop_assert!(l >= 0.0);
        }
    }

    #[test]
    fn loss_gradients() {
        let g = gradcheck::check(
            &[
                Input::new(vec![0.3, 0.8, 0.1, 0.6], &[1, 2, 2]),
                Input::new(vec![0.9, 0.2, 0.4, 0.7], &[1, 2, 2]),
            ],
            |x| soft_iou(&x[0], &x[1]),
        )
        .unwrap();
        assert!(g.max_relative_error() <= 1e-4, "{:?}", g.relative_errors);
        let g = gradcheck::check(&[Input::new(vec![0.2, 0.5, 0.3], &[3])], |x| {
            classification_loss(&x[0], &[0.0, 1.0, 0.0])
        })
        .unwrap();
        assert!(g.max_relative_error() <= 1e-4, "{:?}", g.relative_errors);
    }
}
