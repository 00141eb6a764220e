//! Set-level forward pass and training behaviour on toy data.

use std::sync::Arc;

use lcco::backbone::BackboneSpec;
use lcco::clip::{FixtureBackend, FixtureStore};
use lcco::harness::synthetic::toy_set;
use lcco::harness::{ExperimentConfig, LccoModel, Trainer};
use lcco::nn::OptimizerConfig;
use lcco::types::ImageSet;
use lcco::Error;

fn config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.resolution = 32;
    cfg.model.coarse_stride = 8;
    cfg.model.backbone = BackboneSpec::stub();
    cfg.clip.dim = 16;
    cfg.train.prompt_vocabulary = ["cow", "sheep", "car", "dog"].map(String::from).to_vec();
    cfg.train.k = 2;
    cfg.train.seed = seed;
    cfg.train.optimizer = OptimizerConfig::Adam {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    cfg
}

fn model(cfg: ExperimentConfig) -> LccoModel {
    LccoModel::new(cfg, Arc::new(FixtureBackend::synthesizing(FixtureStore::new(16)))).unwrap()
}

#[test]
fn one_step_lowers_the_total_loss() {
    let set = toy_set(4, 32, 1);
    let mut trainer = Trainer::new(model(config(1)));
    let first = trainer.step_on(&set).unwrap();
    let second = trainer.step_on(&set).unwrap();
    assert!(second.l_total < first.l_total, "{} -> {}", first.l_total, second.l_total);
}

#[test]
fn zero_lambda2_drops_the_classification_term() {
    let set = toy_set(3, 32, 2);
    let mut cfg = config(2);
    cfg.train.lambda2 = 0.0;
    let m = model(cfg);
    let out = m.forward_set(&set).unwrap();
    let (_, report) = m.loss(&set, &out).unwrap();
    assert!(report.l_c > 0.0);
    assert_eq!(report.lambda2, 0.0);
    assert!((report.l_total - (report.l_iou + report.lambda1 * report.l_cs)).abs() < 1e-12);
}

#[test]
fn forward_pass_is_deterministic_and_bounded() {
    let set = toy_set(5, 32, 3);
    let a = model(config(3)).forward_set(&set).unwrap();
    let b = model(config(3)).forward_set(&set).unwrap();
    for (x, y) in a.masks.pred.iter().zip(&b.masks.pred) {
        assert_eq!(x.data(), y.data());
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(a.class_index, b.class_index);
    assert_eq!(a.distilled.as_ref().map(Vec::len), Some(2));
}

#[test]
fn single_image_sets_run() {
    let set = toy_set(1, 32, 4);
    let out = model(config(4)).forward_set(&set).unwrap();
    assert_eq!(out.masks.len(), 1);
}

#[test]
fn training_without_masks_is_rejected() {
    let mut set = toy_set(2, 32, 5);
    set.gt_masks = None;
    let mut trainer = Trainer::new(model(config(5)));
    assert!(matches!(trainer.step_on(&set), Err(Error::MissingMasks)));
}

#[test]
fn wrong_resolution_is_rejected() {
    let set: ImageSet = toy_set(2, 24, 6);
    assert!(matches!(
        model(config(6)).forward_set(&set),
        Err(Error::ImageSize { .. })
    ));
}

#[test]
fn strict_fixtures_report_misses() {
    let store = FixtureStore::new(16);
    let err = LccoModel::new(config(7), Arc::new(FixtureBackend::strict(store))).unwrap_err();
    assert!(matches!(err, Error::FixtureMiss { .. }));
}
