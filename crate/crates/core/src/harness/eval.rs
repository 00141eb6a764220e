//! Evaluation over manifests of class directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::ExperimentConfig;
use super::data::load_manifest;
use super::model::{build_clip, LccoModel};
use crate::error::{Error, Result};
use crate::metrics::MetricPool;
use crate::regularization::masked_attention_norm;
use crate::tensor::no_grad;
use crate::types::{ImageSet, Mask};

/// One evaluation group: indices into the class directory and how many of
/// them, counted from the front, are scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub indices: Vec<usize>,
    pub scored: usize,
}

/// Splits `0..len` into groups of `n`. The last group is filled by wrapping
/// around to the start; the wrapped entries are not scored.
pub fn chunk_indices(len: usize, n: usize) -> Vec<Group> {
    if len == 0 || n == 0 {
        return Vec::new();
    }
    (0..len)
        .step_by(n)
        .map(|start| Group {
            indices: (start..start + n).map(|i| i % len).collect(),
            scored: n.min(len - start),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub set_id: String,
    pub group: usize,
    pub images: usize,
    pub precision: f64,
    pub jaccard: f64,
    pub class_index: Option<usize>,
    /// Mean masked attention norm of the finest feature before and after
    /// regularisation, over the scored images.
    pub masked_norm_before: f64,
    pub masked_norm_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub manifest: PathBuf,
    pub sets: usize,
    pub images: usize,
    pub precision: f64,
    pub jaccard: f64,
    pub groups: Vec<GroupDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub n_eval: usize,
    pub datasets: Vec<DatasetReport>,
    /// Configuration the evaluated weights were trained with.
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
}

/// Scores every set in groups of `n_eval`, pooling metrics over images.
pub fn evaluate_sets(model: &LccoModel, sets: &[ImageSet], n_eval: usize) -> Result<(MetricPool, Vec<GroupDiagnostics>)> {
    let _guard = no_grad();
    let threshold = model.config().train.mask_threshold;
    let mut pool = MetricPool::default();
    let mut diags = Vec::new();
    for set in sets {
        let gt = set.gt_masks.as_ref().ok_or(Error::MissingMasks)?;
        for (g, group) in chunk_indices(set.len(), n_eval).into_iter().enumerate() {
            let sub = set.permuted(&group.indices);
            let out = model.forward_set(&sub)?;
            let pred = out.masks.binarized(threshold)?;
            let mut local = MetricPool::default();
            let (mut before, mut after) = (0.0, 0.0);
            for k in 0..group.scored {
                let truth = &gt[group.indices[k]];
                local.add(&pred[k], truth)?;
                before += masked_attention_norm(&out.f3_before[k], truth)?;
                after += masked_attention_norm(&out.f3_after[k], truth)?;
            }
            let scored = group.scored as f64;
            diags.push(GroupDiagnostics {
                set_id: set.set_id.clone(),
                group: g,
                images: group.scored,
                precision: local.precision(),
                jaccard: local.jaccard(),
                class_index: out.class_index,
                masked_norm_before: before / scored,
                masked_norm_after: after / scored,
            });
            pool.merge(&local);
        }
    }
    Ok((pool, diags))
}

/// Evaluates the weights in `checkpoint_path` on every manifest in `cfg` and
/// writes `eval_report.json` under `cfg.output_dir`.
///
/// The architecture and prompts come from the checkpoint; data, CLIP source
/// and set size come from `cfg`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path, n_eval: Option<usize>) -> Result<EvalReport> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.eval_manifests.is_empty() {
        return Err(Error::Config("eval_manifests is empty".into()));
    }
    let n_eval = n_eval.unwrap_or(cfg.n_eval);
    if n_eval == 0 {
        return Err(Error::Config("n_eval must be positive".into()));
    }
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model = LccoModel::from_checkpoint(&ckpt, build_clip(&cfg.clip)?)?;
    let res = model.config().model.resolution;

    let mut datasets = Vec::with_capacity(cfg.eval_manifests.len());
    for manifest in &cfg.eval_manifests {
        let sets = load_manifest(manifest, (res, res), true)?;
        let (pool, groups) = evaluate_sets(&model, &sets, n_eval)?;
        datasets.push(DatasetReport {
            manifest: manifest.clone(),
            sets: sets.len(),
            images: pool.count,
            precision: pool.precision(),
            jaccard: pool.jaccard(),
            groups,
        });
    }
    let report = EvalReport {
        checkpoint: checkpoint_path.to_path_buf(),
        n_eval,
        datasets,
        config: ckpt.config,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("eval_report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Pools metrics of already binarised predictions against ground truth.
pub fn score(pred: &[Mask], gt: &[Mask]) -> Result<MetricPool> {
    if pred.len() != gt.len() {
        return Err(Error::MaskCount {
            images: gt.len(),
            masks: pred.len(),
        });
    }
    let mut pool = MetricPool::default();
    for (p, g) in pred.iter().zip(gt) {
        pool.add(p, g)?;
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use proptest::prelude::*;

    #[test]
    fn chunks_wrap_the_last_group() {
        let g = chunk_indices(7, 5);
        assert_eq!(g[0], Group { indices: vec![0, 1, 2, 3, 4], scored: 5 });
        assert_eq!(g[1], Group { indices: vec![5, 6, 0, 1, 2], scored: 2 });
        assert_eq!(chunk_indices(3, 5), vec![Group { indices: vec![0, 1, 2, 0, 1], scored: 3 }]);
        assert!(chunk_indices(0, 5).is_empty());
    }

    proptest! {
        #[test]
        fn every_image_is_scored_once(len in 1usize..40, n in 1usize..10) {
            let mut seen = vec![0; len];
            for g in chunk_indices(len, n) {
                prop_assert_eq!(g.indices.len(), n);
                for &i in &g.indices[..g.scored] {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn perfect_predictions_score_full_marks() {
        let gt = vec![
            Mask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Mask::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
        ];
        let pool = score(&gt, &gt).unwrap();
        assert_eq!(pool.precision(), 100.0);
        assert_eq!(pool.jaccard(), 100.0);
        assert!(metrics::precision(&gt[0], &gt[1]).unwrap() < 100.0);
    }
}
