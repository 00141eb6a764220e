//! Mask prediction for a directory of images that share one object.

use std::path::{Path, PathBuf};

use super::checkpoint;
use super::data::{list_pngs, load_image, overlay, resize_soft_mask, save_mask};
use super::model::{build_clip, LccoModel};
use crate::error::{Error, Result};
use crate::tensor::no_grad;
use crate::types::{validate_image_set, ImageSet, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub masks: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
    pub class_index: Option<usize>,
}

/// Segments every PNG in `images_dir` as one set and writes `<stem>.png`
/// masks at the original resolution into `out_dir`, plus
/// `<stem>_overlay.png` when `with_overlay` is set.
pub fn infer(images_dir: &Path, checkpoint_path: &Path, out_dir: &Path, with_overlay: bool) -> Result<InferOutcome> {
    let files = list_pngs(images_dir)?;
    if files.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least two PNG images, found {}",
            images_dir.display(),
            files.len()
        )));
    }
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model = LccoModel::from_checkpoint(&ckpt, build_clip(&ckpt.config.clip)?)?;
    let res = model.config().model.resolution;
    let threshold = model.config().train.mask_threshold;

    let originals = files.iter().map(|f| load_image(f, None)).collect::<Result<Vec<_>>>()?;
    let resized = files.iter().map(|f| load_image(f, Some((res, res)))).collect::<Result<Vec<_>>>()?;
    let name = images_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let set = validate_image_set(ImageSet::new(name, resized))?;
    let out = {
        let _guard = no_grad();
        model.forward_set(&set)?
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut result = InferOutcome {
        masks: Vec::with_capacity(files.len()),
        overlays: Vec::new(),
        class_index: out.class_index,
    };
    for ((file, original), soft) in files.iter().zip(&originals).zip(out.masks.soft_masks()?) {
        let mask: Mask = resize_soft_mask(&soft, original.height, original.width).binarize(threshold);
        let stem = file.file_stem().expect("png has a stem").to_string_lossy();
        let path = out_dir.join(format!("{stem}.png"));
        save_mask(&path, &mask)?;
        result.masks.push(path);
        if with_overlay {
            let path = out_dir.join(format!("{stem}_overlay.png"));
            overlay(original, &mask)?.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            result.overlays.push(path);
        }
    }
    Ok(result)
}
