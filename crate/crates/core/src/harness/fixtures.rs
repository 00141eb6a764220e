//! Recording CLIP embeddings for a dataset tree into a fixture file.

use std::path::Path;

use walkdir::WalkDir;

use super::data::{load_image, load_mask};
use crate::clip::{record_fixtures, ClipBackend, FixtureStore, PromptBank};
use crate::error::{Error, Result};
use crate::types::Image;

/// Class names from a prompt file, one per line; blank lines and `#`
/// comments are skipped.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no class names", path.display())));
    }
    Ok(names)
}

/// Every PNG under `root` (outside `masks/` directories) resized to
/// `resolution`, followed by the foreground-only version of each image that
/// has a sibling `../masks/<name>` file.
pub fn collect_images(root: &Path, resolution: usize) -> Result<Vec<Image>> {
    let mut files = Vec::new();
    let walker = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !(e.file_type().is_dir() && e.file_name() == "masks"));
    for entry in walker {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p.to_path_buf());
        }
    }
    let size = (resolution, resolution);
    let mut images = Vec::with_capacity(files.len());
    let mut masked = Vec::new();
    for f in &files {
        let img = load_image(f, Some(size))?;
        let mask_path = f
            .parent()
            .and_then(Path::parent)
            .zip(f.file_name())
            .map(|(set, name)| set.join("masks").join(name));
        if let Some(mp) = mask_path.filter(|p| p.is_file()) {
            masked.push(img.masked(&load_mask(&mp, Some(size))?)?);
        }
        images.push(img);
    }
    images.extend(masked);
    Ok(images)
}

/// Encodes the images under `root` and the prompts rendered from
/// `prompt_file` with `template`.
pub fn record_tree(
    source: &dyn ClipBackend,
    root: &Path,
    prompt_file: &Path,
    template: &str,
    resolution: usize,
) -> Result<FixtureStore> {
    let bank = PromptBank::new(&read_class_names(prompt_file)?, template)?;
    let images = collect_images(root, resolution)?;
    record_fixtures(source, &images, bank.rendered())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{image_key, EntryKind, FixtureBackend};
    use crate::harness::data::write_set_dir;
    use crate::harness::synthetic::toy_set;

    #[test]
    fn records_plain_and_masked_images_and_prompts() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(2, 8, 3);
        write_set_dir(&dir.path().join("toy"), &set).unwrap();
        std::fs::write(dir.path().join("classes.txt"), "# vocabulary\ncow\n\nsheep\n").unwrap();
        let source = FixtureBackend::synthesizing(FixtureStore::new(6));
        let store = record_tree(&source, dir.path(), &dir.path().join("classes.txt"), "a [CLASS]", 8).unwrap();
        assert_eq!(store.len(), 2 + 2 + 2);
        assert!(store.get(EntryKind::Prompt, "a sheep").is_some());
        let masks = set.gt_masks.as_ref().unwrap();
        let m0 = set.images[0].masked(&masks[0]).unwrap();
        assert!(store.get(EntryKind::Image, &image_key(&m0)).is_some());
    }

    #[test]
    fn empty_prompt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "\n# none\n").unwrap();
        assert!(read_class_names(&path).is_err());
    }
}
