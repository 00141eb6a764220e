//! On-disk datasets: one directory per image set holding `images/*.png` and
//! optionally `masks/*.png` with matching file names; a manifest lists set
//! directories one per line.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::{validate_image_set, Image, ImageSet, Mask};

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn image_from_rgb8(buf: &RgbImage) -> Image {
    let data = buf.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect();
    Image {
        height: buf.height() as usize,
        width: buf.width() as usize,
        data,
    }
}

pub fn image_to_rgb8(image: &Image) -> RgbImage {
    let raw = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(image.width as u32, image.height as u32, raw).expect("consistent size")
}

pub fn mask_to_gray8(mask: &Mask) -> GrayImage {
    let raw = mask.data.iter().map(|v| if *v >= 0.5 { 255 } else { 0 }).collect();
    GrayImage::from_raw(mask.width as u32, mask.height as u32, raw).expect("consistent size")
}

/// 8-bit RGB PNG scaled to `[0, 1]`, resized (bilinear) when `size` differs.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Image> {
    let mut rgb = open(path)?.to_rgb8();
    if let Some((h, w)) = size {
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(image_from_rgb8(&rgb))
}

/// Grayscale PNG; values of 128 and above are foreground. Resized with
/// nearest-neighbour sampling so the result stays binary.
pub fn load_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Mask> {
    let mut g = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        if (g.height() as usize, g.width() as usize) != (h, w) {
            g = imageops::resize(&g, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let data = g.as_raw().iter().map(|v| f64::from(u8::from(*v >= 128))).collect();
    Mask::new(g.height() as usize, g.width() as usize, data)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    image_to_rgb8(image).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    mask_to_gray8(mask).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Image with foreground pixels tinted red at half opacity.
pub fn overlay(image: &Image, mask: &Mask) -> Result<RgbImage> {
    let mut rgb = image_to_rgb8(image);
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::shape("overlay", "mask and image sizes differ"));
    }
    for (i, px) in rgb.pixels_mut().enumerate() {
        if mask.data[i] >= 0.5 {
            let Rgb([r, g, b]) = *px;
            *px = Rgb([((r as u16 + 255) / 2) as u8, g / 2, b / 2]);
        }
    }
    Ok(rgb)
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    if (mask.height, mask.width) == (height, width) {
        return mask.clone();
    }
    let g = imageops::resize(&mask_to_gray8(mask), width as u32, height as u32, FilterType::Nearest);
    let data = g.pixels().map(|Luma([v])| f64::from(u8::from(*v >= 128))).collect();
    Mask::new(height, width, data).expect("consistent size")
}

/// Bilinear resize of a soft mask; values stay in `[0, 1]`.
pub fn resize_soft_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    if (mask.height, mask.width) == (height, width) {
        return mask.clone();
    }
    let raw: Vec<f32> = mask.data.iter().map(|v| *v as f32).collect();
    let buf = ImageBuffer::<Luma<f32>, Vec<f32>>::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("consistent size");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let data = out.as_raw().iter().map(|v| f64::from(*v).clamp(0.0, 1.0)).collect();
    Mask::new(height, width, data).expect("consistent size")
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// One set directory, resized to `size`. The directory name becomes the set
/// id and class hint.
pub fn load_set_dir(dir: &Path, size: (usize, usize), require_masks: bool) -> Result<ImageSet> {
    let images_dir = dir.join("images");
    let files = list_pngs(&images_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no PNG images", images_dir.display())));
    }
    let images = files.iter().map(|f| load_image(f, Some(size))).collect::<Result<Vec<_>>>()?;
    let masks_dir = dir.join("masks");
    let masks = if masks_dir.is_dir() {
        let masks = files
            .iter()
            .map(|f| {
                let m = masks_dir.join(f.file_name().expect("file has a name"));
                if !m.is_file() {
                    return Err(Error::Data(format!("{}: missing mask", m.display())));
                }
                load_mask(&m, Some(size))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(masks)
    } else if require_masks {
        return Err(Error::MissingMasks);
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut set = ImageSet::new(name.clone(), images);
    set.gt_masks = masks;
    set.class_hint = Some(name);
    validate_image_set(set)
}

/// Set directories listed in a manifest, relative paths resolved against
/// the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no sets", path.display())));
    }
    Ok(dirs)
}

pub fn load_manifest(path: &Path, size: (usize, usize), require_masks: bool) -> Result<Vec<ImageSet>> {
    read_manifest(path)?
        .iter()
        .map(|d| load_set_dir(d, size, require_masks))
        .collect()
}

/// Writes `set` in the on-disk layout under `dir`, naming files `000.png`,
/// `001.png`, ...
pub fn write_set_dir(dir: &Path, set: &ImageSet) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (i, img) in set.images.iter().enumerate() {
        save_image(&images.join(format!("{i:03}.png")), img)?;
    }
    if let Some(masks) = &set.gt_masks {
        let mdir = dir.join("masks");
        std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for (i, m) in masks.iter().enumerate() {
            save_mask(&mdir.join(format!("{i:03}.png")), m)?;
        }
    }
    Ok(())
}
