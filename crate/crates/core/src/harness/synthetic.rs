//! Seeded toy co-segmentation sets: one common foreground object (a
//! reddish ellipse) on varied smooth backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{Image, ImageSet, Mask};

pub fn toy_set(n: usize, size: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let s = size as f64;
    for _ in 0..n {
        let bg0: [f64; 3] = [rng.random_range(0.0..0.5), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
        let bg1: [f64; 3] = [rng.random_range(0.0..0.5), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
        let fg: [f64; 3] = [rng.random_range(0.8..1.0), rng.random_range(0.0..0.25), rng.random_range(0.0..0.25)];
        let cy = rng.random_range(0.3..0.7) * s;
        let cx = rng.random_range(0.3..0.7) * s;
        let ry = rng.random_range(0.15..0.3) * s;
        let rx = rng.random_range(0.15..0.3) * s;
        let mut img = Image::filled(size, size, [0.0; 3]);
        let mut m = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let t = (x + y) as f64 / (2.0 * s);
                let inside = ((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2) <= 1.0;
                let base = if inside { fg } else { [0, 1, 2].map(|c| bg0[c] * (1.0 - t) + bg1[c] * t) };
                let px = base.map(|v| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0));
                img.set_pixel(y, x, px);
                m[y * size + x] = f64::from(u8::from(inside));
            }
        }
        images.push(img);
        masks.push(Mask::new(size, size, m).expect("consistent size"));
    }
    let mut set = ImageSet::new(format!("toy-{seed}"), images).with_masks(masks);
    set.class_hint = Some("toy".into());
    set
}
