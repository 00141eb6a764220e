//! Frozen CLIP embeddings: prompt rendering, backends and the similarity
//! bundle consumed by the interaction and regularisation stages.

mod external;
mod fixture;
mod prompts;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{column_sums, ClipBundle, Image};

pub use external::{preprocess, ExternalBackend, ExternalConfig, CLIP_INPUT_SIZE};
pub use fixture::{hashed_embedding, image_key, EntryKind, FixtureStore};
pub use prompts::{check_template, PromptBank, CLASS_SLOT};

/// Read-only image and text encoders producing unit-norm rows.
pub trait ClipBackend: Send + Sync {
    fn identity(&self) -> String;

    fn dim(&self) -> usize;

    /// `N x D`.
    fn encode_images(&self, images: &[Image]) -> Result<Tensor>;

    /// `T x D`, one row per text.
    fn encode_texts(&self, texts: &[String]) -> Result<Tensor>;

    /// Digest of every encoder weight; unchanged for the backend's lifetime.
    fn parameter_checksum(&self) -> Result<String>;

    /// `P x D` in bank order.
    fn encode_prompts(&self, bank: &PromptBank) -> Result<Tensor> {
        self.encode_texts(bank.rendered())
    }
}

/// Replays recorded embeddings. Misses are errors unless `synthesize` is
/// set, in which case the hashed generator supplies them.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    store: FixtureStore,
    synthesize: bool,
}

impl FixtureBackend {
    pub fn strict(store: FixtureStore) -> Self {
        Self { store, synthesize: false }
    }

    pub fn synthesizing(store: FixtureStore) -> Self {
        Self { store, synthesize: true }
    }

    pub fn store(&self) -> &FixtureStore {
        &self.store
    }

    fn lookup(&self, kind: EntryKind, key: &str) -> Result<Vec<f64>> {
        match self.store.get(kind, key) {
            Some(v) => Ok(v.to_vec()),
            None if self.synthesize => Ok(hashed_embedding(kind, key, self.store.dim())),
            None => Err(Error::FixtureMiss {
                kind: kind.as_str(),
                key: key.to_string(),
            }),
        }
    }

    fn rows(&self, kind: EntryKind, keys: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(keys.len() * self.dim());
        for k in keys {
            data.extend(self.lookup(kind, k)?);
        }
        Tensor::from_vec(data, &[keys.len(), self.dim()])
    }
}

impl ClipBackend for FixtureBackend {
    fn identity(&self) -> String {
        format!("fixture(d={}, entries={})", self.store.dim(), self.store.len())
    }

    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn encode_images(&self, images: &[Image]) -> Result<Tensor> {
        let keys: Vec<String> = images.iter().map(image_key).collect();
        self.rows(EntryKind::Image, &keys)
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Tensor> {
        self.rows(EntryKind::Prompt, texts)
    }

    fn parameter_checksum(&self) -> Result<String> {
        Ok(self.store.checksum())
    }
}

/// Encodes `images` and `prompts` with `source` into a new store.
pub fn record_fixtures(source: &dyn ClipBackend, images: &[Image], prompts: &[String]) -> Result<FixtureStore> {
    let mut store = FixtureStore::new(source.dim());
    let d = source.dim();
    let img = source.encode_images(images)?;
    for (image, row) in images.iter().zip(img.data().chunks(d)) {
        store.insert(EntryKind::Image, image_key(image), row.to_vec())?;
    }
    let txt = source.encode_texts(prompts)?;
    for (p, row) in prompts.iter().zip(txt.data().chunks(d)) {
        store.insert(EntryKind::Prompt, p.clone(), row.to_vec())?;
    }
    Ok(store)
}

/// Cosine similarities `s = h_img h_txt^T` and their column sums.
pub fn similarity(h_img: &Tensor, h_txt: &Tensor) -> Result<ClipBundle> {
    let (_, d) = h_img.dims2()?;
    let (p, d2) = h_txt.dims2()?;
    if d != d2 {
        return Err(Error::shape("similarity", format!("image width {d}, text width {d2}")));
    }
    let h_img = h_img.detach();
    let h_txt = h_txt.detach();
    let s = h_img.matmul(&h_txt.t()?)?;
    let sigma = column_sums(s.data(), p);
    Ok(ClipBundle { h_img, h_txt, s, sigma, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..n)
            .flat_map(|_| fixture::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        Tensor::from_vec(data, &[n, d]).unwrap()
    }

    #[test]
    fn similarity_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_rows(3, 4, &mut rng);
        let b = unit_rows(2, 4, &mut rng);
        let bundle = similarity(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let dot: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[j * 4 + k]).sum();
                assert_abs_diff_eq!(bundle.s.data()[i * 2 + j], dot, epsilon = 1e-12);
            }
        }
        bundle.validate().unwrap();
    }

    #[test]
    fn identical_and_orthogonal_rows() {
        let e = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = similarity(&e, &e).unwrap();
        assert_eq!(b.s.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.sigma, vec![1.0, 1.0]);
        assert!(similarity(&e, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn fixture_replays_bit_exactly_and_misses_in_strict_mode() {
        let img = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        let other = Image::filled(4, 4, [0.9, 0.4, 0.6]);
        let mut store = FixtureStore::new(3);
        let v = vec![0.6, 0.0, 0.8];
        store.insert(EntryKind::Image, image_key(&img), v.clone()).unwrap();
        let strict = FixtureBackend::strict(store.clone());
        let rows = strict.encode_images(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(&rows.data()[..3], v.as_slice());
        assert_eq!(&rows.data()[3..], v.as_slice());
        assert!(matches!(
            strict.encode_images(std::slice::from_ref(&other)),
            Err(Error::FixtureMiss { kind: "image", .. })
        ));
        let synth = FixtureBackend::synthesizing(store);
        let row = synth.encode_images(&[other]).unwrap();
        let n: f64 = row.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prompt_rows_follow_vocabulary_order() {
        let backend = FixtureBackend::synthesizing(FixtureStore::new(8));
        let ab = backend.encode_prompts(&PromptBank::new(&["a", "b"], "[CLASS]").unwrap()).unwrap();
        let ba = backend.encode_prompts(&PromptBank::new(&["b", "a"], "[CLASS]").unwrap()).unwrap();
        assert_eq!(&ab.data()[..8], &ba.data()[8..]);
        assert_eq!(&ab.data()[8..], &ba.data()[..8]);
        let one = backend.encode_prompts(&PromptBank::new(&["a"], "[CLASS]").unwrap()).unwrap();
        assert_eq!(one.shape(), &[1, 8]);
    }

    #[test]
    fn recording_then_replaying_is_identical() {
        let source = FixtureBackend::synthesizing(FixtureStore::new(6));
        let images = vec![Image::filled(3, 3, [0.1, 0.2, 0.3])];
        let prompts = vec!["a photo of a cow".to_string()];
        let store = record_fixtures(&source, &images, &prompts).unwrap();
        let replay = FixtureBackend::strict(store);
        assert_eq!(
            replay.encode_images(&images).unwrap().data(),
            source.encode_images(&images).unwrap().data()
        );
        assert_eq!(
            replay.encode_texts(&prompts).unwrap().data(),
            source.encode_texts(&prompts).unwrap().data()
        );
    }
}
