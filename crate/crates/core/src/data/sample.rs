use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::augment::flip_coin;
use super::preprocess::{preprocess, preprocess_mask};
use super::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::face::{build_roi_mask, parse_face, remove_makeup, FaceParser, MakeupRegionPolicy, MakeupRemover};
use crate::image::{load_luma8, load_rgb8, Image, RoiMask};

/// One training triple `(I_D, M, N')`.
#[derive(Debug, Clone, PartialEq)]
pub struct MakeupSample {
    pub id: String,
    pub source: Image,
    pub mask: RoiMask,
    pub bare: Image,
}

impl MakeupSample {
    pub fn validate(&self) -> Result<()> {
        let dims = self.source.dims();
        if self.bare.dims() != dims || self.mask.dims() != dims {
            return Err(Error::shape(
                "MakeupSample",
                format!("{}x{}", dims.0, dims.1),
                format!("bare {:?}, mask {:?}", self.bare.dims(), self.mask.dims()),
            ));
        }
        if !self.source.is_canonical() || !self.bare.is_canonical() {
            return Err(Error::SampleRejected {
                id: self.id.clone(),
                reason: "pixel values outside [-1, 1]".into(),
            });
        }
        Ok(())
    }

    /// Mirrors all three planes together.
    pub fn flipped(&self, coin: bool) -> Self {
        if !coin {
            return self.clone();
        }
        Self {
            id: self.id.clone(),
            source: self.source.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
            bare: self.bare.flip_horizontal(),
        }
    }
}

#[derive(Clone)]
pub struct FaceServices {
    pub parser: Arc<dyn FaceParser>,
    pub policy: MakeupRegionPolicy,
    pub remover: Arc<dyn MakeupRemover>,
}

impl FaceServices {
    pub fn is_serial(&self) -> bool {
        self.parser.is_serial() || self.remover.is_serial()
    }
}

/// Loads or derives the mask and bare face for one entry. Derived planes are
/// written to `cache_dir` and returned exactly as a later cache read would see them.
pub fn make_sample(
    entry: &ManifestEntry,
    cache_dir: &Path,
    services: &FaceServices,
    resolution: usize,
) -> Result<MakeupSample> {
    let source = preprocess(&load_rgb8(&entry.image)?, resolution);

    let mask = match &entry.mask {
        Some(path) => preprocess_mask(&load_luma8(path)?, resolution),
        None => {
            let parsing = parse_face(&source, &entry.id, services.parser.as_ref())?;
            let mask = build_roi_mask(&parsing, &services.policy);
            if !mask.is_empty() {
                mask.save(&cache_dir.join("masks").join(format!("{}.png", entry.id)))?;
            }
            mask
        }
    };
    if mask.is_empty() {
        return Err(Error::SampleRejected {
            id: entry.id.clone(),
            reason: "no face region found (mask is empty)".into(),
        });
    }

    let bare = match &entry.bare {
        Some(path) => preprocess(&load_rgb8(path)?, resolution),
        None => {
            let derived = remove_makeup(&source, &entry.id, services.remover.as_ref())?;
            let quantized = Image::from_rgb8(&derived.to_rgb8());
            quantized.save(&cache_dir.join("bare").join(format!("{}.png", entry.id)))?;
            quantized
        }
    };

    let sample = MakeupSample {
        id: entry.id.clone(),
        source,
        mask,
        bare,
    };
    sample.validate()?;
    Ok(sample)
}

/// Prepares samples on demand, memoizing up to `capacity` of them, and applies
/// the per-(seed, id, epoch) flip.
pub struct SampleLoader {
    manifest: Arc<DatasetManifest>,
    services: FaceServices,
    resolution: usize,
    seed: u64,
    flip: bool,
    capacity: usize,
    cache: Mutex<HashMap<String, Arc<MakeupSample>>>,
}

impl SampleLoader {
    pub fn new(
        manifest: Arc<DatasetManifest>,
        services: FaceServices,
        resolution: usize,
        seed: u64,
        flip: bool,
    ) -> Self {
        Self {
            manifest,
            services,
            resolution,
            seed,
            flip,
            capacity: 256,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn services(&self) -> &FaceServices {
        &self.services
    }

    /// Unaugmented sample.
    pub fn load(&self, id: &str) -> Result<Arc<MakeupSample>> {
        if let Some(s) = self.cache.lock().expect("sample cache poisoned").get(id) {
            return Ok(s.clone());
        }
        let entry = self
            .manifest
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("unknown sample id `{id}`")))?;
        let sample = Arc::new(make_sample(entry, &self.manifest.cache_dir, &self.services, self.resolution)?);
        let mut cache = self.cache.lock().expect("sample cache poisoned");
        if cache.len() < self.capacity {
            cache.insert(id.to_string(), sample.clone());
        }
        Ok(sample)
    }

    /// Augmented batch. Output order follows `ids` regardless of worker scheduling.
    pub fn batch(&self, ids: &[&str], epoch: u64) -> Result<Vec<MakeupSample>> {
        let items: Vec<(&str, u64)> = ids.iter().map(|id| (*id, epoch)).collect();
        self.batch_at(&items)
    }

    /// Like [`batch`](Self::batch) but each sample carries its own epoch, for
    /// batches that straddle an epoch boundary.
    pub fn batch_at(&self, items: &[(&str, u64)]) -> Result<Vec<MakeupSample>> {
        let prep = |&(id, epoch): &(&str, u64)| -> Result<MakeupSample> {
            let s = self.load(id)?;
            let coin = self.flip && flip_coin(self.seed, id, epoch);
            Ok(s.flipped(coin))
        };
        if self.services.is_serial() {
            items.iter().map(prep).collect()
        } else {
            items.par_iter().map(prep).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DataConfig, Provenance};
    use crate::face::{ConstantParser, EllipseParser, FaceClass, IdentityRemover};
    use image::{Luma, Rgb, RgbImage};

    fn services(parser: Arc<dyn FaceParser>) -> FaceServices {
        FaceServices {
            parser,
            policy: MakeupRegionPolicy::default(),
            remover: Arc::new(IdentityRemover),
        }
    }

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 13 % 256) as u8, (y * 7 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn precomputed_planes_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["images", "masks", "bare"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        gradient(16, 16).save(root.join("images/a.png")).unwrap();
        let bare = RgbImage::from_pixel(16, 16, Rgb([100, 90, 80]));
        bare.save(root.join("bare/a.png")).unwrap();
        let mask = image::GrayImage::from_fn(16, 16, |x, _| Luma([if x < 8 { 255 } else { 0 }]));
        mask.save(root.join("masks/a.png")).unwrap();

        let m = load_dataset(root, &DataConfig::default()).unwrap();
        let s = make_sample(&m.entries[0], &m.cache_dir, &services(Arc::new(ConstantParser::default())), 16).unwrap();
        assert_eq!(s.source, preprocess(&gradient(16, 16), 16));
        assert_eq!(s.bare, preprocess(&bare, 16));
        assert_eq!(s.mask, preprocess_mask(&mask, 16));
        assert!(!m.cache_dir.exists());
    }

    #[test]
    fn derived_planes_are_cached_and_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        gradient(16, 16).save(root.join("images/a.png")).unwrap();
        gradient(32, 32).save(root.join("images/b.png")).unwrap();
        let svc = services(Arc::new(ConstantParser(FaceClass::Skin)));

        let m = load_dataset(root, &DataConfig::default()).unwrap();
        let first = make_sample(&m.entries[0], &m.cache_dir, &svc, 16).unwrap();
        assert_eq!(first.mask, RoiMask::ones(16, 16));
        assert_eq!(first.bare, first.source);
        // off-grid after resizing: the returned bare is the 8-bit quantized estimate
        let resized = make_sample(&m.entries[1], &m.cache_dir, &svc, 16).unwrap();
        for (b, s) in resized.bare.data().iter().zip(resized.source.data()) {
            assert!((b - s).abs() <= 1.0 / 255.0 + 1e-6);
        }

        let m2 = load_dataset(root, &DataConfig::default()).unwrap();
        assert_eq!(m2.entries[0].mask_source, Provenance::Cached);
        assert_eq!(m2.entries[0].bare_source, Provenance::Cached);
        let second = make_sample(&m2.entries[0], &m2.cache_dir, &svc, 16).unwrap();
        assert_eq!(first, second);
        assert_eq!(resized, make_sample(&m2.entries[1], &m2.cache_dir, &svc, 16).unwrap());
    }

    #[test]
    fn empty_mask_rejects_sample() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        gradient(8, 8).save(dir.path().join("images/a.png")).unwrap();
        let m = load_dataset(dir.path(), &DataConfig::default()).unwrap();
        let err = make_sample(&m.entries[0], &m.cache_dir, &services(Arc::new(ConstantParser::default())), 8).unwrap_err();
        assert!(matches!(err, Error::SampleRejected { .. }));
    }

    #[test]
    fn loader_stream_is_deterministic_and_synchronized() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        for i in 0..4 {
            gradient(24 + i, 24).save(dir.path().join(format!("images/s{i}.png"))).unwrap();
        }
        let m = Arc::new(load_dataset(dir.path(), &DataConfig::default()).unwrap());
        let mk = || SampleLoader::new(m.clone(), services(Arc::new(EllipseParser::default())), 16, 5, true);
        let (a, b) = (mk(), mk());
        let ids = ["s0", "s1", "s2", "s3"];
        for epoch in 0..6 {
            let ba = a.batch(&ids, epoch).unwrap();
            assert_eq!(ba, b.batch(&ids, epoch).unwrap());
            for s in &ba {
                let base = a.load(&s.id).unwrap();
                let coin = flip_coin(5, &s.id, epoch);
                assert_eq!(*s, base.flipped(coin));
                s.validate().unwrap();
            }
        }
    }
}
