//! Horizontal flip, the only augmentation used. Image and mask always flip together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, RoiMask};

pub fn augment_flip(image: &Image, mask: &RoiMask, coin: bool) -> Result<(Image, RoiMask)> {
    if image.dims() != mask.dims() {
        return Err(Error::shape(
            "augment_flip",
            format!("{}x{}", image.height(), image.width()),
            format!("mask {}x{}", mask.height(), mask.width()),
        ));
    }
    if !coin {
        return Ok((image.clone(), mask.clone()));
    }
    Ok((image.flip_horizontal(), mask.flip_horizontal()))
}

/// RNG for one sample in one epoch, independent of which worker prepares it.
pub fn sample_rng(seed: u64, id: &str, epoch: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"augment");
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn flip_coin(seed: u64, id: &str, epoch: u64) -> bool {
    sample_rng(seed, id, epoch).random_bool(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Image, RoiMask) {
        let img = Image::from_fn(5, 7, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0 - 1.0);
        let mask = RoiMask::from_fn(5, 7, |y, x| x < 3 && y > 1);
        (img, mask)
    }

    #[test]
    fn tails_is_identity() {
        let (img, mask) = fixture();
        assert_eq!(augment_flip(&img, &mask, false).unwrap(), (img, mask));
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, mask) = fixture();
        let (i1, m1) = augment_flip(&img, &mask, true).unwrap();
        assert_ne!(i1, img);
        assert_eq!(augment_flip(&i1, &m1, true).unwrap(), (img, mask));
    }

    #[test]
    fn single_marked_column_moves_to_mirror_index() {
        let (img, _) = fixture();
        let w = img.width();
        for c in 0..w {
            let mask = RoiMask::from_fn(5, w, |y, x| y == 2 && x == c);
            let (fi, fm) = augment_flip(&img, &mask, true).unwrap();
            let mirrored = w - 1 - c;
            let ones: Vec<usize> = (0..w).filter(|x| fm.get(2, *x)).collect();
            assert_eq!(ones, vec![mirrored]);
            assert_eq!(fi.pixel(2, mirrored), img.pixel(2, c));
        }
    }

    #[test]
    fn masked_pixels_follow_the_mirror() {
        let (img, mask) = fixture();
        let (fi, fm) = augment_flip(&img, &mask, true).unwrap();
        let w = img.width();
        for y in 0..5 {
            for x in 0..w {
                assert_eq!(fm.get(y, w - 1 - x), mask.get(y, x));
                assert_eq!(fi.pixel(y, w - 1 - x), img.pixel(y, x));
            }
        }
    }

    #[test]
    fn coin_is_a_pure_function_of_seed_id_epoch() {
        let draws: Vec<bool> = (0..64).map(|e| flip_coin(3, "img_001", e)).collect();
        let again: Vec<bool> = (0..64).map(|e| flip_coin(3, "img_001", e)).collect();
        assert_eq!(draws, again);
        assert!(draws.iter().any(|b| *b) && draws.iter().any(|b| !*b));
    }

    #[test]
    fn misaligned_pair_is_rejected() {
        let (img, _) = fixture();
        assert!(augment_flip(&img, &RoiMask::zeros(5, 6), true).is_err());
    }
}
