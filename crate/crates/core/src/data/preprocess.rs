//! Resizing and normalization. Images use bilinear sampling with half-pixel
//! centers; masks use nearest-neighbor so they stay binary.

use image::{GrayImage, RgbImage};

use crate::image::{Image, RoiMask};

/// Bilinear resize. Output values are clamped to the hull of their four source
/// taps, so the result never leaves the input's value range.
pub fn resize_bilinear(src: &Image, out_h: usize, out_w: usize) -> Image {
    let (in_h, in_w) = src.dims();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let ys: Vec<(usize, usize, f32)> = (0..out_h).map(|y| taps(y, in_h, out_h)).collect();
    let xs: Vec<(usize, usize, f32)> = (0..out_w).map(|x| taps(x, in_w, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let a = src.get(y0, x0, c);
                let b = src.get(y0, x1, c);
                let d = src.get(y1, x0, c);
                let e = src.get(y1, x1, c);
                let top = a + fx * (b - a);
                let bottom = d + fx * (e - d);
                let v = top + fy * (bottom - top);
                let lo = a.min(b).min(d).min(e);
                let hi = a.max(b).max(d).max(e);
                data.push(v.clamp(lo, hi));
            }
        }
    }
    Image::new(out_h, out_w, data).expect("sized above")
}

fn taps(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

pub fn resize_mask_nearest(src: &RoiMask, out_h: usize, out_w: usize) -> RoiMask {
    let (in_h, in_w) = src.dims();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let near = |o: usize, in_len: usize, out_len: usize| {
        (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    RoiMask::from_fn(out_h, out_w, |y, x| src.get(near(y, in_h, out_h), near(x, in_w, out_w)))
}

/// Normalizes an 8-bit RGB raster to `[-1, 1]` and resizes to `resolution²`.
pub fn preprocess(raw: &RgbImage, resolution: usize) -> Image {
    resize_bilinear(&Image::from_rgb8(raw), resolution, resolution)
}

pub fn preprocess_mask(raw: &GrayImage, resolution: usize) -> RoiMask {
    resize_mask_nearest(&RoiMask::from_luma8(raw), resolution, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};
    use proptest::prelude::*;

    /// Direct per-pixel bilinear evaluation in f64 with explicit weights.
    fn oracle(src: &Image, out_h: usize, out_w: usize, y: usize, x: usize, c: usize) -> f64 {
        let (h, w) = src.dims();
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).max(0.0).min((h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).max(0.0).min((w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
        let g = |yy: usize, xx: usize| src.get(yy, xx, c) as f64;
        (1.0 - wy) * (1.0 - wx) * g(y0, x0) + (1.0 - wy) * wx * g(y0, x1) + wy * (1.0 - wx) * g(y1, x0) + wy * wx * g(y1, x1)
    }

    #[test]
    fn white_input_becomes_all_ones() {
        let raw = RgbImage::from_pixel(512, 512, Rgb([255, 255, 255]));
        let img = preprocess(&raw, 256);
        assert_eq!(img.dims(), (256, 256));
        assert!(img.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn black_input_becomes_all_minus_ones() {
        let raw = RgbImage::from_pixel(256, 256, Rgb([0, 0, 0]));
        let img = preprocess(&raw, 256);
        assert!(img.data().iter().all(|v| *v == -1.0));
    }

    #[test]
    fn same_size_is_passthrough() {
        let img = Image::from_fn(8, 8, |y, x, c| ((y * 8 + x) * 3 + c) as f32 / 200.0 - 0.5);
        assert_eq!(resize_bilinear(&img, 8, 8), img);
    }

    #[test]
    fn mask_resize_stays_binary() {
        let raw = GrayImage::from_fn(37, 53, |x, y| Luma([if (x * y) % 7 < 3 { 255 } else { 0 }]));
        let m = preprocess_mask(&raw, 64);
        assert_eq!(m.dims(), (64, 64));
        assert!(m.data().iter().all(|v| *v <= 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn random_rect_resize_is_convex_and_matches_oracle(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw = RgbImage::from_fn(300, 200, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
            let src = Image::from_rgb8(&raw);
            let lo = src.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = src.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let out = preprocess(&raw, 256);
            prop_assert_eq!(out.dims(), (256, 256));
            for y in 0..256 {
                for x in 0..256 {
                    for c in 0..3 {
                        let v = out.get(y, x, c);
                        prop_assert!(v >= lo && v <= hi);
                        prop_assert!((v as f64 - oracle(&src, 256, 256, y, x, c)).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
