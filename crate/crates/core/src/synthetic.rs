//! Procedural portraits for tests, demos and smoke runs. Each face is an
//! ellipse of skin with eyes and lips; the "made-up" version tints the lips
//! and eyelids, the bare version keeps them natural.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MakeupSample;
use crate::error::{Error, Result};
use crate::face::EllipseParser;
use crate::image::{Image, RoiMask};

#[derive(Debug, Clone, Copy)]
struct Face {
    skin: [f32; 3],
    background: [f32; 3],
    lip_natural: [f32; 3],
    lip_makeup: [f32; 3],
    shadow: [f32; 3],
    cy: f32,
    cx: f32,
}

fn face(seed: u64) -> Face {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = |lo: f32, hi: f32| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
    let skin_base = rgb(0.3, 0.9);
    let background = rgb(0.0, 1.0);
    let lip_makeup = rgb(0.0, 1.0);
    let shadow = rgb(0.0, 1.0);
    Face {
        skin: [skin_base[0], skin_base[0] * 0.8, skin_base[0] * 0.65],
        background,
        lip_natural: [skin_base[0] * 0.85, skin_base[0] * 0.5, skin_base[0] * 0.5],
        lip_makeup: [0.6 + 0.4 * lip_makeup[0], 0.3 * lip_makeup[1], 0.1 + 0.4 * lip_makeup[2]],
        shadow,
        cy: 0.5 + (rng.random::<f32>() - 0.5) * 0.04,
        cx: 0.5 + (rng.random::<f32>() - 0.5) * 0.04,
    }
}

fn render(f: &Face, size: usize, makeup: bool) -> RgbImage {
    let s = size as f32;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
            let (du, dv) = ((u - f.cx) / 0.3, (v - f.cy) / 0.4);
            let mut c = f.background;
            if du * du + dv * dv <= 1.0 {
                c = f.skin;
                let lip = ((u - f.cx) / 0.12).powi(2) + ((v - (f.cy + 0.2)) / 0.04).powi(2) <= 1.0;
                let eye = |ex: f32| ((u - ex) / 0.06).powi(2) + ((v - (f.cy - 0.08)) / 0.03).powi(2);
                let (el, er) = (eye(f.cx - 0.12), eye(f.cx + 0.12));
                if lip {
                    c = if makeup { f.lip_makeup } else { f.lip_natural };
                } else if el <= 0.35 || er <= 0.35 {
                    c = [0.1, 0.08, 0.08];
                } else if el <= 1.6 || er <= 1.6 {
                    c = if makeup { mix(f.skin, f.shadow, 0.6) } else { [0.95, 0.95, 0.95] };
                }
            }
            img.put_pixel(x as u32, y as u32, Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    img
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// `(made-up, bare)` 8-bit renderings of face `seed`.
pub fn portrait_pair(seed: u64, size: usize) -> (RgbImage, RgbImage) {
    let f = face(seed);
    (render(&f, size, true), render(&f, size, false))
}

/// In-memory training sample with the default ellipse mask.
pub fn sample(seed: u64, size: usize) -> MakeupSample {
    let (made_up, bare) = portrait_pair(seed, size);
    let parser = EllipseParser::default();
    MakeupSample {
        id: format!("face_{seed:04}"),
        source: Image::from_rgb8(&made_up),
        mask: RoiMask::from_fn(size, size, |y, x| parser.contains(size, size, y, x)),
        bare: Image::from_rgb8(&bare),
    }
}

/// Writes `count` portraits as a dataset root: `images/` always, plus
/// `bare/` when `with_bare` is set.
pub fn write_dataset(root: &Path, count: usize, size: usize, with_bare: bool) -> Result<()> {
    for sub in ["images", "bare"] {
        if sub == "bare" && !with_bare {
            continue;
        }
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..count as u64 {
        let (made_up, bare) = portrait_pair(i, size);
        let name = format!("face_{i:04}.png");
        let p = root.join("images").join(&name);
        made_up.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        if with_bare {
            let p = root.join("bare").join(&name);
            bare.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn made_up_and_bare_differ_only_inside_the_face() {
        let s = sample(3, 64);
        s.validate().unwrap();
        let mut inside_diff = 0;
        for y in 0..64 {
            for x in 0..64 {
                let differs = s.source.pixel(y, x) != s.bare.pixel(y, x);
                if differs {
                    assert!(s.mask.get(y, x), "difference outside mask at {y},{x}");
                    inside_diff += 1;
                }
            }
        }
        assert!(inside_diff > 20);
    }

    #[test]
    fn faces_vary_with_seed() {
        assert_ne!(portrait_pair(0, 32).0, portrait_pair(1, 32).0);
        assert_eq!(portrait_pair(5, 32), portrait_pair(5, 32));
    }
}
