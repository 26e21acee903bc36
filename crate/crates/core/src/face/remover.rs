use std::path::PathBuf;
use std::sync::Arc;

use super::parser::{run_command, FaceParser};
use super::{parse_face, FaceClass, ParsingMap};
use crate::data::preprocess;
use crate::error::{Error, Result};
use crate::image::{load_rgb8, Image};

/// Image with makeup → bare-face estimate of identical size.
pub trait MakeupRemover: Send + Sync {
    fn name(&self) -> &str;

    fn remove(&self, image: &Image, id: &str) -> Result<Image>;

    fn is_serial(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRemover;

impl MakeupRemover for IdentityRemover {
    fn name(&self) -> &str {
        "identity"
    }

    fn remove(&self, image: &Image, _id: &str) -> Result<Image> {
        Ok(image.clone())
    }
}

/// Reads `<dir>/<id>.png`, produced offline by any removal model.
#[derive(Debug, Clone)]
pub struct PrecomputedRemover {
    pub dir: PathBuf,
}

impl MakeupRemover for PrecomputedRemover {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn remove(&self, image: &Image, id: &str) -> Result<Image> {
        let path = self.dir.join(format!("{id}.png"));
        if !path.is_file() {
            return Err(Error::Adapter {
                adapter: self.name().into(),
                id: Some(id.into()),
                reason: format!("no precomputed bare face at {}", path.display()),
            });
        }
        let raw = load_rgb8(&path)?;
        let out = preprocess::resize_bilinear(&Image::from_rgb8(&raw), image.height(), image.width());
        Ok(out)
    }
}

/// Delegates to an external removal program (e.g. a LADN inference script).
/// Same placeholder convention as [`super::CommandParser`]; `{output}` is an RGB PNG.
#[derive(Debug, Clone)]
pub struct CommandRemover {
    pub command: Vec<String>,
    pub asset: Option<PathBuf>,
}

impl MakeupRemover for CommandRemover {
    fn name(&self) -> &str {
        "ladn"
    }

    fn remove(&self, image: &Image, _id: &str) -> Result<Image> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("bare.png");
        image.save(&input)?;
        run_command(self.name(), &self.command, &input, &output, self.asset.as_deref())?;
        let raw = load_rgb8(&output)?;
        Ok(preprocess::resize_bilinear(&Image::from_rgb8(&raw), image.height(), image.width()))
    }

    fn is_serial(&self) -> bool {
        true
    }
}

/// Offline stand-in for a learned remover: inside lip and eye regions it applies
/// a region-restricted bilateral filter followed by partial desaturation toward
/// luma. Pixels outside those regions are returned untouched.
pub struct FlattenRemover {
    pub parser: Arc<dyn FaceParser>,
    pub radius: usize,
    pub sigma_space: f32,
    pub sigma_color: f32,
    /// 0 keeps chroma, 1 removes it.
    pub desaturation: f32,
}

impl FlattenRemover {
    pub fn new(parser: Arc<dyn FaceParser>) -> Self {
        Self {
            parser,
            radius: 2,
            sigma_space: 1.5,
            sigma_color: 0.25,
            desaturation: 0.6,
        }
    }

    fn region_of(class: FaceClass) -> Option<u8> {
        if class.is_lip() {
            Some(1)
        } else if class.is_eye() {
            Some(2)
        } else {
            None
        }
    }

    pub fn flatten(&self, image: &Image, parsing: &ParsingMap) -> Image {
        let (h, w) = image.dims();
        let r = self.radius as isize;
        let inv_space = 1.0 / (2.0 * self.sigma_space * self.sigma_space);
        let inv_color = 1.0 / (2.0 * self.sigma_color * self.sigma_color);
        let mut out = image.clone();
        for y in 0..h {
            for x in 0..w {
                let Some(region) = Self::region_of(parsing.get(y, x)) else {
                    continue;
                };
                let center = image.pixel(y, x);
                let mut acc = [0f32; 3];
                let mut norm = 0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if Self::region_of(parsing.get(ny, nx)) != Some(region) {
                            continue;
                        }
                        let p = image.pixel(ny, nx);
                        let dc: f32 = (0..3).map(|c| (p[c] - center[c]).powi(2)).sum();
                        let ds = (dy * dy + dx * dx) as f32;
                        let wgt = (-ds * inv_space - dc * inv_color).exp();
                        for c in 0..3 {
                            acc[c] += wgt * p[c];
                        }
                        norm += wgt;
                    }
                }
                let smooth = acc.map(|v| v / norm);
                let luma = 0.299 * smooth[0] + 0.587 * smooth[1] + 0.114 * smooth[2];
                let px = smooth.map(|v| (luma + (v - luma) * (1.0 - self.desaturation)).clamp(-1.0, 1.0));
                out.set_pixel(y, x, px);
            }
        }
        out
    }
}

impl MakeupRemover for FlattenRemover {
    fn name(&self) -> &str {
        "flatten"
    }

    fn remove(&self, image: &Image, id: &str) -> Result<Image> {
        let parsing = parse_face(image, id, self.parser.as_ref())?;
        Ok(self.flatten(image, &parsing))
    }

    fn is_serial(&self) -> bool {
        self.parser.is_serial()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::remove_makeup;
    use rand::{Rng, SeedableRng};

    /// Portrait-like fixture: skin ellipse, saturated noisy lips, two eyes.
    fn fixture() -> (Image, ParsingMap) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (48, 40);
        let parsing = ParsingMap::from_fn(h, w, |y, x| {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            if (fy - 0.75).abs() < 0.04 && (fx - 0.5).abs() < 0.2 {
                if fy < 0.75 { FaceClass::UpperLip } else { FaceClass::LowerLip }
            } else if (fy - 0.4).abs() < 0.04 && ((fx - 0.3).abs() < 0.08 || (fx - 0.7).abs() < 0.08) {
                if fx < 0.5 { FaceClass::LeftEye } else { FaceClass::RightEye }
            } else if ((fy - 0.5) / 0.45).powi(2) + ((fx - 0.5) / 0.35).powi(2) < 1.0 {
                FaceClass::Skin
            } else {
                FaceClass::Background
            }
        });
        let img = Image::from_fn(h, w, |y, x, c| {
            let class = parsing.get(y, x);
            let base = if class.is_lip() {
                [0.7, -0.5, -0.3][c]
            } else if class.is_eye() {
                [-0.6, -0.6, -0.2][c]
            } else if class == FaceClass::Skin {
                [0.5, 0.2, 0.0][c]
            } else {
                -0.8
            };
            (base + rng.random_range(-0.2f32..0.2)).clamp(-1.0, 1.0)
        });
        (img, parsing)
    }

    struct FixedParser(ParsingMap);

    impl FaceParser for FixedParser {
        fn name(&self) -> &str {
            "fixed"
        }

        fn parse(&self, _image: &Image, _id: &str) -> Result<ParsingMap> {
            Ok(self.0.clone())
        }
    }

    fn region_variance(img: &Image, parsing: &ParsingMap, pred: impl Fn(FaceClass) -> bool) -> f64 {
        let (h, w) = img.dims();
        let px: Vec<[f32; 3]> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|(y, x)| pred(parsing.get(*y, *x)))
            .map(|(y, x)| img.pixel(y, x))
            .collect();
        let n = px.len() as f64;
        (0..3)
            .map(|c| {
                let mean = px.iter().map(|p| p[c] as f64).sum::<f64>() / n;
                px.iter().map(|p| (p[c] as f64 - mean).powi(2)).sum::<f64>() / n
            })
            .sum()
    }

    #[test]
    fn identity_returns_input() {
        let (img, _) = fixture();
        assert_eq!(remove_makeup(&img, "x", &IdentityRemover).unwrap(), img);
    }

    #[test]
    fn flatten_reduces_lip_variance_and_keeps_the_rest() {
        let (img, parsing) = fixture();
        let remover = FlattenRemover::new(Arc::new(FixedParser(parsing.clone())));
        let out = remove_makeup(&img, "x", &remover).unwrap();
        let before = region_variance(&img, &parsing, FaceClass::is_lip);
        let after = region_variance(&out, &parsing, FaceClass::is_lip);
        assert!(after < before, "lip variance {before} -> {after}");
        assert!(out.is_canonical());
        let (h, w) = img.dims();
        for y in 0..h {
            for x in 0..w {
                let c = parsing.get(y, x);
                if !c.is_lip() && !c.is_eye() {
                    assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn precomputed_missing_file_is_an_adapter_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = PrecomputedRemover {
            dir: dir.path().to_path_buf(),
        };
        let err = remove_makeup(&Image::filled(4, 4, 0.0), "nope", &r).unwrap_err();
        assert!(matches!(err, Error::Adapter { .. }));
    }

    struct Shrinker;

    impl MakeupRemover for Shrinker {
        fn name(&self) -> &str {
            "shrinker"
        }

        fn remove(&self, _image: &Image, _id: &str) -> Result<Image> {
            Ok(Image::filled(2, 2, 0.0))
        }
    }

    #[test]
    fn output_shape_mismatch_is_fatal() {
        let err = remove_makeup(&Image::filled(4, 4, 0.0), "x", &Shrinker).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
