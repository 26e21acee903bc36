//! Applying a trained generator to new portraits.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compositing::{assemble_input, compose_bare, composite_output, NetworkInput};
use crate::data::{resize_bilinear, resize_mask_nearest, FaceServices};
use crate::error::{Error, Result};
use crate::face::{build_roi_mask, parse_face, remove_makeup};
use crate::generator::Generator;
use crate::image::{Image, RoiMask};

/// Everything produced for one portrait.
#[derive(Debug, Clone)]
pub struct Stylized {
    pub mask: RoiMask,
    /// Makeup-removed face composited over the original non-face pixels.
    pub bare: Image,
    /// One composited output per style index.
    pub outputs: Vec<Image>,
}

/// Latent for style `k` under `seed`. Independent of the input, so the same
/// `(seed, k)` asks for the same style on every face.
pub fn style_latent(generator: &Generator, seed: u64, k: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    generator.sample_latent(&mut rng, 1)
}

/// Parses, masks, removes makeup and synthesizes `num_styles` outputs for
/// `source` at its own size. The generator runs at its configured resolution;
/// when the input differs, the bare face and mask are resized for the network
/// and the prediction is resized back before compositing, so pixels outside
/// the mask are always the input's own values.
///
/// An empty mask is not an error: every output then equals the input.
pub fn stylize(
    generator: &Generator,
    source: &Image,
    id: &str,
    services: &FaceServices,
    seed: u64,
    num_styles: usize,
) -> Result<Stylized> {
    if num_styles == 0 {
        return Err(Error::Config(vec!["num_styles must be at least 1".into()]));
    }
    let parsing = parse_face(source, id, services.parser.as_ref())?;
    let mask = build_roi_mask(&parsing, &services.policy);
    let n_prime = remove_makeup(source, id, services.remover.as_ref())?;
    let bare = compose_bare(&n_prime, source, &mask)?;

    let r = generator.config().resolution;
    let (h, w) = source.dims();
    let resized = (h, w) != (r, r);
    let input = if resized {
        assemble_input(&resize_bilinear(&bare, r, r), &resize_mask_nearest(&mask, r, r))?
    } else {
        assemble_input(&bare, &mask)?
    };

    let params = generator.params();
    let batch = NetworkInput::batch_to_tensor(&vec![input; num_styles], params.dtype(), params.device())?;
    let z = (0..num_styles).map(|k| style_latent(generator, seed, k)).collect::<Result<Vec<_>>>()?;
    let pred = generator.forward(&batch, &Tensor::cat(&z, 0)?)?;

    let outputs = Image::batch_from_tensor(&pred)?
        .into_iter()
        .map(|p| {
            let p = if resized { resize_bilinear(&p, h, w) } else { p };
            composite_output(&p, source, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Stylized { mask, bare, outputs })
}

/// Input, bare face, then every output, left to right.
pub fn preview_grid(source: &Image, result: &Stylized) -> Result<Image> {
    let mut panels = vec![source, &result.bare];
    panels.extend(&result.outputs);
    let (h, w) = source.dims();
    if panels.iter().any(|p| p.dims() != (h, w)) {
        return Err(Error::shape("preview_grid", format!("{h}x{w} panels"), "mixed sizes"));
    }
    let n = panels.len();
    Ok(Image::from_fn(h, w * n, |y, x, c| panels[x / w].get(y, x % w, c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::{ConstantParser, EllipseParser, FaceClass, IdentityRemover, MakeupRegionPolicy};
    use crate::generator::GeneratorConfig;
    use candle_core::{DType, Device};
    use std::sync::Arc;

    fn generator() -> Generator {
        let cfg = GeneratorConfig {
            resolution: 16,
            z_dim: 8,
            w_dim: 8,
            mapping_depth: 2,
            channel_base: 64,
            max_channels: 8,
            ..Default::default()
        };
        Generator::new(&cfg, DType::F32, &Device::Cpu).unwrap()
    }

    fn services(parser: Arc<dyn crate::face::FaceParser>) -> FaceServices {
        FaceServices { parser, policy: MakeupRegionPolicy::default(), remover: Arc::new(IdentityRemover) }
    }

    fn portrait(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 23) as f32 / 11.5 - 1.0)
    }

    #[test]
    fn outputs_keep_non_face_pixels_at_any_size() {
        let g = generator();
        for (h, w) in [(16, 16), (24, 20)] {
            let src = portrait(h, w);
            let r = stylize(&g, &src, "p", &services(Arc::new(EllipseParser::default())), 3, 2).unwrap();
            assert_eq!(r.outputs.len(), 2);
            assert!(r.mask.count_ones() > 0);
            for out in &r.outputs {
                assert_eq!(out.dims(), (h, w));
                for y in 0..h {
                    for x in 0..w {
                        if !r.mask.get(y, x) {
                            assert_eq!(out.pixel(y, x), src.pixel(y, x));
                        }
                    }
                }
            }
            assert_ne!(r.outputs[0], r.outputs[1], "style draws should differ");
        }
    }

    #[test]
    fn empty_mask_returns_the_input() {
        let src = portrait(16, 16);
        let r = stylize(&generator(), &src, "p", &services(Arc::new(ConstantParser(FaceClass::Background))), 0, 1)
            .unwrap();
        assert_eq!(r.outputs[0], src);
    }

    #[test]
    fn same_seed_same_outputs() {
        let g = generator();
        let src = portrait(16, 16);
        let s = services(Arc::new(EllipseParser::default()));
        let a = stylize(&g, &src, "p", &s, 9, 2).unwrap();
        let b = stylize(&g, &src, "p", &s, 9, 2).unwrap();
        assert_eq!(a.outputs, b.outputs);
        let grid = preview_grid(&src, &a).unwrap();
        assert_eq!(grid.dims(), (16, 64));
        assert_eq!(grid.pixel(3, 16 * 2 + 5), a.outputs[0].pixel(3, 5));
    }
}
