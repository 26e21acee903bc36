//! U-shaped makeup generator.
//!
//! The encoder reads the full four-channel input, including the bare-face
//! pixels inside the mask, and keeps one feature map per resolution. A mapping
//! network turns Gaussian noise into a style vector, and the decoder rebuilds
//! the image coarse-to-fine with style-modulated convolutions, adding the
//! encoder feature of matching resolution at every level.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, lrelu, pixel_norm, upsample2x, Conv2d, Linear, ModulatedConv2d, ParamStore};

pub const BASE_RESOLUTION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    /// Channels at resolution `r` default to `min(channel_base / r, max_channels)`.
    pub channel_base: usize,
    pub max_channels: usize,
    /// Per-resolution overrides, keyed by the resolution as a string ("4", "8", ...).
    pub channels: BTreeMap<String, usize>,
    pub seed: u64,
    /// Adds a pooled global-context branch at the bottleneck.
    pub global_context: bool,
    /// Adds a fixed seeded noise map with a learned strength after every decoder level.
    pub noise: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            z_dim: 512,
            w_dim: 512,
            mapping_depth: 8,
            channel_base: 16 * 256,
            max_channels: 256,
            channels: BTreeMap::new(),
            seed: 0,
            global_context: false,
            noise: false,
        }
    }
}

impl GeneratorConfig {
    /// Channel count at spatial size `r`.
    pub fn channels_at(&self, r: usize) -> usize {
        self.channels
            .get(&r.to_string())
            .copied()
            .unwrap_or_else(|| (self.channel_base / r).clamp(1, self.max_channels.max(1)))
    }

    /// Spatial sizes from full resolution down to the 4×4 base.
    pub fn levels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.resolution;
        while r >= BASE_RESOLUTION {
            out.push(r);
            r /= 2;
        }
        out
    }

    /// Checks for run configurations.
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            errors.push(format!("generator.resolution must be a power of two >= 32, got {}", self.resolution));
        }
        self.validate_structure(errors);
    }

    /// Checks needed to build the network at all; toy sizes down to 8 pass.
    fn validate_structure(&self, errors: &mut Vec<String>) {
        if self.resolution < 2 * BASE_RESOLUTION || !self.resolution.is_power_of_two() {
            errors.push(format!("generator.resolution must be a power of two >= 8, got {}", self.resolution));
        }
        if self.z_dim == 0 || self.w_dim == 0 {
            errors.push("generator.z_dim and generator.w_dim must be positive".into());
        }
        if self.mapping_depth == 0 {
            errors.push("generator.mapping_depth must be >= 1".into());
        }
        if self.channel_base == 0 || self.max_channels == 0 {
            errors.push("generator.channel_base and generator.max_channels must be positive".into());
        }
        for (k, v) in &self.channels {
            match k.parse::<usize>() {
                Ok(r) if self.levels().contains(&r) => {}
                _ => errors.push(format!("generator.channels key `{k}` is not one of the levels {:?}", self.levels())),
            }
            if *v == 0 {
                errors.push(format!("generator.channels.{k} must be positive"));
            }
        }
    }
}

struct EncoderLevel {
    conv: Conv2d,
    down: Conv2d,
}

struct DecoderLevel {
    up: ModulatedConv2d,
    conv: ModulatedConv2d,
}

struct NoiseInput {
    map: Tensor,
    strength: Var,
}

pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    mapping: Vec<Linear>,
    from_input: Conv2d,
    encoder: Vec<EncoderLevel>,
    bottleneck: Conv2d,
    global_context: Option<(Linear, Linear)>,
    base: ModulatedConv2d,
    decoder: Vec<DecoderLevel>,
    noise: Vec<NoiseInput>,
    to_rgb: ModulatedConv2d,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate_structure(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new(dtype, device.clone());
        let rng = &mut rng;
        let ch = |r| config.channels_at(r);
        let levels = config.levels();
        let res = config.resolution;

        let mut mapping = Vec::new();
        for i in 0..config.mapping_depth {
            let inp = if i == 0 { config.z_dim } else { config.w_dim };
            mapping.push(Linear::new(&mut p, rng, &format!("mapping.{i}"), inp, config.w_dim, 0.0)?);
        }

        let from_input = Conv2d::new(&mut p, rng, "enc.from_input", 4, ch(res), 1, 1, 1)?;
        let mut encoder = Vec::new();
        for &r in &levels[..levels.len() - 1] {
            encoder.push(EncoderLevel {
                conv: Conv2d::new(&mut p, rng, &format!("enc.{r}.conv"), ch(r), ch(r), 3, 1, 1)?,
                down: Conv2d::new(&mut p, rng, &format!("enc.{r}.down"), ch(r), ch(r / 2), 3, 2, 1)?,
            });
        }
        let cb = ch(BASE_RESOLUTION);
        let bottleneck = Conv2d::new(&mut p, rng, "enc.4.conv", cb, cb, 3, 1, 1)?;
        let global_context = if config.global_context {
            Some((
                Linear::new(&mut p, rng, "enc.context.0", cb, cb, 0.0)?,
                Linear::new(&mut p, rng, "enc.context.1", cb, cb, 0.0)?,
            ))
        } else {
            None
        };

        let wd = config.w_dim;
        let base = ModulatedConv2d::new(&mut p, rng, "dec.4.conv", wd, cb, cb, 3, true)?;
        let mut decoder = Vec::new();
        for &r in levels[..levels.len() - 1].iter().rev() {
            decoder.push(DecoderLevel {
                up: ModulatedConv2d::new(&mut p, rng, &format!("dec.{r}.up"), wd, ch(r / 2), ch(r), 3, true)?,
                conv: ModulatedConv2d::new(&mut p, rng, &format!("dec.{r}.conv"), wd, ch(r), ch(r), 3, true)?,
            });
        }
        let mut noise = Vec::new();
        if config.noise {
            for &r in levels.iter().rev() {
                let values: Vec<f64> = (0..r * r).map(|_| rng.sample(StandardNormal)).collect();
                noise.push(NoiseInput {
                    map: Tensor::from_vec(values, (1, 1, r, r), device)?.to_dtype(dtype)?,
                    strength: p.constant(&format!("dec.{r}.noise_strength"), 1, 0.0)?,
                });
            }
        }
        let to_rgb = ModulatedConv2d::new(&mut p, rng, "dec.to_rgb", wd, ch(res), 3, 1, false)?;

        Ok(Self {
            config: config.clone(),
            params: p,
            mapping,
            from_input,
            encoder,
            bottleneck,
            global_context,
            base,
            decoder,
            noise,
            to_rgb,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `batch` latent vectors drawn from `rng`.
    pub fn sample_latent(&self, rng: &mut impl Rng, batch: usize) -> Result<Tensor> {
        let z: Vec<f64> = (0..batch * self.config.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(z, (batch, self.config.z_dim), self.params.device())?.to_dtype(self.params.dtype())?)
    }

    /// `(B, z_dim)` → `(B, w_dim)`.
    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 2 || dims[1] != self.config.z_dim {
            return Err(Error::shape("map_latent", format!("(B, {})", self.config.z_dim), format!("{dims:?}")));
        }
        let mut x = pixel_norm(z)?;
        for layer in &self.mapping {
            x = lrelu(&layer.forward(&x)?)?;
        }
        Ok(x)
    }

    /// Feature pyramid from full resolution down to 4×4.
    pub fn encode(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let r = self.config.resolution;
        let dims = input.dims();
        if dims.len() != 4 || dims[1..] != [4, r, r] {
            return Err(Error::shape("encode", format!("(B, 4, {r}, {r})"), format!("{dims:?}")));
        }
        let mut feats = Vec::with_capacity(self.encoder.len() + 1);
        let mut x = lrelu(&self.from_input.forward(input)?)?;
        for level in &self.encoder {
            x = lrelu(&level.conv.forward(&x)?)?;
            feats.push(x.clone());
            x = lrelu(&level.down.forward(&x)?)?;
        }
        x = lrelu(&self.bottleneck.forward(&x)?)?;
        if let Some((a, b)) = &self.global_context {
            let (bs, c, h, w) = x.dims4()?;
            let pooled = x.mean((2, 3))?;
            let ctx = b.forward(&lrelu(&a.forward(&pooled)?)?)?;
            x = x.broadcast_add(&ctx.reshape((bs, c, 1, 1))?)?;
            debug_assert_eq!((h, w), (BASE_RESOLUTION, BASE_RESOLUTION));
        }
        feats.push(x);
        Ok(feats)
    }

    fn add_noise(&self, x: Tensor, level: usize) -> Result<Tensor> {
        match self.noise.get(level) {
            Some(n) => {
                let scaled = n.map.broadcast_mul(&n.strength.as_tensor().reshape((1, 1, 1, 1))?)?;
                Ok(x.broadcast_add(&scaled)?)
            }
            None => Ok(x),
        }
    }

    /// `I_pred` in `[-1, 1]`, shape `(B, 3, R, R)`.
    pub fn synthesize(&self, input: &Tensor, w: &Tensor) -> Result<Tensor> {
        let feats = self.encode(input)?;
        let b = input.dim(0)?;
        if w.dims() != [b, self.config.w_dim] {
            return Err(Error::shape("synthesize", format!("({b}, {})", self.config.w_dim), format!("{:?}", w.dims())));
        }
        let mut x = feats.last().expect("pyramid has a base level").clone();
        x = lrelu(&self.add_noise(self.base.forward(&x, w)?, 0)?)?;
        ensure_finite(&x, || format!("decoder level {BASE_RESOLUTION}x{BASE_RESOLUTION}"))?;
        for (i, level) in self.decoder.iter().enumerate() {
            let skip = &feats[feats.len() - 2 - i];
            x = lrelu(&level.up.forward(&upsample2x(&x)?, w)?)?;
            x = (x + skip)?;
            x = lrelu(&self.add_noise(level.conv.forward(&x, w)?, i + 1)?)?;
            ensure_finite(&x, || {
                let r = BASE_RESOLUTION << (i + 1);
                format!("decoder level {r}x{r}")
            })?;
        }
        let rgb = self.to_rgb.forward(&x, w)?.tanh()?;
        ensure_finite(&rgb, || "rgb head".into())?;
        Ok(rgb)
    }

    /// `synthesize(input, map_latent(z))`.
    pub fn forward(&self, input: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.synthesize(input, &self.map_latent(z)?)
    }
}
