//! Discriminator, training losses and perceptual feature adapters.

pub mod features;
pub mod losses;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, BASE_RESOLUTION};
use crate::nn::{lrelu, Conv2d, Linear, ParamStore};

pub use features::{FeatureExtractor, FrozenRandomFeatures, IdentityFeatures, SegmentationFeatures};
pub use losses::{
    adv_loss_discriminator, adv_loss_generator, hrfpl_loss, rec_loss, scalar, softplus, total_loss, weighted_total,
    LossBundle, LossWeights,
};

/// Strided-convolution critic that mirrors the generator encoder's channel schedule.
pub struct Discriminator {
    resolution: usize,
    params: ParamStore,
    from_rgb: Conv2d,
    levels: Vec<(Conv2d, Conv2d)>,
    base: Conv2d,
    fc: Linear,
    out: Linear,
}

impl Discriminator {
    /// Initialized from `config.seed + 1` so it never shares draws with the generator.
    pub fn new(config: &GeneratorConfig, dtype: DType, device: &Device) -> Result<Self> {
        let res = config.resolution;
        if res < 2 * BASE_RESOLUTION || !res.is_power_of_two() {
            return Err(Error::Config(vec![format!("discriminator resolution must be a power of two >= 8, got {res}")]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let rng = &mut rng;
        let mut p = ParamStore::new(dtype, device.clone());
        let ch = |r| config.channels_at(r);
        let all = config.levels();

        let from_rgb = Conv2d::new(&mut p, rng, "disc.from_rgb", 3, ch(res), 1, 1, 1)?;
        let mut levels = Vec::new();
        for &r in &all[..all.len() - 1] {
            levels.push((
                Conv2d::new(&mut p, rng, &format!("disc.{r}.conv"), ch(r), ch(r), 3, 1, 1)?,
                Conv2d::new(&mut p, rng, &format!("disc.{r}.down"), ch(r), ch(r / 2), 3, 2, 1)?,
            ));
        }
        let cb = ch(BASE_RESOLUTION);
        let base = Conv2d::new(&mut p, rng, "disc.4.conv", cb, cb, 3, 1, 1)?;
        let fc = Linear::new(&mut p, rng, "disc.fc", cb * BASE_RESOLUTION * BASE_RESOLUTION, cb, 0.0)?;
        let out = Linear::new(&mut p, rng, "disc.out", cb, 1, 0.0)?;
        Ok(Self { resolution: res, params: p, from_rgb, levels, base, fc, out })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, 3, R, R)` images → `(B,)` logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let r = self.resolution;
        let dims = images.dims();
        if dims.len() != 4 || dims[1..] != [3, r, r] {
            return Err(Error::shape("discriminate", format!("(B, 3, {r}, {r})"), format!("{dims:?}")));
        }
        let mut x = lrelu(&self.from_rgb.forward(images)?)?;
        for (conv, down) in &self.levels {
            x = lrelu(&conv.forward(&x)?)?;
            x = lrelu(&down.forward(&x)?)?;
        }
        x = lrelu(&self.base.forward(&x)?)?;
        let x = x.flatten_from(1)?;
        let x = lrelu(&self.fc.forward(&x)?)?;
        Ok(self.out.forward(&x)?.squeeze(1)?)
    }

    /// R1 penalty `(gamma / 2) · mean_b ‖∇ₓ D(x_b)‖²` on real images.
    ///
    /// The backend has no double backward, so the parameter gradient is taken
    /// from a surrogate: with `v_b = ∇ₓ D(x_b)` held constant, the central
    /// difference `(D(x + εv) − D(x − εv)) / 2ε` is a directional derivative
    /// whose parameter gradient is `J_θ(∇ₓD)ᵀ v`, the gradient of `½‖∇ₓD‖²`.
    /// Each sample's step is `ε_b = delta / ‖v_b‖`.
    ///
    /// Returns `(surrogate, penalty)`: backpropagate the first, log the second.
    pub fn r1_penalty(&self, real: &Tensor, gamma: f64, delta: f64) -> Result<(Tensor, f64)> {
        let x = Var::from_tensor(&real.detach())?;
        let grads = self.forward(x.as_tensor())?.sum_all()?.backward()?;
        let g = grads
            .get(x.as_tensor())
            .ok_or_else(|| Error::Evaluation("discriminator does not depend on its input".into()))?
            .detach();
        let b = g.dim(0)?;
        let sq = g.sqr()?.flatten_from(1)?.sum(1)?; // (B,)
        let penalty = 0.5 * gamma * sq.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;

        let eps = sq.sqrt()?.maximum(1e-12)?.recip()?.affine(delta, 0.0)?; // (B,)
        let step = g.broadcast_mul(&eps.reshape((b, 1, 1, 1))?)?;
        let real = real.detach();
        let up = self.forward(&(&real + &step)?)?;
        let down = self.forward(&(&real - &step)?)?;
        let surrogate = ((up - down)? / eps.affine(2.0, 0.0)?)?.mean_all()?.affine(gamma, 0.0)?;
        Ok((surrogate, penalty))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GeneratorConfig {
        GeneratorConfig { resolution: 8, channel_base: 16, max_channels: 4, seed: 9, ..Default::default() }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn one_logit_per_image_and_deterministic() {
        let d = Discriminator::new(&toy(), DType::F64, &Device::Cpu).unwrap();
        let x = images(5, 0);
        let a: Vec<f64> = d.forward(&x).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = d.forward(&x).unwrap().to_vec1().unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(d.forward(&Tensor::zeros((1, 4, 8, 8), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    /// Exact R1 at the current parameters, from one input-gradient pass.
    fn exact_r1(d: &Discriminator, x: &Tensor, gamma: f64) -> f64 {
        let xv = Var::from_tensor(x).unwrap();
        let grads = d.forward(xv.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(xv.as_tensor()).unwrap();
        let b = x.dim(0).unwrap() as f64;
        0.5 * gamma * g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() / b
    }

    #[test]
    fn r1_value_matches_exact_penalty() {
        let d = Discriminator::new(&toy(), DType::F64, &Device::Cpu).unwrap();
        let x = images(3, 1);
        let (_, value) = d.r1_penalty(&x, 10.0, 1e-4).unwrap();
        assert!((value - exact_r1(&d, &x, 10.0)).abs() < 1e-10);
    }

    #[test]
    fn r1_surrogate_gradient_matches_finite_differences_of_penalty() {
        use rand::Rng;
        let d = Discriminator::new(&toy(), DType::F64, &Device::Cpu).unwrap();
        let x = images(2, 2);
        let (surrogate, _) = d.r1_penalty(&x, 10.0, 1e-5).unwrap();
        let grads = surrogate.backward().unwrap();
        let p = d.params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 40 && attempts < 400 {
            attempts += 1;
            let i = rng.random_range(0..p.len());
            let var = &p.entries()[i].1;
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
            let j = rng.random_range(0..g.len());
            let orig = p.values(i).unwrap();
            let h = 1e-5;
            let mut v = orig.clone();
            v[j] = orig[j] + h;
            p.set_values(i, &v).unwrap();
            let fp = exact_r1(&d, &x, 10.0);
            v[j] = orig[j] - h;
            p.set_values(i, &v).unwrap();
            let fm = exact_r1(&d, &x, 10.0);
            p.set_values(i, &orig).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(g[j].abs()).max(1e-6);
            assert!((fd - g[j]).abs() / scale < 1e-3, "{} [{j}]: fd {fd} vs surrogate {}", p.entries()[i].0, g[j]);
            checked += 1;
        }
        assert_eq!(checked, 40);
    }
}
