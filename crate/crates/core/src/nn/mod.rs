//! Small building blocks shared by the generator, the discriminator and the
//! frozen feature extractors. Weights use the equalized-learning-rate
//! convention: stored as unit-variance samples and rescaled by `1/sqrt(fan_in)`
//! on every forward pass.

pub mod gradcheck;
mod params;

use candle_core::{Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub use params::{ParamStore, TensorRecord};

/// Leaky ReLU (slope 0.2) scaled by `sqrt(2)` to keep activations unit-variance.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    let neg = x.affine(0.2, 0.0)?;
    Ok(x.maximum(&neg)?.affine(std::f64::consts::SQRT_2, 0.0)?)
}

/// Nearest-neighbor 2× upsampling through broadcasting so gradients accumulate
/// correctly when the input also feeds other branches.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, h * 2, w * 2))?)
}

/// Normalizes each row to unit root-mean-square.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(1)?;
    Ok(x.broadcast_div(&ms.affine(1.0, 1e-8)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    scale: f64,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, out: usize, bias_init: f64) -> Result<Self> {
        Ok(Self {
            weight: store.normal(rng, &format!("{name}.weight"), (out, inp))?,
            bias: store.constant(&format!("{name}.bias"), out, bias_init)?,
            scale: 1.0 / (inp as f64).sqrt(),
        })
    }

    /// `(B, in)` → `(B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().affine(self.scale, 0.0)?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    scale: f64,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(rng, &format!("{name}.weight"), (out, inp, kernel, kernel))?,
            bias: store.constant(&format!("{name}.bias"), out, 0.0)?,
            scale: 1.0 / ((inp * kernel * kernel) as f64).sqrt(),
            stride,
            padding: dilation * (kernel / 2),
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().affine(self.scale, 0.0)?;
        let y = x.conv2d(&w, self.padding, self.stride, self.dilation, 1)?;
        let (_, c, _, _) = y.dims4()?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Style-modulated convolution. A per-sample style vector scales the input
/// channels; with demodulation the output of each filter is renormalized to
/// unit expected variance.
#[derive(Debug, Clone)]
pub struct ModulatedConv2d {
    pub weight: Var,
    pub bias: Var,
    pub affine: Linear,
    scale: f64,
    padding: usize,
    demodulate: bool,
}

impl ModulatedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        w_dim: usize,
        inp: usize,
        out: usize,
        kernel: usize,
        demodulate: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(rng, &format!("{name}.weight"), (out, inp, kernel, kernel))?,
            bias: store.constant(&format!("{name}.bias"), out, 0.0)?,
            affine: Linear::new(store, rng, &format!("{name}.affine"), w_dim, inp, 1.0)?,
            scale: 1.0 / ((inp * kernel * kernel) as f64).sqrt(),
            padding: kernel / 2,
            demodulate,
        })
    }

    /// `x`: `(B, in, H, W)`, `w`: `(B, w_dim)`.
    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, cin, _, _) = x.dims4()?;
        let styles = self.affine.forward(w)?;
        let weight = self.weight.as_tensor().affine(self.scale, 0.0)?;
        let x = x.broadcast_mul(&styles.reshape((b, cin, 1, 1))?)?;
        let mut y = x.conv2d(&weight, self.padding, 1, 1, 1)?;
        let cout = y.dim(1)?;
        if self.demodulate {
            // d[b, o] = 1 / sqrt(sum_i s[b, i]^2 * sum_k W[o, i, k]^2)
            let wsq = weight.sqr()?.sum((2, 3))?; // (out, in)
            let d = styles.sqr()?.matmul(&wsq.t()?)?.affine(1.0, 1e-8)?.sqrt()?.recip()?;
            y = y.broadcast_mul(&d.reshape((b, cout, 1, 1))?)?;
        }
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, cout, 1, 1))?)?)
    }
}

/// Fails when any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    let s: f64 = x.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(crate::Error::NonFiniteActivation(what()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y: Vec<Vec<f32>> = upsample2x(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(y[0], [0., 0., 1., 1.]);
        assert_eq!(y[3], [2., 2., 3., 3.]);
    }

    #[test]
    fn upsample_gradient_accumulates_across_branches() {
        let v = Var::from_tensor(&Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let up = upsample2x(v.as_tensor()).unwrap().sum_all().unwrap();
        let side = v.as_tensor().sum_all().unwrap();
        let g = (up + side).unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g, [5.0; 4]);
    }

    #[test]
    fn demodulated_filters_have_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let conv = ModulatedConv2d::new(&mut store, &mut rng, "m", 4, 3, 2, 1, true).unwrap();
        // A single-pixel input equal to one-hot channel i yields y[o] = s_i W[o,i] d[o];
        // summing squares over i must give 1 for every o.
        let w = Tensor::randn(0f64, 1.0, (1, 4), &Device::Cpu).unwrap();
        let mut sums = [0f64; 2];
        for i in 0..3 {
            let mut one_hot = vec![0f64; 3];
            one_hot[i] = 1.0;
            let x = Tensor::from_vec(one_hot, (1, 3, 1, 1), &Device::Cpu).unwrap();
            let y: Vec<f64> = conv.forward(&x, &w).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for o in 0..2 {
                sums[o] += y[o] * y[o];
            }
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
}
