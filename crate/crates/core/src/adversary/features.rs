//! Frozen feature extractors for the perceptual loss. None of them own
//! trainable variables; gradients flow through them to the image only.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::lrelu;

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// `(B, 3, H, W)` images in `[-1, 1]` → one or more feature maps.
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the pixels themselves; the perceptual loss degenerates to MSE.
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }
}

struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    dilation: usize,
}

impl FrozenConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, k, _) = self.weight.dims4()?;
        let pad = self.dilation * (k / 2);
        let y = x.conv2d(&self.weight, pad, 1, self.dilation, 1)?;
        let c = y.dim(1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

fn run_stack(layers: &[FrozenConv], images: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut x = images.clone();
    for layer in layers {
        x = lrelu(&layer.forward(&x)?)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Randomly initialized 3×3 convolutions with dilations 1, 2, 4, 8. The
/// receptive field grows to 31 pixels while every weight stays fixed by `seed`.
pub struct FrozenRandomFeatures {
    layers: Vec<FrozenConv>,
}

impl FrozenRandomFeatures {
    pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

    pub fn new(seed: u64, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut inp = 3;
        for &dilation in &Self::DILATIONS {
            let fan_in = (inp * 9) as f64;
            let w: Vec<f64> = (0..width * inp * 9)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / fan_in.sqrt())
                .collect();
            layers.push(FrozenConv {
                weight: Tensor::from_vec(w, (width, inp, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::zeros(width, dtype, device)?,
                dilation,
            });
            inp = width;
        }
        Ok(Self { layers })
    }
}

impl FeatureExtractor for FrozenRandomFeatures {
    fn name(&self) -> &str {
        "frozen_random"
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        run_stack(&self.layers, images)
    }
}

/// Convolutional backbone exported from a pretrained segmentation network.
///
/// The asset is a safetensors file with tensors `layers.{i}.weight`
/// (`out, in, k, k`) and `layers.{i}.bias` for `i = 0, 1, ...`, plus an optional
/// one-element `layers.{i}.dilation`. Optional 3-element `input.mean` and
/// `input.std` renormalize the `[-1, 1]` input first. Every layer is followed
/// by a leaky ReLU and contributes one feature map.
pub struct SegmentationFeatures {
    path: PathBuf,
    mean: Option<Tensor>,
    std: Option<Tensor>,
    layers: Vec<FrozenConv>,
}

impl SegmentationFeatures {
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let fail = |reason: String| Error::Adapter { adapter: "segmentation".into(), id: None, reason };
        if !path.exists() {
            return Err(fail(format!("asset {} not found", path.display())));
        }
        let mut tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
        let mut take = |name: &str| -> Result<Option<Tensor>> {
            Ok(match tensors.remove(name) {
                Some(t) => Some(t.to_dtype(dtype)?),
                None => None,
            })
        };
        let norm = |t: Option<Tensor>| -> Result<Option<Tensor>> {
            match t {
                Some(t) if t.elem_count() == 3 => Ok(Some(t.reshape((1, 3, 1, 1))?)),
                Some(t) => Err(fail(format!("input normalization has shape {:?}", t.dims()))),
                None => Ok(None),
            }
        };
        let mean = norm(take("input.mean")?)?;
        let std = norm(take("input.std")?)?;
        let mut layers = Vec::new();
        let mut inp = 3;
        loop {
            let i = layers.len();
            let Some(weight) = take(&format!("layers.{i}.weight"))? else { break };
            let bias = take(&format!("layers.{i}.bias"))?.ok_or_else(|| fail(format!("layers.{i}.bias missing")))?;
            let dilation = match take(&format!("layers.{i}.dilation"))? {
                Some(d) => d.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as usize,
                None => 1,
            };
            let dims = weight.dims().to_vec();
            if dims.len() != 4 || dims[1] != inp || dims[2] != dims[3] || dims[2] % 2 == 0 || bias.dims() != [dims[0]] || dilation == 0 {
                return Err(fail(format!("layer {i} has weight {dims:?}, bias {:?}, dilation {dilation}", bias.dims())));
            }
            inp = dims[0];
            layers.push(FrozenConv { weight, bias, dilation });
        }
        if layers.is_empty() {
            return Err(fail(format!("{} has no `layers.0.weight`", path.display())));
        }
        Ok(Self { path: path.to_path_buf(), mean, std, layers })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl FeatureExtractor for SegmentationFeatures {
    fn name(&self) -> &str {
        "segmentation"
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = images.clone();
        if let Some(m) = &self.mean {
            x = x.broadcast_sub(m)?;
        }
        if let Some(s) = &self.std {
            x = x.broadcast_div(s)?;
        }
        run_stack(&self.layers, &x)
    }
}
