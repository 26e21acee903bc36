//! Mask-driven pixel selection and generator input assembly.
//!
//! Both blends are the same hard select: where the mask is 1 the foreground
//! pixel is taken verbatim, elsewhere the background pixel is taken verbatim.
//! Nothing is multiplied, so the untouched region is reproduced bit for bit.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::image::{Image, RoiMask};

/// Four-channel conditioning input: bare face RGB followed by the mask plane.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    height: usize,
    width: usize,
    /// row-major `H×W×4`
    data: Vec<f32>,
}

impl NetworkInput {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(4).copied().collect()
    }

    /// Inverse of [`assemble_input`].
    pub fn split(&self) -> Result<(Image, RoiMask)> {
        let rgb: Vec<f32> = self
            .data
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect();
        let mask: Vec<u8> = self.channel(3).into_iter().map(|v| v as u8).collect();
        Ok((
            Image::new(self.height, self.width, rgb)?,
            RoiMask::new(self.height, self.width, mask)?,
        ))
    }

    /// `(1, 4, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype, device)
    }

    pub fn batch_to_tensor(inputs: &[NetworkInput], dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = inputs
            .first()
            .map(NetworkInput::dims)
            .ok_or_else(|| Error::shape("NetworkInput::batch_to_tensor", "at least one input", 0))?;
        let mut planar = Vec::with_capacity(inputs.len() * 4 * h * w);
        for inp in inputs {
            if inp.dims() != (h, w) {
                return Err(Error::shape(
                    "NetworkInput::batch_to_tensor",
                    format!("{h}x{w}"),
                    format!("{}x{}", inp.height, inp.width),
                ));
            }
            for c in 0..4 {
                planar.extend(inp.data.iter().skip(c).step_by(4).copied());
            }
        }
        Ok(Tensor::from_vec(planar, (inputs.len(), 4, h, w), device)?.to_dtype(dtype)?)
    }
}

fn check_dims(context: &'static str, a: (usize, usize), b: (usize, usize), m: (usize, usize)) -> Result<()> {
    if a != b || a != m {
        return Err(Error::shape(
            context,
            format!("{}x{} for all operands", a.0, a.1),
            format!("{}x{}, {}x{}, mask {}x{}", a.0, a.1, b.0, b.1, m.0, m.1),
        ));
    }
    Ok(())
}

/// Shared select behind [`compose_bare`] and [`composite_output`].
pub fn blend(foreground: &Image, background: &Image, mask: &RoiMask) -> Result<Image> {
    check_dims("blend", foreground.dims(), background.dims(), mask.dims())?;
    let data = foreground
        .data()
        .chunks_exact(3)
        .zip(background.data().chunks_exact(3))
        .zip(mask.data())
        .flat_map(|((fg, bg), m)| if *m == 1 { [fg[0], fg[1], fg[2]] } else { [bg[0], bg[1], bg[2]] })
        .collect();
    Image::new(foreground.height(), foreground.width(), data)
}

/// `N = N'·M + I_D·(1−M)`: the makeup-removed estimate inside the mask, the
/// original photo everywhere else.
pub fn compose_bare(n_prime: &Image, source: &Image, mask: &RoiMask) -> Result<Image> {
    blend(n_prime, source, mask)
}

/// `I_output = I_pred·M + I_D·(1−M)`.
pub fn composite_output(pred: &Image, source: &Image, mask: &RoiMask) -> Result<Image> {
    blend(pred, source, mask)
}

/// `I = concat(N, M)`.
pub fn assemble_input(bare: &Image, mask: &RoiMask) -> Result<NetworkInput> {
    if bare.dims() != mask.dims() {
        return Err(Error::shape(
            "assemble_input",
            format!("{}x{}", bare.height(), bare.width()),
            format!("mask {}x{}", mask.height(), mask.width()),
        ));
    }
    let data = bare
        .data()
        .chunks_exact(3)
        .zip(mask.data())
        .flat_map(|(px, m)| [px[0], px[1], px[2], *m as f32])
        .collect();
    Ok(NetworkInput {
        height: bare.height(),
        width: bare.width(),
        data,
    })
}

/// Batched, differentiable form of [`blend`] for `(B, C, H, W)` tensors with a
/// `(B, 1, H, W)` 0/1 mask. Gradients reach `foreground` only where the mask is set.
pub fn blend_tensor(foreground: &Tensor, background: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if foreground.dims() != background.dims() {
        return Err(Error::shape(
            "blend_tensor",
            format!("{:?}", foreground.dims()),
            format!("{:?}", background.dims()),
        ));
    }
    let select = mask.ne(0.0)?.broadcast_as(foreground.shape())?.contiguous()?;
    Ok(select.where_cond(foreground, background)?)
}

/// Batched [`assemble_input`]: `(B, 3, H, W)` ++ `(B, 1, H, W)`.
pub fn assemble_tensor(bare: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[bare, &mask.to_dtype(bare.dtype())?], 1)?)
}
