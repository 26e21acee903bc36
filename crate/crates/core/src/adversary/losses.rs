use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::features::FeatureExtractor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_hrfpl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 10.0, lambda_hrfpl: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.lambda_rec >= 0.0 && self.lambda_hrfpl >= 0.0) {
            errors.push(format!(
                "loss weights must be >= 0, got lambda_rec={} lambda_hrfpl={}",
                self.lambda_rec, self.lambda_hrfpl
            ));
        }
    }
}

/// Scalar values of the generator objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv: f64,
    pub hrfpl: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.adv.is_finite() && self.hrfpl.is_finite() && self.rec.is_finite() && self.total.is_finite()
    }
}

pub fn total_loss(adv: f64, hrfpl: f64, rec: f64, weights: &LossWeights) -> LossBundle {
    LossBundle {
        adv,
        hrfpl,
        rec,
        total: adv + weights.lambda_hrfpl * hrfpl + weights.lambda_rec * rec,
    }
}

/// Differentiable counterpart of [`total_loss`].
pub fn weighted_total(adv: &Tensor, hrfpl: &Tensor, rec: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok(((adv + hrfpl.affine(weights.lambda_hrfpl, 0.0)?)? + rec.affine(weights.lambda_rec, 0.0)?)?)
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Non-saturating generator loss, `mean softplus(−fake)`.
pub fn adv_loss_generator(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// `mean softplus(−real) + mean softplus(fake)`.
pub fn adv_loss_discriminator(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((softplus(&real_logits.neg()?)?.mean_all()? + softplus(fake_logits)?.mean_all()?)?)
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, format!("{:?}", b.dims()), format!("{:?}", a.dims())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn rec_loss(output: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("rec_loss", output, target)?;
    Ok((output - target)?.abs()?.mean_all()?)
}

/// Mean squared feature difference, averaged over the extractor's layers.
pub fn hrfpl_loss(output: &Tensor, target: &Tensor, features: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape("hrfpl_loss", output, target)?;
    let fo = features.features(output)?;
    let ft = features.features(&target.detach())?;
    if fo.is_empty() || fo.len() != ft.len() {
        return Err(Error::Adapter {
            adapter: features.name().to_string(),
            id: None,
            reason: format!("returned {} and {} feature layers", fo.len(), ft.len()),
        });
    }
    let n = fo.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fo.iter().zip(&ft) {
        let term = (a - b)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            Some(s) => (s + term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one layer").affine(1.0 / n, 0.0)?)
}

/// Reads a 0-d tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
