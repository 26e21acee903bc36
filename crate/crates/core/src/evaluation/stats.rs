use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// Gaussian fit of an embedded image set. The covariance uses the `N − 1`
/// denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

/// Streaming mean and co-moment, mergeable in any grouping.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    n: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: DVector::zeros(dim), comoment: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Evaluation(format!("embedding has {} dims, expected {}", x.len(), self.dim())));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.comoment += &delta * delta2.transpose();
        Ok(())
    }

    /// Pairwise combination of two partial accumulators.
    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Evaluation("cannot merge statistics of different dimension".into()));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment + (&delta * delta.transpose()) * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.n += other.n;
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::Evaluation(format!("need at least 2 images for a covariance, got {}", self.n)));
        }
        let mut sigma = &self.comoment / (self.n - 1) as f64;
        // Exact symmetry; rounding in the outer products can leave ~1 ulp skew.
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(FeatureStats { mu: self.mean.clone(), sigma, count: self.n })
    }
}

impl FeatureStats {
    /// Mean and covariance of `embeddings`, accumulated in the given order.
    pub fn from_embeddings(embeddings: &[Vec<f64>]) -> Result<Self> {
        let dim = embeddings.first().map(Vec::len).unwrap_or(0);
        let mut acc = StatsAccumulator::new(dim);
        for e in embeddings {
            acc.push(e)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Checks symmetry and positive semi-definiteness within tolerance.
    pub fn validate(&self) -> Result<()> {
        let skew = (&self.sigma - self.sigma.transpose()).amax();
        if skew >= 1e-8 {
            return Err(Error::Evaluation(format!("covariance is not symmetric (max skew {skew:e})")));
        }
        let min_eig = self.sigma.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-6 {
            return Err(Error::Evaluation(format!("covariance is not PSD (min eigenvalue {min_eig:e})")));
        }
        Ok(())
    }
}

/// Largest tolerated imaginary part in the square roots of the eigenvalues of
/// `Σa Σb`.
pub const SQRTM_IMAG_TOLERANCE: f64 = 1e-3;

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// `Tr((Σa Σb)^½)` is the sum of the square roots of the eigenvalues of
/// `Σa Σb`, which are read off a real Schur form. Eigenvalues smaller than the
/// decomposition's backward error (`dim · ε · ‖Σa Σb‖_F`) count as zero: with
/// fewer images than dimensions the product is singular, and the square roots
/// of its roundoff-level eigenvalues would otherwise add up to visible noise.
/// Results in `[-1e-6, 0)` are clamped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Evaluation(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let product = &a.sigma * &b.sigma;
    let noise_floor = a.dim() as f64 * f64::EPSILON * product.norm();
    let schur = Schur::try_new(product, 1e-14, 10_000)
        .ok_or_else(|| Error::Evaluation("Schur decomposition of the covariance product did not converge".into()))?;
    let mut tr_sqrt = 0.0;
    let mut worst_imag: f64 = 0.0;
    for lambda in schur.complex_eigenvalues().iter() {
        if lambda.norm() <= noise_floor {
            continue;
        }
        let root = lambda.sqrt();
        tr_sqrt += root.re;
        worst_imag = worst_imag.max(root.im.abs());
    }
    if worst_imag > SQRTM_IMAG_TOLERANCE {
        return Err(Error::Evaluation(format!(
            "matrix square root has imaginary component {worst_imag:e} (tolerance {SQRTM_IMAG_TOLERANCE:e})"
        )));
    }
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    if (-1e-6..0.0).contains(&d) {
        return Ok(0.0);
    }
    if !d.is_finite() || d < 0.0 {
        return Err(Error::Evaluation(format!("Fréchet distance is invalid ({d})")));
    }
    Ok(d)
}
