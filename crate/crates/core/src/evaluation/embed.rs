use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::face::run_command;
use crate::image::Image;

/// Maps an image to a feature vector. Used both for distribution statistics
/// and for identity comparison.
pub trait Embedder: Send + Sync {
    /// Stable identifier written into reports, so numbers from different
    /// embedders are never compared by accident.
    fn id(&self) -> String;

    fn embed(&self, image: &Image) -> Result<Vec<f64>>;

    fn is_serial(&self) -> bool {
        false
    }
}

/// Box-downsamples to `grid × grid` and applies a fixed Gaussian projection.
/// Deterministic and offline; meant for tests and smoke runs.
pub struct ToyEmbedder {
    grid: usize,
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let inputs = 3 * grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..dim * inputs).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        Self { grid, dim, seed, projection }
    }

    fn downsample(&self, image: &Image) -> Vec<f64> {
        let (h, w) = image.dims();
        let g = self.grid;
        let mut out = vec![0.0; 3 * g * g];
        for gy in 0..g {
            let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += image.get(y, x, c) as f64;
                        }
                    }
                    out[(c * g + gy) * g + gx] = s / n;
                }
            }
        }
        out
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(8, 64, 0)
    }
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> String {
        format!("toy(grid={},dim={},seed={})", self.grid, self.dim, self.seed)
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let x = self.downsample(image);
        Ok(self.projection.chunks(x.len()).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect())
    }
}

/// Runs an external program per image. The command template may use
/// `{input}` (a PNG written by us), `{output}` (a text file of
/// whitespace-separated numbers the program must write) and `{asset}`.
pub struct CommandEmbedder {
    pub name: String,
    pub command: Vec<String>,
    pub asset: Option<PathBuf>,
}

impl Embedder for CommandEmbedder {
    fn id(&self) -> String {
        match &self.asset {
            Some(a) => format!("{}({})", self.name, a.display()),
            None => self.name.clone(),
        }
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("embedding.txt");
        image.save(&input)?;
        run_command(&self.name, &self.command, &input, &output, self.asset.as_deref())?;
        let text = std::fs::read_to_string(&output).map_err(|e| Error::io(&output, e))?;
        let values: std::result::Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
        match values {
            Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(v),
            _ => Err(Error::Adapter {
                adapter: self.name.clone(),
                id: None,
                reason: format!("{} does not contain a finite numeric vector", output.display()),
            }),
        }
    }

    fn is_serial(&self) -> bool {
        true
    }
}

/// Cosine similarity of the two images' embeddings.
pub fn identity_similarity(a: &Image, b: &Image, embedder: &dyn Embedder) -> Result<f64> {
    cosine(&embedder.embed(a)?, &embedder.embed(b)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!("embedding sizes differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Evaluation("zero-norm identity embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}
