//! Adversarial training loop.
//!
//! Each step builds the bare-face composite and the four-channel input,
//! runs the generator once, updates the discriminator on real photos against
//! the composited output, then updates the generator against the freshly
//! updated discriminator.

pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::losses::scalar;
use crate::adversary::{
    adv_loss_discriminator, adv_loss_generator, hrfpl_loss, rec_loss, total_loss, weighted_total, Discriminator,
    FeatureExtractor, FrozenRandomFeatures, IdentityFeatures, LossBundle, LossWeights, SegmentationFeatures,
};
use crate::compositing::{assemble_tensor, blend_tensor};
use crate::data::{DatasetManifest, MakeupSample, SampleLoader, Split};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{Image, RoiMask};
use crate::optim::Adam;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R1Config {
    pub enabled: bool,
    pub gamma: f64,
    /// Applied every `interval` steps with `gamma` scaled by the interval.
    pub interval: u64,
    /// Input-space step of the finite-difference surrogate.
    pub delta: f64,
}

impl Default for R1Config {
    fn default() -> Self {
        Self { enabled: true, gamma: 10.0, interval: 16, delta: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrfplFeatures {
    Segmentation,
    FrozenRandom,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub r1: R1Config,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub hrfpl_features: HrfplFeatures,
    /// Safetensors file for the segmentation backbone.
    pub hrfpl_asset: Option<PathBuf>,
    pub hrfpl_seed: u64,
    pub hrfpl_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 2,
            total_steps: 200,
            seed: 0,
            weights: LossWeights::default(),
            r1: R1Config::default(),
            checkpoint_interval: 100,
            log_interval: 10,
            hrfpl_features: HrfplFeatures::FrozenRandom,
            hrfpl_asset: None,
            hrfpl_seed: 0,
            hrfpl_width: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            errors.push("train.batch_size must be >= 1".into());
        }
        if self.total_steps == 0 {
            errors.push("train.total_steps must be >= 1".into());
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            errors.push("train.checkpoint_interval and train.log_interval must be >= 1".into());
        }
        if self.r1.enabled && (self.r1.interval == 0 || self.r1.gamma < 0.0 || self.r1.delta <= 0.0) {
            errors.push("train.r1 needs interval >= 1, gamma >= 0 and delta > 0".into());
        }
        if self.hrfpl_features == HrfplFeatures::Segmentation && self.hrfpl_asset.is_none() {
            errors.push("train.hrfpl_features = \"segmentation\" requires train.hrfpl_asset".into());
        }
        if self.hrfpl_width == 0 {
            errors.push("train.hrfpl_width must be >= 1".into());
        }
        self.weights.validate(errors);
    }

    pub fn build_features(&self, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self.hrfpl_features {
            HrfplFeatures::FrozenRandom => Box::new(FrozenRandomFeatures::new(self.hrfpl_seed, self.hrfpl_width, dtype, device)?),
            HrfplFeatures::Identity => Box::new(IdentityFeatures),
            HrfplFeatures::Segmentation => {
                let path = self.hrfpl_asset.as_deref().ok_or_else(|| {
                    Error::Config(vec!["train.hrfpl_features = \"segmentation\" requires train.hrfpl_asset".into()])
                })?;
                Box::new(SegmentationFeatures::load(path, dtype, device)?)
            }
        })
    }
}

/// The configuration recorded inside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

impl ConfigEcho {
    /// Fields that must agree for a resumed run to continue the same
    /// experiment. Step counts and intervals may change.
    pub fn mismatches(&self, other: &ConfigEcho) -> Vec<String> {
        let mut out = Vec::new();
        if self.generator != other.generator {
            out.push("generator".to_string());
        }
        let (a, b) = (&self.train, &other.train);
        let checks: [(&str, bool); 8] = [
            ("train.learning_rate", a.learning_rate == b.learning_rate),
            ("train.batch_size", a.batch_size == b.batch_size),
            ("train.seed", a.seed == b.seed),
            ("train.weights", a.weights == b.weights),
            ("train.r1", a.r1 == b.r1),
            ("train.hrfpl_features", a.hrfpl_features == b.hrfpl_features && a.hrfpl_asset == b.hrfpl_asset),
            ("train.hrfpl_seed", a.hrfpl_seed == b.hrfpl_seed),
            ("train.hrfpl_width", a.hrfpl_width == b.hrfpl_width),
        ];
        out.extend(checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.to_string()));
        out
    }
}

/// What one step did, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub d_adv: f64,
    pub r1: Option<f64>,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

/// Tensors shared by the two halves of a step.
pub struct StepForward {
    pub source: Tensor,
    /// Composited output; carries the generator graph.
    pub output: Tensor,
    pub hrfpl: Tensor,
    pub rec: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorReport {
    pub d_adv: f64,
    pub r1: Option<f64>,
    pub grad_norm: f64,
}

pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    rng: ChaCha8Rng,
    train: TrainConfig,
    manifest_hash: String,
    features: Box<dyn FeatureExtractor>,
}

impl TrainState {
    pub fn new(generator: &GeneratorConfig, train: &TrainConfig, manifest_hash: &str, dtype: DType, device: &Device) -> Result<Self> {
        let g = Generator::new(generator, dtype, device)?;
        let d = Discriminator::new(generator, dtype, device)?;
        let opt_g = Adam::new(g.params(), train.learning_rate)?;
        let opt_d = Adam::new(d.params(), train.learning_rate)?;
        Ok(Self {
            features: train.build_features(dtype, device)?,
            generator: g,
            discriminator: d,
            opt_g,
            opt_d,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(train.seed),
            train: train.clone(),
            manifest_hash: manifest_hash.to_string(),
        })
    }

    /// Rebuilds the state recorded in `ckpt` under the given configuration.
    /// The caller decides whether the configuration may differ from the echo.
    pub fn restore(ckpt: &Checkpoint, generator: &GeneratorConfig, train: &TrainConfig, device: &Device) -> Result<Self> {
        let mut s = Self::new(generator, train, &ckpt.manifest_hash, ckpt.dtype, device)?;
        s.generator.params().load_records(&ckpt.generator)?;
        s.discriminator.params().load_records(&ckpt.discriminator)?;
        s.opt_g.load_state(s.generator.params(), &ckpt.adam_g)?;
        s.opt_d.load_state(s.discriminator.params(), &ckpt.adam_d)?;
        s.step = ckpt.step;
        s.rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        s.rng.set_stream(ckpt.rng.stream);
        s.rng.set_word_pos(ckpt.rng.word_pos);
        Ok(s)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn dtype(&self) -> DType {
        self.generator.params().dtype()
    }

    pub fn device(&self) -> &Device {
        self.generator.params().device()
    }

    pub fn set_features(&mut self, features: Box<dyn FeatureExtractor>) {
        self.features = features;
    }

    pub fn config_echo(&self) -> ConfigEcho {
        ConfigEcho { generator: self.generator.config().clone(), train: self.train.clone() }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let echo = serde_json::to_string(&self.config_echo()).expect("configs serialize");
        Ok(Checkpoint {
            step: self.step,
            dtype: self.dtype(),
            config_echo: echo,
            manifest_hash: self.manifest_hash.clone(),
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            generator: self.generator.params().records()?,
            discriminator: self.discriminator.params().records()?,
            adam_g: self.opt_g.state(self.generator.params())?,
            adam_d: self.opt_d.state(self.discriminator.params())?,
        })
    }

    /// Generator forward pass for `batch`, keeping the graph for the G update.
    pub fn forward(&mut self, batch: &[MakeupSample]) -> Result<StepForward> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let (dtype, device) = (self.dtype(), self.device().clone());
        let sources: Vec<Image> = batch.iter().map(|s| s.source.clone()).collect();
        let bares: Vec<Image> = batch.iter().map(|s| s.bare.clone()).collect();
        let masks: Vec<RoiMask> = batch.iter().map(|s| s.mask.clone()).collect();
        let source = Image::batch_to_tensor(&sources, dtype, &device)?;
        let bare = Image::batch_to_tensor(&bares, dtype, &device)?;
        let mask = RoiMask::batch_to_tensor(&masks, dtype, &device)?;

        let composed = blend_tensor(&bare, &source, &mask)?;
        let input = assemble_tensor(&composed, &mask)?;
        let z = self.generator.sample_latent(&mut self.rng, batch.len())?;
        let pred = self.generator.forward(&input, &z)?;
        let output = blend_tensor(&pred, &source, &mask)?;
        if self.step.is_multiple_of(self.train.log_interval) {
            check_integrity(&output, &source, &mask, self.step)?;
        }
        let hrfpl = hrfpl_loss(&output, &source, self.features.as_ref())?;
        let rec = rec_loss(&output, &source)?;
        Ok(StepForward { source, output, hrfpl, rec })
    }

    /// Discriminator update on real photos against the detached output.
    /// Only discriminator parameters change.
    pub fn update_discriminator(&mut self, fwd: &StepForward) -> Result<DiscriminatorReport> {
        let real_logits = self.discriminator.forward(&fwd.source)?;
        let fake_logits = self.discriminator.forward(&fwd.output.detach())?;
        let d_adv = adv_loss_discriminator(&real_logits, &fake_logits)?;
        let mut d_total = d_adv.clone();
        let mut r1 = None;
        let r1c = &self.train.r1;
        if r1c.enabled && self.step.is_multiple_of(r1c.interval) {
            let gamma = r1c.gamma * r1c.interval as f64;
            let (surrogate, penalty) = self.discriminator.r1_penalty(&fwd.source, gamma, r1c.delta)?;
            d_total = (d_total + surrogate)?;
            r1 = Some(penalty / r1c.interval as f64);
        }
        let grads = d_total.backward()?;
        let grad_norm = self.discriminator.params().grad_norm(&grads)?;
        let d_adv = scalar(&d_adv)?;
        let pre = total_loss(
            scalar(&adv_loss_generator(&fake_logits)?)?,
            scalar(&fwd.hrfpl)?,
            scalar(&fwd.rec)?,
            &self.train.weights,
        );
        if !d_adv.is_finite() || !grad_norm.is_finite() || !pre.is_finite() || r1.is_some_and(|v| !v.is_finite()) {
            return Err(self.non_finite(&pre, d_adv, f64::NAN, grad_norm));
        }
        self.opt_d.step(self.discriminator.params(), &grads)?;
        Ok(DiscriminatorReport { d_adv, r1, grad_norm })
    }

    /// Generator update on the weighted total loss against the current
    /// discriminator. Only generator parameters change.
    pub fn update_generator(&mut self, fwd: &StepForward, d: &DiscriminatorReport) -> Result<StepReport> {
        let adv = adv_loss_generator(&self.discriminator.forward(&fwd.output)?)?;
        let total = weighted_total(&adv, &fwd.hrfpl, &fwd.rec, &self.train.weights)?;
        let grads = total.backward()?;
        let grad_norm_g = self.generator.params().grad_norm(&grads)?;
        let losses = total_loss(scalar(&adv)?, scalar(&fwd.hrfpl)?, scalar(&fwd.rec)?, &self.train.weights);
        if !losses.is_finite() || !grad_norm_g.is_finite() {
            return Err(self.non_finite(&losses, d.d_adv, grad_norm_g, d.grad_norm));
        }
        self.opt_g.step(self.generator.params(), &grads)?;
        let report = StepReport { step: self.step, losses, d_adv: d.d_adv, r1: d.r1, grad_norm_g, grad_norm_d: d.grad_norm };
        self.step += 1;
        Ok(report)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[MakeupSample]) -> Result<StepReport> {
        let fwd = self.forward(batch)?;
        let d = self.update_discriminator(&fwd)?;
        self.update_generator(&fwd, &d)
    }

    fn non_finite(&self, l: &LossBundle, d_loss: f64, grad_norm_g: f64, grad_norm_d: f64) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            adv: l.adv,
            hrfpl: l.hrfpl,
            rec: l.rec,
            d_loss,
            grad_norm_g,
            grad_norm_d,
        }
    }
}

/// Fails unless every pixel outside the mask is bit-identical to the source.
pub fn check_integrity(output: &Tensor, source: &Tensor, mask: &Tensor, step: u64) -> Result<()> {
    let o: Vec<f32> = output.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let s: Vec<f32> = source.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let m: Vec<f32> = mask.broadcast_as(output.shape())?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let ok = o.iter().zip(&s).zip(&m).all(|((a, b), k)| *k != 0.0 || a.to_bits() == b.to_bits());
    if ok {
        Ok(())
    } else {
        Err(Error::IntegrityViolation { step })
    }
}

/// Dataset positions for one step: sample `i` of step `s` is position
/// `p = s·B + i`, drawn from the permutation of epoch `p / n`. The plan is a
/// pure function of its arguments, so a resumed run sees the same batches.
pub fn batch_plan(n: usize, step: u64, batch_size: usize, seed: u64) -> Vec<(usize, u64)> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let p = step * batch_size as u64 + i;
            let epoch = p / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_permutation(n, seed, epoch)));
            }
            let perm = &cached.as_ref().expect("filled above").1;
            (perm[(p % n as u64) as usize], epoch)
        })
        .collect()
}

pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Opens `ckpt_path` for resumption under `generator`/`train`. A config that
/// differs from the checkpoint's echo is fatal unless `force` is set.
pub fn resume(
    ckpt_path: &Path,
    generator: &GeneratorConfig,
    train: &TrainConfig,
    manifest_hash: &str,
    force: bool,
    device: &Device,
) -> Result<TrainState> {
    let ckpt = Checkpoint::read(ckpt_path)?;
    let echo: ConfigEcho = serde_json::from_str(&ckpt.config_echo).map_err(|e| Error::Checkpoint {
        path: ckpt_path.to_path_buf(),
        reason: format!("config echo is not valid: {e}"),
    })?;
    let mut diffs = echo.mismatches(&ConfigEcho { generator: generator.clone(), train: train.clone() });
    if ckpt.manifest_hash != manifest_hash {
        diffs.push("dataset manifest".into());
    }
    if !diffs.is_empty() {
        if !force {
            return Err(Error::ConfigMismatch(diffs));
        }
        log::warn!("resuming despite config mismatch on: {}", diffs.join(", "));
    }
    let mut state = TrainState::restore(&ckpt, generator, train, device)?;
    state.manifest_hash = manifest_hash.to_string();
    Ok(state)
}

/// `load_checkpoint` counterpart that trusts the checkpoint's own config echo.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<TrainState> {
    let ckpt = Checkpoint::read(path)?;
    let echo: ConfigEcho = serde_json::from_str(&ckpt.config_echo)
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: format!("config echo is not valid: {e}") })?;
    TrainState::restore(&ckpt, &echo.generator, &echo.train, device)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint()?.write(path)
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Runs `state` to `total_steps`, appending one JSON line per step to
/// `out_dir/train_log.jsonl` and writing checkpoints at the configured
/// interval and at the end. Returns the final checkpoint path.
pub fn train(state: &mut TrainState, loader: &SampleLoader, out_dir: &Path, mut on_step: impl FnMut(&StepReport)) -> Result<PathBuf> {
    let manifest: &DatasetManifest = loader.manifest();
    let ids: Vec<&str> = manifest.split(Split::Train).map(|e| e.id.as_str()).collect();
    if ids.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let cfg = state.train_config().clone();
    let mut last = None;
    while state.step() < cfg.total_steps {
        let plan = batch_plan(ids.len(), state.step(), cfg.batch_size, cfg.seed);
        let items: Vec<(&str, u64)> = plan.iter().map(|&(i, epoch)| (ids[i], epoch)).collect();
        let batch = loader.batch_at(&items)?;
        let report = state.train_step(&batch)?;
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if report.step % cfg.log_interval == 0 {
            log::info!(
                "step {} total {:.4} adv {:.4} hrfpl {:.4} rec {:.4} d {:.4}",
                report.step,
                report.losses.total,
                report.losses.adv,
                report.losses.hrfpl,
                report.losses.rec,
                report.d_adv
            );
        }
        on_step(&report);
        if state.step().is_multiple_of(cfg.checkpoint_interval) || state.step() == cfg.total_steps {
            let path = checkpoint_path(out_dir, state.step());
            save_checkpoint(state, &path)?;
            last = Some(path);
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    match last {
        Some(p) => Ok(p),
        None => {
            let path = checkpoint_path(out_dir, state.step());
            save_checkpoint(state, &path)?;
            Ok(path)
        }
    }
}
