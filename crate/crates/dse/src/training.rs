//! Self-supervised encoder training against a frozen generator.
//!
//! Each step samples latents, renders `x`, encodes it, renders the
//! reconstruction `x'` and minimizes the three-scale image loss plus the
//! weighted latent loss. Only the encoder is updated.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{paired_views, AttentionConfig, TripleScaleViews};
use crate::backbone::Backbone;
use crate::checkpoint::write_atomic;
use crate::encoder::Encoder;
use crate::error::{config_err, DseError, Result};
use crate::generators::{gaussian, Generator};
use crate::latent::{Family, LatentBundle};
use crate::layers::scalar;
use crate::similarity::{
    image_loss, latent_loss_group, merge_losses, mse_loss, total_loss, Loss, LossBreakdown, LossConfig,
    LossWeights, MseMode, SsimParams,
};

/// How the reconstruction enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Strategy {
    /// The original-scale term is computed on a detached reconstruction, so
    /// only the attention views drive the encoder. View weights (1, 1).
    One,
    /// Every scale keeps its gradient; the encoder uses fused-scale
    /// downsampling. View weights (5, 9).
    Two,
}

impl Strategy {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Strategy::One),
            2 => Ok(Strategy::Two),
            other => Err(config_err!("unknown strategy {other} (expected 1 or 2)")),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Strategy::One => 1,
            Strategy::Two => 2,
        }
    }

    /// `(mu1, mu2)` used with this strategy.
    pub fn view_weights(self) -> (f64, f64) {
        match self {
            Strategy::One => (1.0, 1.0),
            Strategy::Two => (5.0, 9.0),
        }
    }

    pub fn fused_scale(self) -> bool {
        self == Strategy::Two
    }
}

impl TryFrom<u8> for Strategy {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        Strategy::from_number(n).map_err(|e| e.to_string())
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        s.number()
    }
}

/// Which encoding the latent loss compares against the sampled latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// `E(x)`, the same pass that produced the reconstruction.
    #[default]
    EncodeOnce,
    /// `E(x')`, a second pass over the reconstruction.
    EncodeReconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub samples_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    /// `mu1`/`mu2` are replaced by the strategy's view weights.
    pub weights: LossWeights,
    pub mse_mode: MseMode,
    pub ssim: SsimParams,
    pub latent_source: LatentSource,
    pub seed: u64,
    /// Stop once the reconstruction MSE of a batch falls below this.
    pub skip_threshold: f64,
    /// Draw this many latents once and cycle through them instead of
    /// sampling fresh ones every step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_pool: Option<usize>,
    /// Hard cap on optimizer steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Feed the encoder's noise parameters to the generator during
    /// reconstruction instead of zero noise.
    pub use_encoder_noise: bool,
    /// Write an encoder checkpoint every this many steps (and at the end).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0015,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            samples_per_epoch: 30_000,
            epochs: 7,
            batch_size: 8,
            strategy: Strategy::One,
            weights: LossWeights::default(),
            mse_mode: MseMode::default(),
            ssim: SsimParams::default(),
            latent_source: LatentSource::default(),
            seed: 0,
            skip_threshold: 1e-4,
            fixed_pool: None,
            max_steps: None,
            use_encoder_noise: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Batch size of the full-scale presets.
    pub fn batch_for_resolution(resolution: usize) -> usize {
        match resolution {
            r if r >= 1024 => 2,
            r if r >= 512 => 4,
            _ => 8,
        }
    }

    /// Short schedule for CPU-sized networks.
    pub fn desk() -> Self {
        Self {
            samples_per_epoch: 2048,
            epochs: 1,
            ..Self::default()
        }
    }

    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }

    /// Loss weights with the strategy's view weights applied.
    pub fn loss_config(&self) -> LossConfig {
        let (mu1, mu2) = self.strategy.view_weights();
        LossConfig {
            weights: self.weights.with_attention(mu1, mu2),
            mse_mode: self.mse_mode,
            ssim: self.ssim,
        }
    }

    pub fn total_steps(&self) -> usize {
        let per_epoch = self.samples_per_epoch.div_ceil(self.batch_size.max(1));
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if self.fixed_pool == Some(0) {
            return Err(config_err!("fixed_pool must be positive when set"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(config_err!("checkpoint_every must be positive when set"));
        }
        self.weights.validate()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Per-pixel MSE between the batch and its reconstruction.
    pub reconstruction_mse: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Set when training stopped because the reconstruction already matched.
    pub stopped_early: bool,
}

/// Applies the strategy's gradient policy to the reconstruction's views.
pub fn apply_strategy_gating(strategy: Strategy, views_hat: &TripleScaleViews) -> TripleScaleViews {
    match strategy {
        Strategy::One => TripleScaleViews {
            orig: views_hat.orig.detach(),
            ..views_hat.clone()
        },
        Strategy::Two => views_hat.clone(),
    }
}

/// A batch of generator samples with the latents that produced them.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub images: Tensor,
    pub latents: LatentBundle,
    /// Class labels (class-conditional family only).
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn draw(gen: &Generator, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (latents, _, labels) = gen.sample_latents(n, rng)?;
        let images = gen.synthesize(&latents)?.image.detach();
        let latents = match latents {
            LatentBundle::Style { w, .. } => LatentBundle::Style { w, z_c: None, z_n: None },
            other => other,
        };
        Ok(Self {
            images,
            latents: latents.detach(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len().max(self.images.dim(0).unwrap_or(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.narrow(0, start, len)?,
            latents: self.latents.narrow(start, len)?,
            labels: self.labels.iter().skip(start).take(len).copied().collect(),
        })
    }

    fn class_hint(&self) -> Option<&[usize]> {
        (!self.labels.is_empty()).then_some(self.labels.as_slice())
    }
}

/// Reconstruction of `x` through the encoder and generator.
pub fn reconstruct(
    gen: &Generator,
    enc: &Encoder,
    x: &Tensor,
    class_hint: Option<&[usize]>,
    use_encoder_noise: bool,
) -> Result<(LatentBundle, Tensor)> {
    let mut latents = enc.encode(x, class_hint)?;
    if use_encoder_noise {
        if let LatentBundle::Style { z_n, .. } = &mut latents {
            *z_n = Some(enc.noise_latents(x.dim(0)?, &gen.spec().layer_channels())?);
        }
    }
    let image = gen.synthesize(&latents)?.image;
    Ok((latents, image))
}

/// Latent loss between two bundles of the same family.
pub fn bundle_latent_loss(target: &LatentBundle, imitation: &LatentBundle, cfg: &LossConfig) -> Result<Loss> {
    if target.family() != imitation.family() {
        return Err(DseError::Contract(format!(
            "latent loss between {} and {} latents",
            target.family(),
            imitation.family()
        )));
    }
    let parts = target
        .compared()
        .into_iter()
        .zip(imitation.compared())
        .map(|((group, a), (_, b))| latent_loss_group(group, a, b, cfg))
        .collect::<Result<Vec<_>>>()?;
    merge_losses(parts)
}

/// Everything one training step computes before the update.
pub struct StepLoss {
    pub loss: Loss,
    pub reconstruction: Tensor,
    pub reconstruction_mse: f64,
}

/// Forward pass and loss of one step, without touching the parameters.
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    gen: &Generator,
    enc: &Encoder,
    backbone: &Backbone,
    attention: &AttentionConfig,
    config: &TrainConfig,
    batch: &SampleBatch,
) -> Result<StepLoss> {
    let cfg = config.loss_config();
    let x = &batch.images;
    let hint = batch.class_hint();
    let (latents_hat, x_hat) = reconstruct(gen, enc, x, hint, config.use_encoder_noise)?;
    let (views, views_hat) = paired_views(x, &x_hat, attention, backbone)?;
    let views_hat = apply_strategy_gating(config.strategy, &views_hat);
    let image = image_loss(&views, &views_hat, &cfg, backbone)?;
    let compared = match config.latent_source {
        LatentSource::EncodeOnce => latents_hat,
        LatentSource::EncodeReconstruction => enc.encode(&x_hat, hint)?,
    };
    let latent = bundle_latent_loss(&batch.latents, &compared, &cfg)?;
    let loss = total_loss(&image, &latent, &cfg.weights)?;
    let reconstruction_mse = scalar(&mse_loss(x, &x_hat.detach(), MseMode::MeanSq)?)?;
    Ok(StepLoss {
        loss,
        reconstruction: x_hat,
        reconstruction_mse,
    })
}

/// Fails before the first step when the pairing is inconsistent.
pub fn check_pairing(gen: &Generator, enc: &Encoder, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    enc.spec().check_against(gen.spec())?;
    if enc.spec().fused_scale != config.strategy.fused_scale() {
        return Err(config_err!(
            "strategy {} needs an encoder with fused_scale = {}",
            config.strategy.number(),
            config.strategy.fused_scale()
        ));
    }
    if enc.store().dtype() != gen.dtype() {
        return Err(config_err!("encoder and generator precisions differ"));
    }
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DseError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| DseError::io(path, e))
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "train_config.json";
pub const ENCODER_DIR: &str = "encoder";

/// Trains `enc` in place. With `out_dir`, writes a config snapshot, an
/// append-only history log and encoder checkpoints there.
pub fn train_dse(
    gen: &Generator,
    enc: &Encoder,
    backbone: &Backbone,
    attention: &AttentionConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainHistory> {
    check_pairing(gen, enc, config)?;
    attention.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = match config.fixed_pool {
        Some(n) => Some(SampleBatch::draw(gen, n, &mut rng)?),
        None => None,
    };
    let history_path = out_dir.map(|d| d.join(HISTORY_FILE));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
        let json = serde_json::to_vec_pretty(config).map_err(|e| DseError::io(dir, e))?;
        write_atomic(&dir.join(CONFIG_FILE), &json)?;
        if let Some(p) = &history_path {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| DseError::io(p, e))?;
            }
        }
    }
    let mut opt = AdamW::new(
        enc.trainable_vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    enc.set_training(true);
    let mut history = TrainHistory::default();
    let total = config.total_steps();
    let mut cursor = 0;
    for step in 0..total {
        let batch = match &pool {
            Some(p) => {
                let n = config.batch_size.min(p.len());
                if cursor + n > p.len() {
                    cursor = 0;
                }
                let b = p.narrow(cursor, n)?;
                cursor += n;
                b
            }
            None => SampleBatch::draw(gen, config.batch_size, &mut rng)?,
        };
        let out = step_loss(gen, enc, backbone, attention, config, &batch)?;
        if !out.loss.breakdown.total.is_finite() {
            return Err(DseError::Numerical(format!(
                "non-finite loss at step {step}; last checkpoint kept"
            )));
        }
        let record = StepRecord {
            step,
            loss: out.loss.breakdown.clone(),
            reconstruction_mse: out.reconstruction_mse,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(p) = &history_path {
            let line = serde_json::to_string(&record).map_err(|e| DseError::io(p, e))?;
            append_line(p, &line)?;
        }
        log::debug!("step {step}: loss {:.5} mse {:.5}", record.loss.total, record.reconstruction_mse);
        history.records.push(record);
        if out.reconstruction_mse < config.skip_threshold {
            history.stopped_early = true;
            break;
        }
        opt.backward_step(&out.loss.value)?;
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if (step + 1) % every == 0 {
                let path = dir.join(ENCODER_DIR);
                enc.save(&path)?;
                history.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(ENCODER_DIR);
        enc.save(&path)?;
        history.checkpoints.push(path);
    }
    history.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(history)
}

/// Mean per-pixel reconstruction MSE of `batch`, evaluated in chunks.
pub fn reconstruction_mse(
    gen: &Generator,
    enc: &Encoder,
    batch: &SampleBatch,
    chunk: usize,
    use_encoder_noise: bool,
) -> Result<f64> {
    let n = batch.len();
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let part = batch.narrow(start, len)?;
        let (_, x_hat) = reconstruct(gen, enc, &part.images, part.class_hint(), use_encoder_noise)?;
        acc += scalar(&mse_loss(&part.images, &x_hat.detach(), MseMode::MeanSq)?)? * len as f64;
        start += len;
    }
    if n == 0 {
        return Err(DseError::InvalidInput("empty batch".into()));
    }
    Ok(acc / n as f64)
}

/// Random batch of latents and images for tests and diagnostics.
pub fn random_images(n: usize, resolution: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian(&mut rng, &[n, 3, resolution, resolution], dtype)?.tanh()?)
}

/// Fails unless `family` is the style family.
pub fn require_style(family: Family) -> Result<()> {
    if family != Family::Style {
        return Err(DseError::Contract(format!("operation needs style latents, got {family}")));
    }
    Ok(())
}
