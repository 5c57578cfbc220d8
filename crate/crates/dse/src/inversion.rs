//! Inverting images: a single encoder pass, per-batch encoder fine-tuning,
//! direct optimization of style latents, and latent-direction edits.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{paired_views, AttentionConfig};
use crate::backbone::Backbone;
use crate::checkpoint::write_atomic;
use crate::encoder::Encoder;
use crate::error::{config_err, contract, DseError, Result};
use crate::evalharness::{index_ids, pair_metrics, MetricParams, MetricRow};
use crate::generators::{gaussian, Generator};
use crate::latent::{Family, LatentBundle};
use crate::layers::{scalar, to_f64_vec};
use crate::similarity::{image_loss, total_loss, LossConfig};
use crate::training::{bundle_latent_loss, reconstruct};

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub latents: LatentBundle,
    pub reconstruction: Tensor,
    pub metrics: Vec<MetricRow>,
    pub steps_used: usize,
    /// Loss before each update (fine-tuning and direct optimization).
    pub losses: Vec<f64>,
    /// Loss of the returned result.
    pub best_loss: Option<f64>,
    /// Set when optimization stopped on divergence.
    pub diverged: bool,
}

fn check_images(gen: &Generator, images: &Tensor) -> Result<usize> {
    let r = gen.spec().resolution;
    match images.dims() {
        &[n, 3, h, w] if h == r && w == r => Ok(n),
        other => Err(DseError::InvalidInput(format!(
            "images must be preprocessed to (n, 3, {r}, {r}), got {other:?}"
        ))),
    }
}

/// One encoder pass followed by synthesis.
pub fn invert_batch(
    enc: &Encoder,
    gen: &Generator,
    images: &Tensor,
    class_hint: Option<&[usize]>,
    backbone: &Backbone,
    params: &MetricParams,
) -> Result<InversionResult> {
    let n = check_images(gen, images)?;
    let images = images.to_dtype(gen.dtype())?;
    let training = enc.is_training();
    enc.set_training(false);
    let out = reconstruct(gen, enc, &images, class_hint, false);
    enc.set_training(training);
    let (latents, reconstruction) = out?;
    let metrics = pair_metrics(&index_ids(n), &images, &reconstruction, backbone, params)?;
    Ok(InversionResult {
        latents: latents.detach(),
        reconstruction: reconstruction.detach(),
        metrics,
        steps_used: 0,
        losses: Vec::new(),
        best_loss: None,
        diverged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub loss: LossConfig,
    /// Abort when the loss stays above this multiple of its initial value...
    pub divergence_factor: f64,
    /// ...for this many consecutive steps.
    pub divergence_patience: usize,
    /// Direct optimization only: also optimize the 4×4 input.
    pub optimize_const: bool,
    pub metrics: MetricParams,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.0015,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            loss: LossConfig::default(),
            divergence_factor: 10.0,
            divergence_patience: 100,
            optimize_const: false,
            metrics: MetricParams::default(),
        }
    }
}

impl OptimizeConfig {
    /// Settings for direct latent optimization: a few latents rather than a
    /// network, so a larger step with momentum converges much faster.
    pub fn direct() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.03,
            adam_beta1: 0.9,
            ..Self::default()
        }
    }

    fn optimizer(&self, vars: Vec<Var>) -> Result<AdamW> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.loss.weights.validate()?;
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?)
    }
}

/// Best-so-far bookkeeping shared by the two optimizers.
struct Tracker<T> {
    initial: Option<f64>,
    best: Option<(f64, T)>,
    losses: Vec<f64>,
    above: usize,
    factor: f64,
    patience: usize,
}

impl<T> Tracker<T> {
    fn new(cfg: &OptimizeConfig) -> Self {
        Self {
            initial: None,
            best: None,
            losses: Vec::new(),
            above: 0,
            factor: cfg.divergence_factor,
            patience: cfg.divergence_patience,
        }
    }

    /// Records `loss`; returns true when optimization has diverged.
    fn observe(&mut self, loss: f64, state: impl FnOnce() -> T) -> Result<bool> {
        if !loss.is_finite() {
            log::warn!("non-finite loss at step {}; stopping", self.losses.len());
            return Ok(true);
        }
        self.losses.push(loss);
        let initial = *self.initial.get_or_insert(loss);
        if self.best.as_ref().is_none_or(|(b, _)| loss < *b) {
            self.best = Some((loss, state()));
        }
        if loss > self.factor * initial {
            self.above += 1;
        } else {
            self.above = 0;
        }
        Ok(self.above >= self.patience && self.patience > 0)
    }
}

/// Fine-tunes a copy of `base` on `images` (the caller's encoder is never
/// modified). The latent term compares the encoding with a learnable target
/// initialized at the first encoding. Returns the best iterate.
#[allow(clippy::too_many_arguments)]
pub fn finetune_encoder(
    base: &Encoder,
    gen: &Generator,
    images: &Tensor,
    class_hint: Option<&[usize]>,
    backbone: &Backbone,
    attention: &AttentionConfig,
    cfg: &OptimizeConfig,
) -> Result<InversionResult> {
    let n = check_images(gen, images)?;
    let images = images.to_dtype(gen.dtype())?;
    if cfg.steps == 0 {
        return invert_batch(base, gen, &images, class_hint, backbone, &cfg.metrics);
    }
    let enc = base.deep_copy()?;
    enc.set_training(false);
    let (start, _) = reconstruct(gen, &enc, &images, class_hint, false)?;
    let targets = start
        .compared()
        .into_iter()
        .map(|(_, t)| Var::from_tensor(&t.detach()))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let target_bundle = |targets: &[Var]| -> LatentBundle {
        match &start {
            LatentBundle::Style { .. } => LatentBundle::Style {
                w: targets[0].as_tensor().clone(),
                z_c: None,
                z_n: None,
            },
            LatentBundle::Progressive { .. } => LatentBundle::Progressive {
                z: targets[0].as_tensor().clone(),
            },
            LatentBundle::ClassConditional { .. } => LatentBundle::ClassConditional {
                z: targets[0].as_tensor().clone(),
                c: targets[1].as_tensor().clone(),
            },
        }
    };
    let mut vars = enc.trainable_vars();
    vars.extend(targets.iter().cloned());
    let mut opt = cfg.optimizer(vars)?;
    let mut tracker = Tracker::new(cfg);
    let mut diverged = false;
    let mut steps_used = 0;
    for step in 0..=cfg.steps {
        let (latents, x_hat) = reconstruct(gen, &enc, &images, class_hint, false)?;
        let (views, views_hat) = paired_views(&images, &x_hat, attention, backbone)?;
        let image = image_loss(&views, &views_hat, &cfg.loss, backbone)?;
        let latent = bundle_latent_loss(&target_bundle(&targets), &latents, &cfg.loss)?;
        let loss = total_loss(&image, &latent, &cfg.loss.weights)?;
        let value = scalar(&loss.value)?;
        if tracker.observe(value, || (latents.detach(), x_hat.detach()))? {
            diverged = true;
            break;
        }
        if step == cfg.steps {
            break;
        }
        opt.backward_step(&loss.value)?;
        steps_used = step + 1;
    }
    let (best_loss, (latents, reconstruction)) = tracker
        .best
        .ok_or_else(|| DseError::Numerical("fine-tuning produced no finite loss".into()))?;
    let metrics = pair_metrics(&index_ids(n), &images, &reconstruction, backbone, &cfg.metrics)?;
    Ok(InversionResult {
        latents,
        reconstruction,
        metrics,
        steps_used,
        losses: tracker.losses,
        best_loss: Some(best_loss),
        diverged,
    })
}

/// Starting point of direct latent optimization.
pub enum LatentInit<'a> {
    /// Encoder output for the target images.
    Encoder(&'a Encoder),
    /// Given latents.
    Latents(LatentBundle),
    /// Mapping of gaussian `z` drawn from this seed.
    Random(u64),
}

/// Gradient descent on the style latents `w` (and optionally the 4×4 input)
/// against the image loss. Returns the best iterate.
pub fn optimize_w_direct(
    gen: &Generator,
    images: &Tensor,
    init: LatentInit<'_>,
    backbone: &Backbone,
    attention: &AttentionConfig,
    cfg: &OptimizeConfig,
) -> Result<InversionResult> {
    if gen.family() != Family::Style {
        return Err(contract!("direct w optimization needs a style generator, got {}", gen.family()));
    }
    let n = check_images(gen, images)?;
    let images = images.to_dtype(gen.dtype())?;
    let start = match init {
        LatentInit::Encoder(enc) => {
            let training = enc.is_training();
            enc.set_training(false);
            let out = enc.encode(&images, None);
            enc.set_training(training);
            out?.detach()
        }
        LatentInit::Latents(l) => l.detach(),
        LatentInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = gaussian(&mut rng, &[n, gen.spec().d_z], gen.dtype())?;
            LatentBundle::Style {
                w: gen.mapping(&z)?,
                z_c: None,
                z_n: None,
            }
        }
    };
    let LatentBundle::Style { w, z_c, .. } = start else {
        return Err(contract!("direct w optimization needs style latents"));
    };
    if w.dim(0)? != n {
        return Err(contract!("initial latents cover {} images, batch has {n}", w.dim(0)?));
    }
    let w = Var::from_tensor(&w)?;
    let z_c = match (cfg.optimize_const, z_c) {
        (true, Some(t)) => Some(Var::from_tensor(&t)?),
        (true, None) => Some(Var::from_tensor(&gen.constant_input(n)?)?),
        (false, t) => t.map(|t| Var::from_tensor(&t)).transpose()?,
    };
    let mut vars = vec![w.clone()];
    if cfg.optimize_const {
        vars.extend(z_c.iter().cloned());
    }
    let mut opt = cfg.optimizer(vars)?;
    let mut tracker = Tracker::new(cfg);
    let mut diverged = false;
    let mut steps_used = 0;
    let bundle = || LatentBundle::Style {
        w: w.as_tensor().clone(),
        z_c: z_c.as_ref().map(|v| v.as_tensor().clone()),
        z_n: None,
    };
    for step in 0..=cfg.steps {
        let latents = bundle();
        let x_hat = gen.synthesize(&latents)?.image;
        let (views, views_hat) = paired_views(&images, &x_hat, attention, backbone)?;
        let loss = image_loss(&views, &views_hat, &cfg.loss, backbone)?;
        let value = scalar(&loss.value)?;
        if tracker.observe(value, || (latents.detach(), x_hat.detach()))? {
            diverged = true;
            break;
        }
        if step == cfg.steps {
            break;
        }
        opt.backward_step(&loss.value)?;
        steps_used = step + 1;
    }
    let (best_loss, (latents, reconstruction)) = tracker
        .best
        .ok_or_else(|| DseError::Numerical("latent optimization produced no finite loss".into()))?;
    let metrics = pair_metrics(&index_ids(n), &images, &reconstruction, backbone, &cfg.metrics)?;
    Ok(InversionResult {
        latents,
        reconstruction,
        metrics,
        steps_used,
        losses: tracker.losses,
        best_loss: Some(best_loss),
        diverged,
    })
}

/// `w' = w + alpha * d` on the selected style layers.
#[derive(Debug, Clone)]
pub struct EditRequest {
    /// `(n_layers, d_w)` or `(d_w,)`.
    pub direction: Tensor,
    pub alpha: f64,
    /// Style layers to shift; all when `None`.
    pub layers: Option<Vec<usize>>,
}

impl EditRequest {
    pub fn validate(&self, n_layers: usize, d_w: usize) -> Result<()> {
        match self.direction.dims() {
            [d] if *d == d_w => {}
            [l, d] if *l == n_layers && *d == d_w => {}
            other => {
                return Err(contract!(
                    "direction shape {other:?} incompatible with ({n_layers}, {d_w}) style latents"
                ))
            }
        }
        if !to_f64_vec(&self.direction)?.iter().all(|v| v.is_finite()) {
            return Err(contract!("direction contains non-finite values"));
        }
        if !self.alpha.is_finite() {
            return Err(contract!("edit coefficient must be finite, got {}", self.alpha));
        }
        if let Some(bad) = self.layers.iter().flatten().find(|&&l| l >= n_layers) {
            return Err(contract!("layer {bad} out of range for {n_layers} style layers"));
        }
        Ok(())
    }
}

/// Applies an edit to `w` of shape `(n, n_layers, d_w)`.
pub fn edit(w: &Tensor, request: &EditRequest) -> Result<Tensor> {
    let (_, n_layers, d_w) = w
        .dims3()
        .map_err(|_| contract!("edit expects (n, n_layers, d_w) latents, got {:?}", w.dims()))?;
    request.validate(n_layers, d_w)?;
    let mut mask = vec![0.0f64; n_layers];
    match &request.layers {
        Some(ls) => ls.iter().for_each(|&l| mask[l] = 1.0),
        None => mask.fill(1.0),
    }
    let mask = Tensor::from_vec(mask, (1, n_layers, 1), w.device())?.to_dtype(w.dtype())?;
    let dir = request.direction.to_dtype(w.dtype())?;
    let dir = match dir.rank() {
        1 => dir.reshape((1, 1, d_w))?,
        _ => dir.unsqueeze(0)?,
    };
    let shift = (dir.broadcast_mul(&mask)? * request.alpha)?;
    Ok(w.broadcast_add(&shift)?)
}

/// A stored editing direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionManifest {
    pub name: String,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Suggested range for the edit coefficient.
    pub alpha_range: [f64; 2],
    pub shape: Vec<usize>,
}

pub const DIRECTION_MANIFEST: &str = "direction.json";
pub const DIRECTION_ARRAY: &str = "direction.safetensors";

pub fn save_direction(dir: &Path, manifest: &DirectionManifest, direction: &Tensor) -> Result<()> {
    if manifest.shape != direction.dims() {
        return Err(contract!(
            "manifest shape {:?} does not match direction {:?}",
            manifest.shape,
            direction.dims()
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    let arr = dir.join(DIRECTION_ARRAY);
    let tmp = dir.join(format!("{DIRECTION_ARRAY}.tmp"));
    direction
        .to_dtype(DType::F32)?
        .save_safetensors("direction", &tmp)
        .map_err(|e| DseError::io(&tmp, e))?;
    std::fs::rename(&tmp, &arr).map_err(|e| DseError::io(&arr, e))?;
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| DseError::io(dir, e))?;
    write_atomic(&dir.join(DIRECTION_MANIFEST), &json)
}

pub fn load_direction(dir: &Path, dtype: DType) -> Result<(DirectionManifest, Tensor)> {
    let mpath = dir.join(DIRECTION_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| DseError::io(&mpath, e))?;
    let manifest: DirectionManifest =
        serde_json::from_str(&text).map_err(|e| DseError::io(&mpath, format!("corrupt manifest: {e}")))?;
    let apath = dir.join(DIRECTION_ARRAY);
    let arrays = candle_core::safetensors::load(&apath, &candle_core::Device::Cpu).map_err(|e| DseError::io(&apath, e))?;
    let t = arrays
        .get("direction")
        .ok_or_else(|| DseError::io(&apath, "no `direction` array"))?
        .to_dtype(dtype)?;
    if t.dims() != manifest.shape {
        return Err(DseError::io(&apath, format!("array shape {:?} differs from manifest", t.dims())));
    }
    Ok((manifest, t))
}
