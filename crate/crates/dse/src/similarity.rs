//! Similarity metrics and the composite losses built from them.
//!
//! Every metric is a differentiable function of candle tensors. The composite
//! losses return both the scalar tensor to back-propagate and a
//! [`LossBreakdown`] holding each unweighted term, so that a run's history
//! records exactly what went into the total.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::TripleScaleViews;
use crate::backbone::Backbone;
use crate::error::{contract, DseError, Result};
use crate::layers::scalar;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-24;
const FEATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MseMode {
    /// Mean of element-wise squared differences.
    #[default]
    MeanSq,
    /// Euclidean norm of the whole difference divided by the batch size.
    L2OverBatch,
}

/// Scalar weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// MSE weight.
    pub alpha: f64,
    /// Cosine weight.
    pub beta: f64,
    /// Perceptual (LPIPS) weight.
    pub gamma: f64,
    /// Structural (1 - SSIM) weight.
    pub delta: f64,
    /// Weight of the latent part in the total.
    pub epsilon: f64,
    /// Weight of the first attention view.
    pub mu1: f64,
    /// Weight of the second attention view.
    pub mu2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 3.0,
            gamma: 2.0,
            delta: 1.0,
            epsilon: 0.01,
            mu1: 1.0,
            mu2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn with_attention(self, mu1: f64, mu2: f64) -> Self {
        Self { mu1, mu2, ..self }
    }

    /// View weights for centre-aligned faces when (0.375, 0.625) is read as
    /// loss weights rather than crop fractions.
    pub fn aligned_faces() -> Self {
        Self::default().with_attention(0.375, 0.625)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DseError::Config(format!(
                    "loss weight {name} must be a finite nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range L of the pixel values.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 2.0,
        }
    }
}

/// Everything the composite losses need besides their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mse_mode: MseMode,
    pub ssim: SsimParams,
}

impl LossConfig {
    pub fn with_weights(weights: LossWeights) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar(&t.detach().sum_all()?)?;
    if !s.is_finite() {
        return Err(DseError::InvalidInput(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Squared-error loss; see [`MseMode`] for the two readings.
pub fn mse_loss(a: &Tensor, b: &Tensor, mode: MseMode) -> Result<Tensor> {
    check_same_shape(a, b, "mse_loss")?;
    check_finite(a, "mse_loss")?;
    check_finite(b, "mse_loss")?;
    let diff = (a - b)?;
    match mode {
        MseMode::MeanSq => Ok(diff.sqr()?.mean_all()?),
        MseMode::L2OverBatch => {
            let n = if a.rank() == 0 { 1 } else { a.dim(0)? };
            Ok(((diff.sqr()?.sum_all()? + NORM_FLOOR)?.sqrt()? / n as f64)?)
        }
    }
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    Ok(match t.rank() {
        0 => t.reshape((1, 1))?,
        1 => t.unsqueeze(0)?,
        _ => t.flatten_from(1)?,
    })
}

/// `1 - cos(a, b)`. Rank-1 inputs are one vector; otherwise the leading axis
/// is the batch and the loss is averaged over per-sample cosines of the
/// flattened samples. A zero-norm sample scores 1 (see [`zero_norm_samples`]).
pub fn cos_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "cos_loss")?;
    let (a, b) = (as_rows(a)?, as_rows(b)?);
    let dot = (&a * &b)?.sum(1)?;
    let na = (a.sqr()?.sum(1)? + NORM_FLOOR)?.sqrt()?;
    let nb = (b.sqr()?.sum(1)? + NORM_FLOOR)?.sqrt()?;
    let cos = (dot / (na * nb)?)?;
    Ok((1.0 - cos)?.mean_all()?)
}

/// Number of samples for which [`cos_loss`] fell back to its zero-norm value.
pub fn zero_norm_samples(a: &Tensor, b: &Tensor) -> Result<usize> {
    let na = as_rows(a)?.sqr()?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let nb = as_rows(b)?.sqr()?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(na.iter().zip(&nb).filter(|(x, y)| **x == 0.0 || **y == 0.0).count())
}

/// `-Σ S(b) log(S(a) / S(b))`, i.e. KL(S(b) ‖ S(a)), with the softmax taken
/// over the last axis. Summed along that axis and averaged over the rest.
pub fn kl_softmax_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "kl_softmax_loss")?;
    let a = if a.rank() == 0 { a.reshape(1)? } else { a.clone() };
    let b = if b.rank() == 0 { b.reshape(1)? } else { b.clone() };
    let pa = candle_nn::ops::softmax(&a, D::Minus1)?;
    let pb = candle_nn::ops::softmax(&b, D::Minus1)?;
    let log_pa = pa.maximum(LOG_FLOOR)?.log()?;
    let log_pb = pb.maximum(LOG_FLOOR)?.log()?;
    let per_row = (pb * (log_pb - log_pa)?)?.sum(D::Minus1)?;
    Ok(per_row.mean_all()?)
}

/// KL on images: softmax over each channel's flattened pixels.
pub fn kl_softmax_images(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "kl_softmax_images")?;
    let (n, c, h, w) = a.dims4()?;
    kl_softmax_loss(&a.reshape((n, c, h * w))?, &b.reshape((n, c, h * w))?)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean structural similarity over valid Gaussian windows, channels treated
/// independently. Inputs are `(n, c, h, w)`.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<Tensor> {
    check_same_shape(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    let win = params.window;
    if win % 2 == 0 || win == 0 {
        return Err(DseError::InvalidInput(format!("ssim window must be odd, got {win}")));
    }
    if h < win || w < win {
        return Err(DseError::InvalidInput(format!(
            "image {h}x{w} is smaller than the {win}x{win} ssim window"
        )));
    }
    let dtype = a.dtype();
    let g = gaussian_window(win, params.sigma);
    let band = |len: usize| -> Result<Tensor> {
        let out = len - win + 1;
        let mut m = vec![0.0; out * len];
        for i in 0..out {
            m[i * len + i..i * len + i + win].copy_from_slice(&g);
        }
        Ok(Tensor::from_vec(m, (out, len), a.device())?.to_dtype(dtype)?)
    };
    // Separable valid-mode Gaussian filtering as two banded matrix products.
    let rows = band(h)?;
    let cols = band(w)?.t()?;
    let blur = |x: &Tensor| -> Result<Tensor> { Ok(rows.broadcast_matmul(x)?.broadcast_matmul(&cols)?) };
    let a = a.reshape((n * c, h, w))?;
    let b = b.reshape((n * c, h, w))?;
    let l = params.dynamic_range;
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let mu_a = blur(&a)?;
    let mu_b = blur(&b)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (blur(&a.sqr()?)? - &mu_a2)?;
    let var_b = (blur(&b.sqr()?)? - &mu_b2)?;
    let cov = (blur(&(&a * &b)?)? - &mu_ab)?;
    let num = ((mu_ab * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_a2 + mu_b2)? + c1)?.mul(&((var_a + var_b)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Unit-calibrated perceptual distance: channel-normalize each tap's
/// features, take squared differences summed over channels, average over
/// space and batch, then sum over the five taps.
pub fn lpips_distance(a: &Tensor, b: &Tensor, backbone: &Backbone) -> Result<Tensor> {
    check_same_shape(a, b, "lpips_distance")?;
    let dtype = a.dtype();
    let fa = backbone.features(a)?;
    let fb = backbone.features(b)?;
    let normalize = |f: &Tensor| -> Result<Tensor> {
        let norm = (f.sqr()?.sum_keepdim(1)? + FEATURE_EPS)?.sqrt()?;
        Ok(f.broadcast_div(&norm)?)
    };
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (normalize(x)? - normalize(y)?)?.sqr()?.sum(1)?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    let total = total.ok_or_else(|| contract!("backbone produced no taps"))?;
    Ok(total.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownKind {
    Latent,
    Image,
    Total,
}

/// Unweighted loss terms plus the weighted total.
///
/// Term names are `<group>.<metric>`. Image groups are the view scales
/// (`orig`, `at1`, `at2`); latent groups start with `latent`. Metrics are
/// `kl`, `mse`, `cos`, `lpips` and `ssim_loss` (= 1 - SSIM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kind: BreakdownKind,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LossBreakdown {
    fn group_value(&self, group: &str, w: &LossWeights) -> f64 {
        let get = |m: &str| self.terms.get(&format!("{group}.{m}")).copied().unwrap_or(0.0);
        get("kl") + w.alpha * get("mse") + w.beta * get("cos") + w.gamma * get("lpips") + w.delta * get("ssim_loss")
    }

    fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .terms
            .keys()
            .filter_map(|k| k.rsplit_once('.').map(|(g, _)| g.to_string()))
            .collect();
        g.dedup();
        g
    }

    /// Total recomputed from the recorded terms under `w`.
    pub fn recompute(&self, w: &LossWeights) -> f64 {
        let mut image = 0.0;
        let mut latent = 0.0;
        for g in self.groups() {
            let v = self.group_value(&g, w);
            match g.as_str() {
                "orig" => image += v,
                "at1" => image += w.mu1 * v,
                "at2" => image += w.mu2 * v,
                _ => latent += v,
            }
        }
        match self.kind {
            BreakdownKind::Latent => latent,
            BreakdownKind::Image => image,
            BreakdownKind::Total => image + w.epsilon * latent,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// A differentiable loss value together with its breakdown.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: Tensor,
    pub breakdown: LossBreakdown,
}

fn record(terms: &mut BTreeMap<String, f64>, name: String, t: &Tensor) -> Result<()> {
    terms.insert(name, scalar(t)?);
    Ok(())
}

/// KL + α·MSE + β·COS between one latent pair, under group name `group`.
pub fn latent_loss_group(
    group: &str,
    w: &Tensor,
    w_hat: &Tensor,
    cfg: &LossConfig,
) -> Result<Loss> {
    check_same_shape(w, w_hat, "latent_loss")?;
    let wts = &cfg.weights;
    let kl = kl_softmax_loss(w, w_hat)?;
    let mse = mse_loss(w, w_hat, cfg.mse_mode)?;
    let cos = cos_loss(w, w_hat)?;
    let value = ((&kl + (&mse * wts.alpha)?)? + (&cos * wts.beta)?)?;
    let mut terms = BTreeMap::new();
    record(&mut terms, format!("{group}.kl"), &kl)?;
    record(&mut terms, format!("{group}.mse"), &mse)?;
    record(&mut terms, format!("{group}.cos"), &cos)?;
    let mut warnings = Vec::new();
    let degenerate = zero_norm_samples(w, w_hat)?;
    if degenerate > 0 {
        let msg = format!("{group}: {degenerate} zero-norm sample(s), cosine term set to 1");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Loss {
        breakdown: LossBreakdown {
            kind: BreakdownKind::Latent,
            terms,
            total: scalar(&value)?,
            warnings,
        },
        value,
    })
}

/// Latent similarity loss between style latents `w` and their imitation.
pub fn latent_loss(w: &Tensor, w_hat: &Tensor, cfg: &LossConfig) -> Result<Loss> {
    latent_loss_group("latent", w, w_hat, cfg)
}

/// Sums several losses of the same kind into one.
pub fn merge_losses(parts: Vec<Loss>) -> Result<Loss> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().ok_or_else(|| contract!("merge_losses: nothing to merge"))?;
    for p in iter {
        if p.breakdown.kind != acc.breakdown.kind {
            return Err(contract!("merge_losses: mixed breakdown kinds"));
        }
        acc.value = (acc.value + p.value)?;
        acc.breakdown.terms.extend(p.breakdown.terms);
        acc.breakdown.warnings.extend(p.breakdown.warnings);
    }
    acc.breakdown.total = scalar(&acc.value)?;
    Ok(acc)
}

/// Per-scale image loss: KL + α·MSE + β·COS + γ·LPIPS + δ·(1 - SSIM).
fn scale_loss(
    group: &str,
    x: &Tensor,
    x_hat: &Tensor,
    cfg: &LossConfig,
    backbone: &Backbone,
    terms: &mut BTreeMap<String, f64>,
    warnings: &mut Vec<String>,
) -> Result<Tensor> {
    check_same_shape(x, x_hat, "image_loss")?;
    let wts = &cfg.weights;
    let kl = kl_softmax_images(x, x_hat)?;
    let mse = mse_loss(x, x_hat, cfg.mse_mode)?;
    let cos = cos_loss(x, x_hat)?;
    let lpips = lpips_distance(x, x_hat, backbone)?;
    let ssim_loss = (1.0 - ssim(x, x_hat, &cfg.ssim)?)?;
    let value = ((((&kl + (&mse * wts.alpha)?)? + (&cos * wts.beta)?)? + (&lpips * wts.gamma)?)?
        + (&ssim_loss * wts.delta)?)?;
    record(terms, format!("{group}.kl"), &kl)?;
    record(terms, format!("{group}.mse"), &mse)?;
    record(terms, format!("{group}.cos"), &cos)?;
    record(terms, format!("{group}.lpips"), &lpips)?;
    record(terms, format!("{group}.ssim_loss"), &ssim_loss)?;
    let degenerate = zero_norm_samples(x, x_hat)?;
    if degenerate > 0 {
        let msg = format!("{group}: {degenerate} zero-norm image(s), cosine term set to 1");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(value)
}

/// Three-scale image loss: `orig + μ1·at1 + μ2·at2`. Scales whose weight is
/// zero are skipped entirely; a missing view with nonzero weight is a
/// contract violation.
pub fn image_loss(
    views: &TripleScaleViews,
    views_hat: &TripleScaleViews,
    cfg: &LossConfig,
    backbone: &Backbone,
) -> Result<Loss> {
    let wts = &cfg.weights;
    let mut terms = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut value = scale_loss("orig", &views.orig, &views_hat.orig, cfg, backbone, &mut terms, &mut warnings)?;
    let extra = [
        ("at1", wts.mu1, &views.at1, &views_hat.at1),
        ("at2", wts.mu2, &views.at2, &views_hat.at2),
    ];
    for (group, mu, v, v_hat) in extra {
        if mu == 0.0 {
            continue;
        }
        let (v, v_hat) = match (v, v_hat) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(contract!(
                    "image_loss: view {group} is missing but its weight is {mu}"
                ))
            }
        };
        let s = scale_loss(group, v, v_hat, cfg, backbone, &mut terms, &mut warnings)?;
        value = (value + (s * mu)?)?;
    }
    warnings.extend(views.warnings.iter().cloned());
    warnings.extend(views_hat.warnings.iter().cloned());
    Ok(Loss {
        breakdown: LossBreakdown {
            kind: BreakdownKind::Image,
            terms,
            total: scalar(&value)?,
            warnings,
        },
        value,
    })
}

/// `L_IMG + ε·L_LV`, with both breakdowns merged.
pub fn total_loss(image_part: &Loss, latent_part: &Loss, weights: &LossWeights) -> Result<Loss> {
    if image_part.breakdown.kind != BreakdownKind::Image
        || latent_part.breakdown.kind != BreakdownKind::Latent
    {
        return Err(contract!("total_loss expects an image part and a latent part"));
    }
    let value = (&image_part.value + (&latent_part.value * weights.epsilon)?)?;
    let mut terms = image_part.breakdown.terms.clone();
    terms.extend(latent_part.breakdown.terms.clone());
    let mut warnings = image_part.breakdown.warnings.clone();
    warnings.extend(latent_part.breakdown.warnings.iter().cloned());
    Ok(Loss {
        breakdown: LossBreakdown {
            kind: BreakdownKind::Total,
            terms,
            total: scalar(&value)?,
            warnings,
        },
        value,
    })
}
