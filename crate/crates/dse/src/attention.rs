//! Three-scale views of an image batch: the original plus two attention
//! views, all at the input resolution.
//!
//! Centre-aligned imagery uses fixed centred crops. Misaligned imagery uses
//! gradient-weighted class activation maps from the backbone: the first view
//! is the heat map rendered through a fixed colormap, the second is the
//! bounding box of the hot region cropped from the image.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{contract, Result};
use crate::layers::{crop_resize, to_f64_vec, CropBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Centre,
    Gradcam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Side of the first centred crop as a fraction of the frame.
    pub crop_frac_at1: f64,
    /// Side of the second centred crop; never larger than the first.
    pub crop_frac_at2: f64,
    /// Backbone tap whose activations drive the heat map.
    pub tap_layer: usize,
    /// Fraction of the heat maximum that marks a pixel as hot.
    pub heat_threshold: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Centre,
            crop_frac_at1: 0.625,
            crop_frac_at2: 0.375,
            tap_layer: 4,
            heat_threshold: 0.5,
        }
    }
}

impl AttentionConfig {
    pub fn gradcam() -> Self {
        Self {
            mode: AttentionMode::Gradcam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |f: f64| f > 0.0 && f <= 1.0;
        if !in_unit(self.crop_frac_at1) || !in_unit(self.crop_frac_at2) {
            return Err(contract!(
                "crop fractions must lie in (0, 1], got ({}, {})",
                self.crop_frac_at1,
                self.crop_frac_at2
            ));
        }
        if self.crop_frac_at2 > self.crop_frac_at1 {
            return Err(contract!(
                "crop_frac_at2 ({}) must not exceed crop_frac_at1 ({})",
                self.crop_frac_at2,
                self.crop_frac_at1
            ));
        }
        if !(self.heat_threshold > 0.0 && self.heat_threshold < 1.0) {
            return Err(contract!(
                "heat_threshold must lie in (0, 1), got {}",
                self.heat_threshold
            ));
        }
        Ok(())
    }
}

/// Original image plus its two attention views.
#[derive(Debug, Clone)]
pub struct TripleScaleViews {
    pub orig: Tensor,
    pub at1: Option<Tensor>,
    pub at2: Option<Tensor>,
    /// Fallbacks taken while building the views.
    pub warnings: Vec<String>,
}

impl TripleScaleViews {
    pub fn single(orig: Tensor) -> Self {
        Self {
            orig,
            at1: None,
            at2: None,
            warnings: Vec::new(),
        }
    }

    /// Same views with every tensor cut off from the gradient tape.
    pub fn detached(&self) -> Self {
        Self {
            orig: self.orig.detach(),
            at1: self.at1.as_ref().map(Tensor::detach),
            at2: self.at2.as_ref().map(Tensor::detach),
            warnings: self.warnings.clone(),
        }
    }
}

fn square_side(img: &Tensor) -> Result<usize> {
    let (_, c, h, w) = img
        .dims4()
        .map_err(|_| contract!("expected an (n, c, h, w) image batch, got {:?}", img.dims()))?;
    if h != w {
        return Err(contract!("attention views need square images, got {h}x{w}"));
    }
    if c != 3 {
        return Err(contract!("attention views need RGB images, got {c} channels"));
    }
    Ok(h)
}

/// Source boxes of the two centred views.
pub fn centre_boxes(side: usize, cfg: &AttentionConfig) -> (CropBox, CropBox) {
    (
        CropBox::centred(side, cfg.crop_frac_at1),
        CropBox::centred(side, cfg.crop_frac_at2),
    )
}

/// Centred crops resized back to the input resolution. Linear in the pixels,
/// so gradients flow through all three views.
pub fn centre_views(img: &Tensor, cfg: &AttentionConfig) -> Result<TripleScaleViews> {
    cfg.validate()?;
    let side = square_side(img)?;
    let (b1, b2) = centre_boxes(side, cfg);
    Ok(TripleScaleViews {
        orig: img.clone(),
        at1: Some(crop_resize(img, b1, side, side)?),
        at2: Some(crop_resize(img, b2, side, side)?),
        warnings: Vec::new(),
    })
}

/// ReLU of the gradient-weighted activation sum, divided by its per-sample
/// maximum. `acts` and `grads` are `(n, k, h, w)`; the result is `(n, 1, h, w)`
/// in [0, 1]. An all-zero map stays zero.
pub fn gradcam_from_parts(acts: &Tensor, grads: &Tensor) -> Result<Tensor> {
    if acts.dims() != grads.dims() || acts.rank() != 4 {
        return Err(contract!(
            "grad-cam parts must share an (n, k, h, w) shape, got {:?} and {:?}",
            acts.dims(),
            grads.dims()
        ));
    }
    let (n, _, h, w) = acts.dims4()?;
    let alpha = grads.mean_keepdim(3)?.mean_keepdim(2)?;
    let cam = acts.broadcast_mul(&alpha)?.sum_keepdim(1)?.relu()?;
    let values = to_f64_vec(&cam)?;
    let mut out = Vec::with_capacity(values.len());
    for sample in values.chunks(h * w) {
        let max = sample.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            out.extend(sample.iter().map(|v| v / max));
        } else {
            out.extend(std::iter::repeat(0.0).take(sample.len()));
        }
    }
    Ok(Tensor::from_vec(out, (n, 1, h, w), acts.device())?.to_dtype(acts.dtype())?)
}

/// Heat maps plus the class each one explains.
#[derive(Debug, Clone)]
pub struct HeatMaps {
    /// `(n, 1, h_tap, w_tap)`, values in [0, 1].
    pub maps: Tensor,
    pub classes: Vec<usize>,
}

/// Grad-CAM at backbone tap `tap`. Without `classes`, each sample explains its
/// own argmax class. Never touches the caller's gradient tape.
pub fn gradcam_heatmap(
    img: &Tensor,
    backbone: &Backbone,
    tap: usize,
    classes: Option<&[usize]>,
) -> Result<HeatMaps> {
    let n = img.dim(0)?;
    let act = backbone.forward_to(&img.detach(), tap)?.detach();
    let var = Var::from_tensor(&act)?;
    let logits = backbone.forward_from(tap, var.as_tensor())?;
    let n_classes = logits.dim(1)?;
    let classes: Vec<usize> = match classes {
        Some(c) => {
            if c.len() != n || c.iter().any(|&k| k >= n_classes) {
                return Err(contract!(
                    "class indices {c:?} invalid for batch {n} with {n_classes} classes"
                ));
            }
            c.to_vec()
        }
        None => logits
            .argmax(1)?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|k| k as usize)
            .collect(),
    };
    let mut onehot = vec![0.0f64; n * n_classes];
    for (i, &k) in classes.iter().enumerate() {
        onehot[i * n_classes + k] = 1.0;
    }
    let mask = Tensor::from_vec(onehot, (n, n_classes), img.device())?.to_dtype(logits.dtype())?;
    let score = (logits * mask)?.sum_all()?;
    let grads = score.backward()?;
    let g = grads
        .get(var.as_tensor())
        .ok_or_else(|| contract!("backbone tap {tap} received no gradient"))?
        .clone();
    Ok(HeatMaps {
        maps: gradcam_from_parts(&act, &g)?,
        classes,
    })
}

const VIRIDIS: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Colormap lookup for a heat value in [0, 1]; RGB in [0, 1].
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (v.floor() as usize).min(VIRIDIS.len() - 2);
    let t = v - i as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = VIRIDIS[i][c] * (1.0 - t) + VIRIDIS[i + 1][c] * t;
    }
    out
}

/// Renders `(n, 1, s, s)` heat maps as `(n, 3, s, s)` images in [-1, 1].
pub fn render_heat(maps: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = maps.dims4()?;
    let values = to_f64_vec(maps)?;
    let mut out = vec![0.0; n * 3 * h * w];
    for (i, sample) in values.chunks(h * w).enumerate() {
        for (p, &v) in sample.iter().enumerate() {
            let rgb = colormap(v);
            for c in 0..3 {
                out[(i * 3 + c) * h * w + p] = rgb[c] * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(out, (n, 3, h, w), maps.device())?.to_dtype(maps.dtype())?)
}

/// Bounding box of `{heat >= threshold * max}` for one `side`×`side` map, or
/// `None` when the map is all zero.
pub fn hot_box(heat: &[f64], side: usize, threshold: f64) -> Option<CropBox> {
    let max = heat.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return None;
    }
    let cut = threshold * max;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (p, &v) in heat.iter().enumerate() {
        if v >= cut {
            let (r, c) = (p / side, p % side);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    Some(CropBox {
        top: r0 as f64,
        left: c0 as f64,
        height: (r1 - r0 + 1) as f64,
        width: (c1 - c0 + 1) as f64,
    })
}

/// Geometry recovered from heat maps, reusable on a differentiable copy.
#[derive(Debug, Clone)]
pub struct HeatGeometry {
    /// Heat maps upsampled to the image resolution, `(n, 1, s, s)`.
    pub heat: Tensor,
    pub boxes: Vec<CropBox>,
    pub classes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Heat maps and hot boxes of `img` (never differentiated).
pub fn gradcam_geometry(
    img: &Tensor,
    backbone: &Backbone,
    cfg: &AttentionConfig,
    classes: Option<&[usize]>,
) -> Result<HeatGeometry> {
    cfg.validate()?;
    let side = square_side(img)?;
    let hm = gradcam_heatmap(img, backbone, cfg.tap_layer, classes)?;
    let (_, _, th, tw) = hm.maps.dims4()?;
    let heat = crop_resize(&hm.maps, CropBox::full(th, tw), side, side)?.clamp(0.0, 1.0)?;
    let values = to_f64_vec(&heat)?;
    let mut boxes = Vec::new();
    let mut warnings = Vec::new();
    for (i, sample) in values.chunks(side * side).enumerate() {
        match hot_box(sample, side, cfg.heat_threshold) {
            Some(b) => boxes.push(b),
            None => {
                let msg = format!("sample {i}: empty heat map, second view falls back to the full frame");
                log::warn!("{msg}");
                warnings.push(msg);
                boxes.push(CropBox::full(side, side));
            }
        }
    }
    Ok(HeatGeometry {
        heat,
        boxes,
        classes: hm.classes,
        warnings,
    })
}

/// Applies precomputed geometry to `img`. The second view is differentiable
/// in `img`; the first is the rendered heat map and carries no gradient.
pub fn apply_heat_geometry(img: &Tensor, geom: &HeatGeometry) -> Result<TripleScaleViews> {
    let side = square_side(img)?;
    let n = img.dim(0)?;
    if geom.boxes.len() != n {
        return Err(contract!(
            "geometry covers {} samples, batch has {n}",
            geom.boxes.len()
        ));
    }
    let crops = (0..n)
        .map(|i| crop_resize(&img.narrow(0, i, 1)?, geom.boxes[i], side, side))
        .collect::<Result<Vec<_>>>()?;
    let at1 = render_heat(&geom.heat)?.to_dtype(img.dtype())?;
    Ok(TripleScaleViews {
        orig: img.clone(),
        at1: Some(at1),
        at2: Some(Tensor::cat(&crops, 0)?),
        warnings: geom.warnings.clone(),
    })
}

/// Grad-CAM views of one batch.
pub fn gradcam_views(img: &Tensor, backbone: &Backbone, cfg: &AttentionConfig) -> Result<TripleScaleViews> {
    let geom = gradcam_geometry(img, backbone, cfg, None)?;
    apply_heat_geometry(img, &geom)
}

/// Views of a target batch and of its reconstruction.
///
/// For Grad-CAM the reconstruction's heat maps explain the target's classes,
/// and its geometry is computed on a detached copy before being applied to
/// the differentiable reconstruction.
pub fn paired_views(
    x: &Tensor,
    x_hat: &Tensor,
    cfg: &AttentionConfig,
    backbone: &Backbone,
) -> Result<(TripleScaleViews, TripleScaleViews)> {
    match cfg.mode {
        AttentionMode::Centre => Ok((centre_views(x, cfg)?, centre_views(x_hat, cfg)?)),
        AttentionMode::Gradcam => {
            let gx = gradcam_geometry(x, backbone, cfg, None)?;
            let g_hat = gradcam_geometry(&x_hat.detach(), backbone, cfg, Some(&gx.classes))?;
            Ok((apply_heat_geometry(x, &gx)?, apply_heat_geometry(x_hat, &g_hat)?))
        }
    }
}

/// Views of one batch in whichever mode `cfg` selects.
pub fn views(img: &Tensor, cfg: &AttentionConfig, backbone: &Backbone) -> Result<TripleScaleViews> {
    match cfg.mode {
        AttentionMode::Centre => centre_views(img, cfg),
        AttentionMode::Gradcam => gradcam_views(img, backbone, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::error::DseError;
    use candle_core::{DType, Device};

    fn ramp(n: usize, side: usize) -> Tensor {
        // affine in (row, col) per channel
        let mut v = Vec::new();
        for i in 0..n {
            for c in 0..3 {
                for r in 0..side {
                    for col in 0..side {
                        v.push(0.1 * r as f64 - 0.05 * col as f64 + 0.3 * c as f64 + i as f64);
                    }
                }
            }
        }
        Tensor::from_vec(v, (n, 3, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn full_frame_crop_reproduces_the_original() {
        let img = Tensor::randn(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let cfg = AttentionConfig {
            crop_frac_at1: 1.0,
            crop_frac_at2: 1.0,
            ..AttentionConfig::default()
        };
        let v = centre_views(&img, &cfg).unwrap();
        let o = to_f64_vec(&v.orig).unwrap();
        assert_eq!(o, to_f64_vec(v.at1.as_ref().unwrap()).unwrap());
        assert_eq!(o, to_f64_vec(v.at2.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn second_view_is_a_recrop_of_the_first() {
        let side = 32;
        let img = ramp(1, side);
        let cfg = AttentionConfig::default();
        let v = centre_views(&img, &cfg).unwrap();
        let at1 = v.at1.unwrap();
        let recrop = crop_resize(
            &at1,
            CropBox::centred(side, cfg.crop_frac_at2 / cfg.crop_frac_at1),
            side,
            side,
        )
        .unwrap();
        let a = to_f64_vec(&recrop).unwrap();
        let b = to_f64_vec(v.at2.as_ref().unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        let (b1, b2) = centre_boxes(side, &cfg);
        assert!(CropBox::full(side, side).contains(&b1));
        assert!(b1.contains(&b2));
    }

    #[test]
    fn bad_fractions_are_contract_violations() {
        let img = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        for (f1, f2) in [(0.0, 0.0), (1.5, 0.5), (0.5, 0.7)] {
            let cfg = AttentionConfig {
                crop_frac_at1: f1,
                crop_frac_at2: f2,
                ..AttentionConfig::default()
            };
            assert!(matches!(centre_views(&img, &cfg), Err(DseError::Contract(_))));
        }
    }

    #[test]
    fn gradcam_single_map_unit_gradient_is_normalized_relu() {
        let acts = Tensor::new(&[[[[-1.0f64, 2.0], [4.0, 0.5]]]], &Device::Cpu).unwrap();
        let grads = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let m = to_f64_vec(&gradcam_from_parts(&acts, &grads).unwrap()).unwrap();
        assert_eq!(m, vec![0.0, 0.5, 1.0, 0.125]);
    }

    #[test]
    fn gradcam_is_invariant_to_gradient_scale() {
        let acts = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let grads = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let a = to_f64_vec(&gradcam_from_parts(&acts, &grads).unwrap()).unwrap();
        let b = to_f64_vec(&gradcam_from_parts(&acts, &(grads * 7.5).unwrap()).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcam_all_negative_is_all_zero() {
        let acts = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let grads = (Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap() * -1.0).unwrap();
        let m = to_f64_vec(&gradcam_from_parts(&acts, &grads).unwrap()).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_heat_box_is_the_full_frame() {
        let b = hot_box(&[0.7; 16], 4, 0.5).unwrap();
        assert_eq!(b, CropBox::full(4, 4));
        assert!(hot_box(&[0.0; 16], 4, 0.5).is_none());
    }

    #[test]
    fn gradcam_views_are_in_range_and_deterministic() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 3, DType::F32).unwrap();
        let img = Tensor::randn(0f32, 0.5, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let cfg = AttentionConfig::gradcam();
        let a = gradcam_views(&img, &bb, &cfg).unwrap();
        let b = gradcam_views(&img, &bb, &cfg).unwrap();
        let at1 = to_f64_vec(a.at1.as_ref().unwrap()).unwrap();
        assert!(at1.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(at1, to_f64_vec(b.at1.as_ref().unwrap()).unwrap());
        assert_eq!(
            to_f64_vec(a.at2.as_ref().unwrap()).unwrap(),
            to_f64_vec(b.at2.as_ref().unwrap()).unwrap()
        );
    }

    #[test]
    fn bad_tap_is_a_config_error() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 3, DType::F32).unwrap();
        let img = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            gradcam_heatmap(&img, &bb, 11, None),
            Err(DseError::Config(_))
        ));
    }
}
