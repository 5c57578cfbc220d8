//! Frozen decoders in three families, plus the style mapping network.
//!
//! The style family is StyleGAN1-like: a learned 4×4 constant, then per
//! resolution an upsample and two 3×3 convolutions, each followed by
//! per-channel noise, leaky ReLU, instance norm and a style modulation
//! computed from one slice of `w`. The progressive family keeps the trunk but
//! feeds `z` through a linear projection to 4×4 and uses pixel norm. The
//! class-conditional family uses conditional batch norm driven by a label
//! embedding `c`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config_err, contract, DseError, Result};
use crate::latent::{Family, LatentBundle};
use crate::layers::{instance_norm, leaky_relu, modulate, pixel_norm, BatchStats, EqualConv2d, EqualLinear};
use crate::params::{Init, ParamStore};

const SQRT2: f64 = std::f64::consts::SQRT_2;
/// Gain of the style affine layers; keeps a random generator's modulation
/// close to the identity so images vary smoothly with `w`.
const STYLE_GAIN: f64 = 0.3;
/// Gain of the output projection; keeps most pixels off the tanh plateau.
const RGB_GAIN: f64 = 0.5;

/// Declarative description of a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub resolution: usize,
    /// Channels of each block, from 4×4 up to the output resolution.
    pub channel_schedule: Vec<usize>,
    /// Style width.
    pub d_w: usize,
    /// Input latent width.
    pub d_z: usize,
    /// Label-embedding width (class-conditional only).
    #[serde(default)]
    pub d_c: usize,
    #[serde(default)]
    pub n_classes: usize,
    /// Fully connected layers in the mapping network (style only).
    #[serde(default)]
    pub mapping_layers: usize,
    /// Initial value of the per-channel noise weights.
    #[serde(default)]
    pub noise_strength: f64,
}

/// Channel rule shared by every full-scale table column: 512 up to 32×32,
/// halving with each doubling of resolution after that.
pub fn full_scale_channels(resolution: usize) -> usize {
    (16384 / resolution).min(512)
}

/// Channel rule for CPU-sized networks.
pub fn desk_channels(resolution: usize) -> usize {
    (512 / resolution).clamp(8, 64)
}

pub fn log2_exact(v: usize) -> Option<usize> {
    (v.is_power_of_two() && v > 0).then(|| v.trailing_zeros() as usize)
}

impl GeneratorSpec {
    fn with_schedule(family: Family, resolution: usize, channel: impl Fn(usize) -> usize) -> Self {
        let blocks = log2_exact(resolution).map(|l| l.saturating_sub(1)).unwrap_or(0);
        let channel_schedule = (0..blocks).map(|i| channel(4 << i)).collect();
        Self {
            family,
            resolution,
            channel_schedule,
            d_w: 0,
            d_z: 0,
            d_c: 0,
            n_classes: 0,
            mapping_layers: 0,
            noise_strength: 0.0,
        }
    }

    /// Full-size spec matching the published architecture tables.
    pub fn full_scale(family: Family, resolution: usize) -> Self {
        let mut s = Self::with_schedule(family, resolution, full_scale_channels);
        match family {
            Family::Style => {
                s.d_w = 512;
                s.d_z = 512;
                s.mapping_layers = 8;
                s.noise_strength = 0.1;
            }
            Family::Progressive => s.d_z = 512,
            Family::ClassConditional => {
                s.d_z = 128;
                s.d_c = 256;
                s.n_classes = 1000;
            }
        }
        s
    }

    /// Small spec that trains on a CPU in minutes.
    pub fn desk(family: Family, resolution: usize) -> Self {
        let mut s = Self::with_schedule(family, resolution, desk_channels);
        match family {
            Family::Style => {
                s.d_w = 64;
                s.d_z = 64;
                s.mapping_layers = 4;
                s.noise_strength = 0.1;
            }
            Family::Progressive => s.d_z = 64,
            Family::ClassConditional => {
                s.d_z = 32;
                s.d_c = 64;
                s.n_classes = 10;
            }
        }
        s
    }

    pub fn n_blocks(&self) -> usize {
        self.channel_schedule.len()
    }

    /// Style taps: two per block.
    pub fn n_layers(&self) -> usize {
        2 * self.n_blocks()
    }

    /// Channel count of each style layer.
    pub fn layer_channels(&self) -> Vec<usize> {
        self.channel_schedule.iter().flat_map(|&c| [c, c]).collect()
    }

    /// Channels of the 4×4 input tensor.
    pub fn const_channels(&self) -> usize {
        self.channel_schedule.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let log = log2_exact(self.resolution)
            .filter(|&l| l >= 4)
            .ok_or_else(|| config_err!("unsupported resolution {}: must be a power of two >= 16", self.resolution))?;
        if self.channel_schedule.len() != log - 1 {
            return Err(config_err!(
                "channel schedule has {} entries, resolution {} needs {}",
                self.channel_schedule.len(),
                self.resolution,
                log - 1
            ));
        }
        if self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(config_err!("channel schedule entries must be positive"));
        }
        if self.d_z == 0 {
            return Err(config_err!("d_z must be positive"));
        }
        match self.family {
            Family::Style if self.d_w == 0 || self.mapping_layers == 0 => {
                Err(config_err!("style generators need positive d_w and mapping_layers"))
            }
            Family::ClassConditional if self.d_c == 0 || self.n_classes == 0 => {
                Err(config_err!("class-conditional generators need positive d_c and n_classes"))
            }
            _ => Ok(()),
        }
    }
}

/// Stack of fully connected layers turning gaussian `z` into a style vector
/// broadcast to every style tap.
pub struct MappingNetwork {
    layers: Vec<EqualLinear>,
    n_layers: usize,
    d_z: usize,
}

impl MappingNetwork {
    fn new(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = spec.d_z;
        for i in 0..spec.mapping_layers {
            layers.push(EqualLinear::new(store, &format!("mapping.{i}"), width, spec.d_w, SQRT2, 0.0)?);
            width = spec.d_w;
        }
        Ok(Self {
            layers,
            n_layers: spec.n_layers(),
            d_z: spec.d_z,
        })
    }

    /// `(n, d_z)` → `(n, n_layers, d_w)`, identical across taps.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2().map_err(|_| contract!("mapping expects (n, d_z), got {:?}", z.dims()))?;
        if d != self.d_z {
            return Err(contract!("mapping expects width {}, got {d}", self.d_z));
        }
        let mut h = z.unsqueeze(2)?.unsqueeze(3)?;
        h = pixel_norm(&h)?.squeeze(3)?.squeeze(2)?;
        for layer in &self.layers {
            h = leaky_relu(&layer.forward(&h)?)?;
        }
        let d_w = h.dim(1)?;
        Ok(h.unsqueeze(1)?.broadcast_as((n, self.n_layers, d_w))?.contiguous()?)
    }
}

struct StyledConv {
    conv: Option<EqualConv2d>,
    upsample: bool,
    style: EqualLinear,
    noise_weight: Tensor,
    noise_pattern: Tensor,
    channels: usize,
}

impl StyledConv {
    fn forward(&self, x: &Tensor, w: &Tensor, z_n: Option<&Tensor>) -> Result<Tensor> {
        let mut h = x.clone();
        if self.upsample {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        }
        if let Some(conv) = &self.conv {
            h = conv.forward(&h)?;
        }
        if let Some(z_n) = z_n {
            let n = z_n.dim(0)?;
            let amp = z_n.broadcast_mul(&self.noise_weight)?.reshape((n, self.channels, 1, 1))?;
            h = h.broadcast_add(&amp.broadcast_mul(&self.noise_pattern)?)?;
        }
        h = instance_norm(&leaky_relu(&h)?)?;
        modulate(&h, &self.style.forward(w)?)
    }
}

struct StyleSynthesis {
    constant: Tensor,
    layers: Vec<StyledConv>,
    to_rgb: EqualConv2d,
}

struct PlainConv {
    conv: EqualConv2d,
    upsample: bool,
}

impl PlainConv {
    fn conv(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if self.upsample {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        }
        self.conv.forward(&h)
    }
}

struct ProgressiveSynthesis {
    project: EqualLinear,
    layers: Vec<PlainConv>,
    to_rgb: EqualConv2d,
}

struct ConditionalLayer {
    conv: PlainConv,
    stats: BatchStats,
    affine: EqualLinear,
}

struct ConditionalSynthesis {
    embed: EqualLinear,
    project: EqualLinear,
    input_stats: BatchStats,
    input_affine: EqualLinear,
    layers: Vec<ConditionalLayer>,
    to_rgb: EqualConv2d,
}

enum Synthesis {
    Style {
        mapping: MappingNetwork,
        net: StyleSynthesis,
    },
    Progressive(ProgressiveSynthesis),
    Conditional(ConditionalSynthesis),
}

/// Output of [`Generator::synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesized {
    /// `(n, 3, R, R)` in [-1, 1].
    pub image: Tensor,
    /// The 4×4 input actually used (style family only).
    pub z_c: Option<Tensor>,
}

/// A frozen generator. Parameters never receive gradients; gradients do flow
/// through it to whatever produced its latent inputs.
pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    synthesis: Synthesis,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator").field("spec", &self.spec).finish()
    }
}

fn build_style(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Synthesis> {
    let mapping = MappingNetwork::new(store, spec)?;
    let c0 = spec.const_channels();
    let constant = store.get("synthesis.const", &[1, c0, 4, 4], Init::Normal(1.0))?;
    let mut layers = Vec::new();
    let mut prev = c0;
    for (b, &c) in spec.channel_schedule.iter().enumerate() {
        let res = 4usize << b;
        for j in 0..2 {
            let l = 2 * b + j;
            let name = format!("synthesis.layers.{l}");
            let conv = if l == 0 {
                None
            } else {
                Some(EqualConv2d::new(store, &format!("{name}.conv"), prev, c, 3, 1, SQRT2)?)
            };
            let style = EqualLinear::new(store, &format!("{name}.style"), spec.d_w, 2 * c, STYLE_GAIN, 0.0)?;
            let noise_weight = store.get(&format!("{name}.noise_weight"), &[c], Init::Const(spec.noise_strength))?;
            let noise_pattern = store.get(&format!("{name}.noise_pattern"), &[1, 1, res, res], Init::Normal(1.0))?;
            layers.push(StyledConv {
                conv,
                upsample: j == 0 && b > 0,
                style,
                noise_weight,
                noise_pattern,
                channels: c,
            });
            prev = c;
        }
    }
    let to_rgb = EqualConv2d::new(store, "synthesis.to_rgb", prev, 3, 1, 1, RGB_GAIN)?;
    Ok(Synthesis::Style {
        mapping,
        net: StyleSynthesis {
            constant,
            layers,
            to_rgb,
        },
    })
}

fn plain_layers(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Vec<PlainConv>> {
    let mut layers = Vec::new();
    let mut prev = spec.const_channels();
    for (b, &c) in spec.channel_schedule.iter().enumerate() {
        for j in 0..2 {
            let l = 2 * b + j;
            layers.push(PlainConv {
                conv: EqualConv2d::new(store, &format!("synthesis.layers.{l}.conv"), prev, c, 3, 1, SQRT2)?,
                upsample: j == 0 && b > 0,
            });
            prev = c;
        }
    }
    Ok(layers)
}

fn build_progressive(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Synthesis> {
    let c0 = spec.const_channels();
    let project = EqualLinear::new(store, "synthesis.project", spec.d_z, c0 * 16, SQRT2 / 4.0, 0.0)?;
    let layers = plain_layers(store, spec)?;
    let last = *spec.channel_schedule.last().unwrap_or(&c0);
    let to_rgb = EqualConv2d::new(store, "synthesis.to_rgb", last, 3, 1, 1, 1.0)?;
    Ok(Synthesis::Progressive(ProgressiveSynthesis { project, layers, to_rgb }))
}

fn build_conditional(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Synthesis> {
    let c0 = spec.const_channels();
    let embed = EqualLinear::new(store, "embed", spec.n_classes, spec.d_c, 1.0, 0.0)?;
    let project = EqualLinear::new(store, "synthesis.project", spec.d_z, c0 * 16, SQRT2 / 4.0, 0.0)?;
    let input_stats = BatchStats::new(store, "synthesis.input_norm", c0)?;
    let input_affine = EqualLinear::new(store, "synthesis.input_affine", spec.d_c, 2 * c0, 1.0, 0.0)?;
    let mut layers = Vec::new();
    for (l, conv) in plain_layers(store, spec)?.into_iter().enumerate() {
        let c = conv.conv.shape().1;
        layers.push(ConditionalLayer {
            stats: BatchStats::new(store, &format!("synthesis.layers.{l}.norm"), c)?,
            affine: EqualLinear::new(store, &format!("synthesis.layers.{l}.affine"), spec.d_c, 2 * c, 1.0, 0.0)?,
            conv,
        });
    }
    let last = *spec.channel_schedule.last().unwrap_or(&c0);
    let to_rgb = EqualConv2d::new(store, "synthesis.to_rgb", last, 3, 1, 1, 1.0)?;
    Ok(Synthesis::Conditional(ConditionalSynthesis {
        embed,
        project,
        input_stats,
        input_affine,
        layers,
        to_rgb,
    }))
}

impl ConditionalSynthesis {
    fn forward(&self, z: &Tensor, c: &Tensor, calibrate: bool) -> Result<Tensor> {
        let n = z.dim(0)?;
        let c0 = self.input_stats_channels()?;
        let mut h = self.project.forward(z)?.reshape((n, c0, 4, 4))?;
        if calibrate {
            self.input_stats.calibrate(&h)?;
        }
        h = modulate(&self.input_stats.forward(&h, false)?, &self.input_affine.forward(c)?)?;
        for layer in &self.layers {
            h = layer.conv.conv(&h)?;
            if calibrate {
                layer.stats.calibrate(&h)?;
            }
            h = layer.stats.forward(&h, false)?;
            h = leaky_relu(&modulate(&h, &layer.affine.forward(c)?)?)?;
        }
        Ok(self.to_rgb.forward(&h)?.tanh()?)
    }

    fn input_stats_channels(&self) -> Result<usize> {
        Ok(self.input_affine.dims().1 / 2)
    }
}

impl Generator {
    fn assemble(spec: GeneratorSpec, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let synthesis = match spec.family {
            Family::Style => build_style(&mut store, &spec)?,
            Family::Progressive => build_progressive(&mut store, &spec)?,
            Family::ClassConditional => build_conditional(&mut store, &spec)?,
        };
        Ok(Self { spec, store, synthesis })
    }

    /// Deterministic toy generator. Weights come from `seed`; the
    /// class-conditional family also calibrates its normalization statistics
    /// on a seeded batch.
    pub fn toy(spec: GeneratorSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::seeded(seed, dtype, false);
        let gen = Self::assemble(spec, store)?;
        if let Synthesis::Conditional(net) = &gen.synthesis {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let n = 64;
            let z = gaussian(&mut rng, &[n, gen.spec.d_z], dtype)?;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..gen.spec.n_classes)).collect();
            let c = gen.embed_labels(&labels)?;
            net.forward(&z, &c, true)?;
        }
        Ok(gen)
    }

    /// Loads a checkpoint directory written by [`Generator::save`].
    pub fn load_pretrained(dir: &Path, family: Family, dtype: DType) -> Result<Self> {
        let (manifest, params) = checkpoint::load_manifest::<GeneratorSpec>(dir, "generator", family)?;
        let store = ParamStore::load(&params, dtype, false)?;
        Self::assemble(manifest.spec, store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, "generator", self.spec.family, &self.spec, &self.store)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// `w = M(z)`.
    pub fn mapping(&self, z: &Tensor) -> Result<Tensor> {
        match &self.synthesis {
            Synthesis::Style { mapping, .. } => mapping.forward(z),
            _ => Err(contract!("{} generators have no mapping network", self.spec.family)),
        }
    }

    /// Label embedding `c` for integer class labels.
    pub fn embed_labels(&self, labels: &[usize]) -> Result<Tensor> {
        let Synthesis::Conditional(net) = &self.synthesis else {
            return Err(contract!("{} generators take no labels", self.spec.family));
        };
        let k = self.spec.n_classes;
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract!("label {bad} out of range for {k} classes"));
        }
        let onehot = one_hot(labels, k, self.dtype())?;
        net.embed.forward(&onehot)
    }

    /// The learned 4×4 constant, broadcast to a batch of `n`.
    pub fn constant_input(&self, n: usize) -> Result<Tensor> {
        match &self.synthesis {
            Synthesis::Style { net, .. } => {
                let (_, c, h, w) = net.constant.dims4()?;
                Ok(net.constant.broadcast_as((n, c, h, w))?.contiguous()?)
            }
            _ => Err(contract!("{} generators have no constant input", self.spec.family)),
        }
    }

    fn check_dims(&self, t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
        if t.dims() != expected {
            return Err(contract!(
                "{what} has shape {:?}, expected {expected:?}",
                t.dims()
            ));
        }
        Ok(())
    }

    /// Renders images from latents.
    pub fn synthesize(&self, latents: &LatentBundle) -> Result<Synthesized> {
        let n = latents.batch_size()?;
        let spec = &self.spec;
        match (&self.synthesis, latents) {
            (Synthesis::Style { net, .. }, LatentBundle::Style { w, z_c, z_n }) => {
                self.check_dims(w, &[n, spec.n_layers(), spec.d_w], "w")?;
                let z_c = match z_c {
                    Some(t) => {
                        self.check_dims(t, &[n, spec.const_channels(), 4, 4], "z_c")?;
                        t.clone()
                    }
                    None => self.constant_input(n)?,
                };
                if let Some(z_n) = z_n {
                    let chans = spec.layer_channels();
                    if z_n.len() != chans.len() {
                        return Err(contract!("z_n has {} layers, expected {}", z_n.len(), chans.len()));
                    }
                    for (t, &c) in z_n.iter().zip(&chans) {
                        self.check_dims(t, &[n, c], "z_n layer")?;
                    }
                }
                let mut h = z_c.clone();
                for (l, layer) in net.layers.iter().enumerate() {
                    let wl = w.narrow(1, l, 1)?.squeeze(1)?;
                    h = layer.forward(&h, &wl, z_n.as_ref().map(|v| &v[l]))?;
                }
                Ok(Synthesized {
                    image: net.to_rgb.forward(&h)?.tanh()?,
                    z_c: Some(z_c),
                })
            }
            (Synthesis::Progressive(net), LatentBundle::Progressive { z }) => {
                self.check_dims(z, &[n, spec.d_z], "z")?;
                let c0 = spec.const_channels();
                let mut h = net.project.forward(&pixel_norm_vec(z)?)?.reshape((n, c0, 4, 4))?;
                h = pixel_norm(&leaky_relu(&h)?)?;
                for layer in &net.layers {
                    h = pixel_norm(&leaky_relu(&layer.conv(&h)?)?)?;
                }
                Ok(Synthesized {
                    image: net.to_rgb.forward(&h)?.tanh()?,
                    z_c: None,
                })
            }
            (Synthesis::Conditional(net), LatentBundle::ClassConditional { z, c }) => {
                self.check_dims(z, &[n, spec.d_z], "z")?;
                self.check_dims(c, &[n, spec.d_c], "c")?;
                Ok(Synthesized {
                    image: net.forward(z, c, false)?,
                    z_c: None,
                })
            }
            (_, other) => Err(contract!(
                "{} generator cannot consume {} latents",
                spec.family,
                other.family()
            )),
        }
    }

    /// Draws a batch of latents from the generator's prior. Returns the
    /// latents, the gaussian `z` they came from and, for the class-conditional
    /// family, the labels.
    pub fn sample_latents(&self, n: usize, rng: &mut impl Rng) -> Result<(LatentBundle, Tensor, Vec<usize>)> {
        let z = gaussian(rng, &[n, self.spec.d_z], self.dtype())?;
        match self.spec.family {
            Family::Style => {
                let w = self.mapping(&z)?;
                Ok((LatentBundle::Style { w, z_c: None, z_n: None }, z, Vec::new()))
            }
            Family::Progressive => Ok((LatentBundle::Progressive { z: z.clone() }, z, Vec::new())),
            Family::ClassConditional => {
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.spec.n_classes)).collect();
                let c = self.embed_labels(&labels)?;
                Ok((LatentBundle::ClassConditional { z: z.clone(), c }, z, labels))
            }
        }
    }

    /// Gaussian per-layer noise latents for the style family.
    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        if self.spec.family != Family::Style {
            return Err(contract!("{} generators take no noise latents", self.spec.family));
        }
        self.spec
            .layer_channels()
            .iter()
            .map(|&c| gaussian(rng, &[n, c], self.dtype()))
            .collect()
    }
}

fn pixel_norm_vec(z: &Tensor) -> Result<Tensor> {
    let ms = z.sqr()?.mean_keepdim(1)?;
    Ok(z.broadcast_div(&(ms + 1e-8)?.sqrt()?)?)
}

pub fn one_hot(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(DseError::Contract(format!("label {l} out of range for {k} classes")));
        }
        v[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::to_f64_vec;

    #[test]
    fn style_tap_counts() {
        assert_eq!(GeneratorSpec::desk(Family::Style, 32).n_layers(), 8);
        assert_eq!(GeneratorSpec::full_scale(Family::Style, 1024).n_layers(), 18);
        assert_eq!(GeneratorSpec::full_scale(Family::Style, 256).n_layers(), 14);
    }

    #[test]
    fn full_scale_schedule_for_1024() {
        let s = GeneratorSpec::full_scale(Family::Style, 1024);
        assert_eq!(s.channel_schedule, vec![512, 512, 512, 512, 256, 128, 64, 32, 16]);
        assert_eq!(s.const_channels(), 512);
    }

    #[test]
    fn unsupported_resolution_is_a_config_error() {
        for res in [8, 48, 0] {
            let mut s = GeneratorSpec::desk(Family::Style, 32);
            s.resolution = res;
            assert!(matches!(Generator::toy(s, 0, DType::F32), Err(DseError::Config(_))));
        }
        let mut s = GeneratorSpec::desk(Family::Style, 32);
        s.channel_schedule.pop();
        assert!(matches!(s.validate(), Err(DseError::Config(_))));
    }

    #[test]
    fn mapping_broadcasts_one_vector_to_all_taps() {
        let g = Generator::toy(GeneratorSpec::desk(Family::Style, 16), 1, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = gaussian(&mut rng, &[2, 64], DType::F32).unwrap();
        let w = g.mapping(&z).unwrap();
        assert_eq!(w.dims(), &[2, 6, 64]);
        let first = to_f64_vec(&w.narrow(1, 0, 1).unwrap()).unwrap();
        for l in 1..6 {
            assert_eq!(first, to_f64_vec(&w.narrow(1, l, 1).unwrap()).unwrap());
        }
        let bad = gaussian(&mut rng, &[2, 63], DType::F32).unwrap();
        assert!(matches!(g.mapping(&bad), Err(DseError::Contract(_))));
    }

    #[test]
    fn every_family_renders_bounded_images() {
        for family in [Family::Style, Family::Progressive, Family::ClassConditional] {
            let g = Generator::toy(GeneratorSpec::desk(family, 16), 2, DType::F32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (lat, _, _) = g.sample_latents(3, &mut rng).unwrap();
            let img = g.synthesize(&lat).unwrap().image;
            assert_eq!(img.dims(), &[3, 3, 16, 16]);
            assert!(to_f64_vec(&img).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn wrong_family_latents_are_rejected() {
        let g = Generator::toy(GeneratorSpec::desk(Family::Progressive, 16), 2, DType::F32).unwrap();
        let w = Tensor::zeros((1, 6, 64), DType::F32, &Device::Cpu).unwrap();
        let lat = LatentBundle::Style { w, z_c: None, z_n: None };
        assert!(matches!(g.synthesize(&lat), Err(DseError::Contract(_))));
    }
}
