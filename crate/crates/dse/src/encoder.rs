//! The encoder: residual two-convolution blocks mirroring a generator.
//!
//! Block `k` runs at the generator's block `B-1-k` resolution. Each block has
//! `conv1 (C_k → C_k)` and `conv2 (C_k → C_{k+1})` followed by 2× average
//! pooling (or a stride-2 `conv2` when fused scale is on), plus a bypass that
//! is the identity when shapes match and a 1×1 projection with pooling
//! otherwise. The 4×4 block keeps only `conv1` and is followed by the family
//! tail.
//!
//! Style family: before every convolution a linear layer reads the feature
//! map average-pooled to 4×4 and emits one style slice; the tail FC emits the
//! last, and its output is also added to every other slice so that the heads
//! learn per-layer deviations from a shared style.
//! Slices are mirrored so that the deepest one drives generator layer 0.

use std::cell::Cell;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{config_err, contract, Result};
use crate::generators::{gaussian, one_hot, Generator, GeneratorSpec};
use crate::latent::{Family, LatentBundle};
use crate::layers::{instance_norm, leaky_relu, modulate, BatchStats, EqualConv2d, EqualLinear};
use crate::params::{Init, ParamStore};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Learning-rate multiplier of the style heads, whose large fan-in would
/// otherwise make them the slowest layers to move.
const HEAD_LR_MUL: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Instance,
    ConditionalBatch,
}

/// Declarative description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub family: Family,
    pub resolution: usize,
    /// Block input widths, from the image resolution down to 4×4.
    pub channel_schedule: Vec<usize>,
    pub d_w: usize,
    pub d_z: usize,
    #[serde(default)]
    pub d_c: usize,
    #[serde(default)]
    pub n_classes: usize,
    /// Channels of the generator's 4×4 input (style family `z_c` head).
    pub const_channels: usize,
    pub normalization: Normalization,
    #[serde(default)]
    pub fused_scale: bool,
}

/// One residual block as built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution: usize,
    /// `(in, out, kernel)` of each convolution stage.
    pub convs: Vec<(usize, usize, usize)>,
    pub downsample: bool,
    pub has_style_fc: bool,
    pub has_noise: bool,
    pub normalization: Normalization,
}

impl EncoderSpec {
    /// The encoder paired with `gen`.
    pub fn mirror(gen: &GeneratorSpec, fused_scale: bool) -> Self {
        Self {
            family: gen.family,
            resolution: gen.resolution,
            channel_schedule: gen.channel_schedule.iter().rev().copied().collect(),
            d_w: gen.d_w,
            d_z: gen.d_z,
            d_c: gen.d_c,
            n_classes: gen.n_classes,
            const_channels: gen.const_channels(),
            normalization: match gen.family {
                Family::ClassConditional => Normalization::ConditionalBatch,
                _ => Normalization::Instance,
            },
            fused_scale,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.channel_schedule.len()
    }

    /// Number of style slices produced (style family).
    pub fn n_layers(&self) -> usize {
        2 * self.n_blocks()
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        let style = self.family == Family::Style;
        let n = self.n_blocks();
        (0..n)
            .map(|k| {
                let c = self.channel_schedule[k];
                let last = k + 1 == n;
                let out = if last { c } else { self.channel_schedule[k + 1] };
                let mut convs = vec![(c, c, 3)];
                if !last {
                    convs.push((c, out, 3));
                }
                BlockSpec {
                    in_channels: c,
                    out_channels: out,
                    resolution: self.resolution >> k,
                    convs,
                    downsample: !last,
                    has_style_fc: style,
                    has_noise: style,
                    normalization: self.normalization,
                }
            })
            .collect()
    }

    /// Width of the flattened 4×4 feature map feeding the tail.
    pub fn tail_in(&self) -> usize {
        self.channel_schedule.last().copied().unwrap_or(0) * 16
    }

    /// Output shapes of each block for a batch of `n`, without running
    /// anything.
    pub fn infer_block_shapes(&self, n: usize) -> Vec<[usize; 4]> {
        self.blocks()
            .iter()
            .map(|b| {
                let r = if b.downsample { b.resolution / 2 } else { b.resolution };
                [n, b.out_channels, r, r]
            })
            .collect()
    }

    /// Checks this spec against the generator it will be paired with.
    pub fn check_against(&self, gen: &GeneratorSpec) -> Result<()> {
        gen.validate()?;
        if self.family != gen.family {
            return Err(config_err!(
                "encoder family {} does not match generator family {}",
                self.family,
                gen.family
            ));
        }
        if self.resolution != gen.resolution {
            return Err(config_err!(
                "encoder resolution {} does not match generator resolution {}",
                self.resolution,
                gen.resolution
            ));
        }
        if self.n_blocks() != gen.n_blocks() {
            return Err(config_err!(
                "encoder has {} blocks, generator has {}",
                self.n_blocks(),
                gen.n_blocks()
            ));
        }
        let mirrored = gen.channel_schedule.iter().rev();
        for (k, (&e, &g)) in self.channel_schedule.iter().zip(mirrored).enumerate() {
            if e != g {
                return Err(config_err!(
                    "block {k} mismatch: encoder width {e}, mirrored generator width {g}"
                ));
            }
        }
        let widths_match = match self.family {
            Family::Style => self.d_w == gen.d_w && self.const_channels == gen.const_channels(),
            Family::Progressive => self.d_z == gen.d_z,
            Family::ClassConditional => {
                self.d_z == gen.d_z && self.d_c == gen.d_c && self.n_classes == gen.n_classes
            }
        };
        if !widths_match {
            return Err(config_err!("encoder latent widths do not match the generator"));
        }
        Ok(())
    }
}

enum Norm {
    Instance,
    Conditional {
        stats: BatchStats,
        base: Tensor,
        by_label: EqualLinear,
    },
}

struct Stage {
    style: Option<EqualLinear>,
    norm: Norm,
    conv: EqualConv2d,
    noise: Option<(Tensor, Tensor)>,
}

struct Block {
    stages: Vec<Stage>,
    bypass: Option<EqualConv2d>,
    downsample: bool,
    fused: bool,
}

enum Tail {
    Style {
        w_last: EqualLinear,
        z_c: EqualConv2d,
        /// Added to every style slice.
        w_offset: Tensor,
        /// Added to the 4×4 head output.
        z_c_offset: Tensor,
    },
    Progressive { z: EqualLinear },
    Conditional { c: EqualLinear, z: EqualLinear },
}

/// A trainable encoder.
pub struct Encoder {
    spec: EncoderSpec,
    store: ParamStore,
    from_rgb: EqualConv2d,
    blocks: Vec<Block>,
    tail: Tail,
    training: Cell<bool>,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder").field("spec", &self.spec).finish()
    }
}

/// Stage input average-pooled to a 4×4 grid and flattened, `(n, 16c)`.
fn pooled_grid(h: &Tensor) -> Result<Tensor> {
    let (_, _, r, _) = h.dims4()?;
    let pooled = if r > 4 { h.avg_pool2d(r / 4)? } else { h.clone() };
    Ok(pooled.flatten_from(1)?)
}

impl Stage {
    fn forward(&self, h: &Tensor, labels: Option<&Tensor>, training: bool, slices: &mut Vec<Tensor>) -> Result<Tensor> {
        if let Some(style) = &self.style {
            slices.push(style.forward(&pooled_grid(h)?)?);
        }
        let normed = match &self.norm {
            Norm::Instance => instance_norm(h)?,
            Norm::Conditional { stats, base, by_label } => {
                let n = h.dim(0)?;
                let width = base.dim(0)?;
                let mut affine = base.unsqueeze(0)?.broadcast_as((n, width))?;
                if let Some(onehot) = labels {
                    affine = (affine + by_label.forward(onehot)?)?;
                }
                modulate(&stats.forward(h, training)?, &affine)?
            }
        };
        let mut out = self.conv.forward(&normed)?;
        if let Some((amp, pattern)) = &self.noise {
            let c = amp.dim(0)?;
            out = out.broadcast_add(&amp.reshape((1, c, 1, 1))?.broadcast_mul(pattern)?)?;
        }
        leaky_relu(&out)
    }
}

impl Block {
    fn forward(&self, x: &Tensor, labels: Option<&Tensor>, training: bool, slices: &mut Vec<Tensor>) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h, labels, training, slices)?;
        }
        if self.downsample && !self.fused {
            h = h.avg_pool2d(2)?;
        }
        let mut skip = match &self.bypass {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        if self.downsample {
            skip = skip.avg_pool2d(2)?;
        }
        Ok((h + skip)?)
    }
}

impl Encoder {
    /// Fresh encoder with weights drawn from `seed`.
    pub fn build(spec: EncoderSpec, seed: u64, dtype: DType) -> Result<Self> {
        Self::assemble(spec, ParamStore::seeded(seed, dtype, true))
    }

    fn assemble(spec: EncoderSpec, mut store: ParamStore) -> Result<Self> {
        if spec.channel_schedule.is_empty() || spec.channel_schedule.iter().any(|&c| c == 0) {
            return Err(config_err!("encoder channel schedule must be non-empty and positive"));
        }
        let expected = crate::generators::log2_exact(spec.resolution).map(|l| l.saturating_sub(1));
        if expected != Some(spec.n_blocks()) {
            return Err(config_err!(
                "encoder schedule of {} blocks does not fit resolution {}",
                spec.n_blocks(),
                spec.resolution
            ));
        }
        let s = &mut store;
        let from_rgb = EqualConv2d::new(s, "from_rgb", 3, spec.channel_schedule[0], 1, 1, SQRT2)?;
        let mut blocks = Vec::new();
        for (k, b) in spec.blocks().iter().enumerate() {
            let mut stages = Vec::new();
            for (j, &(cin, cout, kernel)) in b.convs.iter().enumerate() {
                let name = format!("blocks.{k}.stage{j}");
                let strided = spec.fused_scale && b.downsample && j + 1 == b.convs.len();
                let style = if b.has_style_fc {
                    Some(EqualLinear::with_lr_mul(s, &format!("{name}.style"), 16 * cin, spec.d_w, 1.0, 0.0, HEAD_LR_MUL)?)
                } else {
                    None
                };
                let norm = match b.normalization {
                    Normalization::Instance => Norm::Instance,
                    Normalization::ConditionalBatch => Norm::Conditional {
                        stats: BatchStats::new(s, &format!("{name}.norm"), cin)?,
                        base: s.get(&format!("{name}.norm.affine"), &[2 * cin], Init::Const(0.0))?,
                        by_label: EqualLinear::new(s, &format!("{name}.norm.by_label"), spec.n_classes, 2 * cin, 1.0, 0.0)?,
                    },
                };
                let conv = EqualConv2d::new(s, &format!("{name}.conv"), cin, cout, kernel, if strided { 2 } else { 1 }, SQRT2)?;
                let noise = if b.has_noise {
                    let res = if strided { b.resolution / 2 } else { b.resolution };
                    let amp = s.get(&format!("{name}.noise"), &[cout], Init::Const(0.0))?;
                    let pattern = s.buffer(&format!("{name}.noise_pattern"), &[1, 1, res, res], Init::Normal(1.0))?;
                    Some((amp, pattern.as_tensor().detach()))
                } else {
                    None
                };
                stages.push(Stage { style, norm, conv, noise });
            }
            let bypass = if b.in_channels != b.out_channels {
                Some(EqualConv2d::new(s, &format!("blocks.{k}.bypass"), b.in_channels, b.out_channels, 1, 1, 1.0)?)
            } else {
                None
            };
            blocks.push(Block {
                stages,
                bypass,
                downsample: b.downsample,
                fused: spec.fused_scale,
            });
        }
        let last = *spec.channel_schedule.last().unwrap_or(&0);
        let tail_in = spec.tail_in();
        let tail = match spec.family {
            Family::Style => Tail::Style {
                w_last: EqualLinear::with_lr_mul(s, "tail.w", tail_in, spec.d_w, 1.0, 0.0, HEAD_LR_MUL)?,
                z_c: EqualConv2d::new(s, "tail.z_c", last, spec.const_channels, 1, 1, 1.0)?,
                w_offset: s.get("tail.w_offset", &[spec.d_w], Init::Const(0.0))?,
                z_c_offset: s.get("tail.z_c_offset", &[spec.const_channels, 4, 4], Init::Const(0.0))?,
            },
            Family::Progressive => Tail::Progressive {
                z: EqualLinear::new(s, "tail.z", tail_in, spec.d_z, 1.0, 0.0)?,
            },
            Family::ClassConditional => Tail::Conditional {
                c: EqualLinear::new(s, "tail.c", tail_in, spec.d_c, 1.0, 0.0)?,
                z: EqualLinear::new(s, "tail.z", spec.d_c, spec.d_z, 1.0, 0.0)?,
            },
        };
        Ok(Self {
            spec,
            store,
            from_rgb,
            blocks,
            tail,
            training: Cell::new(true),
        })
    }

    pub fn load(dir: &Path, family: Family, dtype: DType) -> Result<Self> {
        let (manifest, params) = checkpoint::load_manifest::<EncoderSpec>(dir, "encoder", family)?;
        Self::assemble(manifest.spec, ParamStore::load(&params, dtype, true)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, "encoder", self.spec.family, &self.spec, &self.store)
    }

    /// Independent copy with its own parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::assemble(self.spec.clone(), self.store.deep_copy(true)?)?;
        copy.set_training(self.is_training());
        Ok(copy)
    }

    /// Copy in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let copy = Self::assemble(self.spec.clone(), self.store.to_dtype(dtype, true)?)?;
        copy.set_training(self.is_training());
        Ok(copy)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store.trainable_vars()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Whether conditional batch norm uses batch statistics (and updates its
    /// running averages) or the running averages.
    pub fn set_training(&self, training: bool) {
        self.training.set(training);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    /// `(in, out, kernel)` of every block convolution, walked from the built
    /// modules.
    pub fn conv_shapes(&self) -> Vec<Vec<(usize, usize, usize)>> {
        self.blocks
            .iter()
            .map(|b| b.stages.iter().map(|s| s.conv.shape()).collect())
            .collect()
    }

    /// Whether each block has a projecting bypass.
    pub fn bypass_shapes(&self) -> Vec<Option<(usize, usize, usize)>> {
        self.blocks.iter().map(|b| b.bypass.as_ref().map(EqualConv2d::shape)).collect()
    }

    /// `(in, out)` of the tail linear layers, in order.
    pub fn tail_shapes(&self) -> Vec<(usize, usize)> {
        match &self.tail {
            Tail::Style { w_last, .. } => vec![w_last.dims()],
            Tail::Progressive { z } => vec![z.dims()],
            Tail::Conditional { c, z } => vec![c.dims(), z.dims()],
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let r = self.spec.resolution;
        match x.dims() {
            &[n, 3, h, w] if h == r && w == r => Ok(n),
            other => Err(contract!("encoder expects (n, 3, {r}, {r}) images, got {other:?}")),
        }
    }

    fn label_onehot(&self, x: &Tensor, class_hint: Option<&[usize]>) -> Result<Option<Tensor>> {
        let Some(labels) = class_hint else {
            return Ok(None);
        };
        if self.spec.family != Family::ClassConditional {
            return Err(contract!("{} encoders take no class hint", self.spec.family));
        }
        if labels.len() != x.dim(0)? {
            return Err(contract!("{} labels for a batch of {}", labels.len(), x.dim(0)?));
        }
        Ok(Some(one_hot(labels, self.spec.n_classes, x.dtype())?))
    }

    fn trunk(&self, x: &Tensor, labels: Option<&Tensor>, trace: Option<&mut Vec<Vec<usize>>>) -> Result<(Tensor, Vec<Tensor>)> {
        let training = self.is_training();
        let mut slices = Vec::new();
        let mut h = leaky_relu(&self.from_rgb.forward(&x.to_dtype(self.store.dtype())?)?)?;
        let mut shapes = Vec::new();
        for block in &self.blocks {
            h = block.forward(&h, labels, training, &mut slices)?;
            shapes.push(h.dims().to_vec());
        }
        if let Some(t) = trace {
            *t = shapes;
        }
        Ok((h, slices))
    }

    /// Output shape of each block from an actual forward pass.
    pub fn trace_block_shapes(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        self.check_input(x)?;
        let mut shapes = Vec::new();
        self.trunk(x, None, Some(&mut shapes))?;
        Ok(shapes)
    }

    /// Imitated latents of `x`. The class hint selects conditional batch
    /// norm; without it only the unconditional affine is used.
    pub fn encode(&self, x: &Tensor, class_hint: Option<&[usize]>) -> Result<LatentBundle> {
        let n = self.check_input(x)?;
        let labels = self.label_onehot(x, class_hint)?;
        let (h, mut slices) = self.trunk(x, labels.as_ref(), None)?;
        let flat = h.flatten_from(1)?;
        Ok(match &self.tail {
            Tail::Style { w_last, z_c, w_offset, z_c_offset } => {
                let base = w_last.forward(&flat)?;
                for s in slices.iter_mut() {
                    *s = (&*s + &base)?;
                }
                slices.push(base);
                slices.reverse();
                let w = Tensor::stack(&slices, 1)?.broadcast_add(w_offset)?;
                debug_assert_eq!(w.dims(), &[n, self.spec.n_layers(), self.spec.d_w]);
                LatentBundle::Style {
                    w,
                    z_c: Some(z_c.forward(&h)?.broadcast_add(&z_c_offset.unsqueeze(0)?)?),
                    z_n: None,
                }
            }
            Tail::Progressive { z } => LatentBundle::Progressive { z: z.forward(&flat)? },
            Tail::Conditional { c, z } => {
                let c = c.forward(&flat)?;
                LatentBundle::ClassConditional { z: z.forward(&c)?, c }
            }
        })
    }

    /// The learnable noise amplitudes, one `(C,)` tensor per convolution in
    /// encoder order.
    pub fn noise_params(&self) -> Vec<Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| b.stages.iter().filter_map(|s| s.noise.as_ref().map(|(a, _)| a.clone())))
            .collect()
    }

    /// Noise amplitudes laid out as generator noise latents for a batch of
    /// `n`: mirrored to generator layer order, channel counts truncated or
    /// zero-padded, and zeros for the 4×4 input layer that has no encoder
    /// counterpart.
    pub fn noise_latents(&self, n: usize, layer_channels: &[usize]) -> Result<Vec<Tensor>> {
        let params = self.noise_params();
        if params.is_empty() {
            return Err(contract!("{} encoders have no noise parameters", self.spec.family));
        }
        let dtype = self.store.dtype();
        let dev = self.store.device();
        let total = layer_channels.len();
        (0..total)
            .map(|l| {
                let c = layer_channels[l];
                let src = (total - 1).checked_sub(l).and_then(|e| params.get(e));
                let v = match src {
                    Some(p) => {
                        let have = p.dim(0)?;
                        if have >= c {
                            p.narrow(0, 0, c)?
                        } else {
                            Tensor::cat(&[p.clone(), Tensor::zeros(c - have, dtype, dev)?], 0)?
                        }
                    }
                    None => Tensor::zeros(c, dtype, dev)?,
                };
                Ok(v.unsqueeze(0)?.broadcast_as((n, c))?.contiguous()?)
            })
            .collect()
    }

    /// Starts a style encoder at the generator's average output: the style
    /// offset becomes the mean of `samples` mapped latents, the 4×4 offset
    /// becomes the generator's constant input, and the style and 4×4 heads
    /// are zeroed, so training learns per-image deviations.
    pub fn anchor_to(&self, gen: &Generator, samples: usize, seed: u64) -> Result<()> {
        if self.spec.family != Family::Style || gen.family() != Family::Style {
            return Err(contract!("anchoring needs a style encoder and a style generator"));
        }
        self.spec.check_against(gen.spec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, &[samples.max(1), gen.spec().d_z], self.store.dtype())?;
        let mean_w = gen.mapping(&z)?.mean(1)?.mean(0)?;
        let constant = gen.constant_input(1)?.squeeze(0)?;
        let last = *self.spec.channel_schedule.last().unwrap_or(&0);
        let head = Tensor::zeros((self.spec.const_channels, last, 1, 1), self.store.dtype(), self.store.device())?;
        self.store.set("tail.w_offset", &mean_w.to_dtype(self.store.dtype())?)?;
        self.store.set("tail.z_c_offset", &constant.to_dtype(self.store.dtype())?)?;
        self.store.set("tail.z_c.weight", &head)?;
        for (name, var) in self.store.named_params() {
            if name.ends_with(".style.weight") || name == "tail.w.weight" {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// Overwrites a named parameter; used by tests to build fixtures.
    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        self.store.set(name, value)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.names()
    }

    /// Runs block `k` on its own.
    pub fn block_forward(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let block = self
            .blocks
            .get(k)
            .ok_or_else(|| contract!("encoder has no block {k}"))?;
        let mut slices = Vec::new();
        block.forward(x, None, self.is_training(), &mut slices)
    }

    /// Bypass path of block `k` on its own.
    pub fn bypass_forward(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let block = self
            .blocks
            .get(k)
            .ok_or_else(|| contract!("encoder has no block {k}"))?;
        let mut skip = match &block.bypass {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        if block.downsample {
            skip = skip.avg_pool2d(2)?;
        }
        Ok(skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::DseError;
    use crate::layers::to_f64_vec;
    use candle_core::Device;

    fn desk_spec(family: Family) -> EncoderSpec {
        EncoderSpec::mirror(&GeneratorSpec::desk(family, 16), false)
    }

    #[test]
    fn style_output_shapes() {
        let enc = Encoder::build(desk_spec(Family::Style), 0, DType::F32).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        match enc.encode(&x, None).unwrap() {
            LatentBundle::Style { w, z_c, .. } => {
                assert_eq!(w.dims(), &[2, 6, 64]);
                assert_eq!(z_c.unwrap().dims(), &[2, 64, 4, 4]);
            }
            other => panic!("unexpected {:?}", other.family()),
        }
    }

    #[test]
    fn inferred_shapes_match_trace() {
        for fused in [false, true] {
            let spec = EncoderSpec::mirror(&GeneratorSpec::desk(Family::Style, 32), fused);
            let enc = Encoder::build(spec.clone(), 1, DType::F32).unwrap();
            let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
            let traced = enc.trace_block_shapes(&x).unwrap();
            let inferred: Vec<Vec<usize>> = spec.infer_block_shapes(1).iter().map(|s| s.to_vec()).collect();
            assert_eq!(traced, inferred);
        }
    }

    #[test]
    fn wrong_resolution_is_a_contract_error() {
        let enc = Encoder::build(desk_spec(Family::Progressive), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x, None), Err(DseError::Contract(_))));
    }

    #[test]
    fn mismatched_generator_names_first_block() {
        let gen = GeneratorSpec::desk(Family::Style, 32);
        let mut spec = EncoderSpec::mirror(&gen, false);
        spec.channel_schedule[2] = 7;
        match spec.check_against(&gen) {
            Err(DseError::Config(msg)) => assert!(msg.contains("block 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noise_latents_follow_generator_layout() {
        let gen = GeneratorSpec::desk(Family::Style, 16);
        let enc = Encoder::build(EncoderSpec::mirror(&gen, false), 0, DType::F32).unwrap();
        let lat = enc.noise_latents(3, &gen.layer_channels()).unwrap();
        assert_eq!(lat.len(), gen.n_layers());
        for (t, &c) in lat.iter().zip(&gen.layer_channels()) {
            assert_eq!(t.dims(), &[3, c]);
            assert!(to_f64_vec(t).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn class_hint_changes_conditional_output() {
        let spec = desk_spec(Family::ClassConditional);
        let enc = Encoder::build(spec, 3, DType::F32).unwrap();
        enc.set_param("blocks.0.stage0.norm.by_label.bias", &Tensor::ones(64, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let plain = enc.encode(&x, None).unwrap();
        let hinted = enc.encode(&x, Some(&[1, 2])).unwrap();
        let a = to_f64_vec(plain.compared()[0].1).unwrap();
        let b = to_f64_vec(hinted.compared()[0].1).unwrap();
        assert_ne!(a, b);
        assert!(matches!(enc.encode(&x, Some(&[1])), Err(DseError::Contract(_))));
    }
}
