//! VGG-style feature extractor used for the perceptual distance and for
//! gradient-weighted class activation maps.
//!
//! The network is a stack of five convolutional blocks followed by a global
//! average pool and a linear classifier. The last convolution of each block
//! is a tap point. Weights come either from a seeded random draw (desk-scale
//! experiments and tests) or from a safetensors file using the key layout
//!
//! ```text
//! features.{block}.{conv}.weight   (out, in, 3, 3)
//! features.{block}.{conv}.bias     (out)
//! classifier.weight                (classes, channels of block 4)
//! classifier.bias                  (classes)
//! ```
//!
//! so that converted ImageNet weights can be dropped in.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, DseError, Result};
use crate::params::{Init, ParamStore};
use crate::layers::conv2d_same;

/// Environment variable consulted for a backbone weight file.
pub const BACKBONE_ENV: &str = "DSE_BACKBONE";

/// LPIPS-style input whitening for images in [-1, 1].
const SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const SCALE: [f64; 3] = [0.458, 0.448, 0.450];

pub const NUM_TAPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Output channels of each convolution, grouped by block.
    pub blocks: Vec<Vec<usize>>,
    pub n_classes: usize,
}

impl BackboneSpec {
    /// The VGG16 layout (13 convolutions in 5 blocks).
    pub fn vgg16() -> Self {
        Self {
            blocks: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            n_classes: 1000,
        }
    }

    /// Narrow five-block network for CPU experiments.
    pub fn desk() -> Self {
        Self {
            blocks: vec![vec![16], vec![16], vec![32], vec![32], vec![32]],
            n_classes: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.len() != NUM_TAPS || self.blocks.iter().any(|b| b.is_empty()) {
            return Err(DseError::Config(format!(
                "backbone needs {NUM_TAPS} non-empty blocks, got {:?}",
                self.blocks
            )));
        }
        if self.n_classes == 0 {
            return Err(DseError::Config("backbone needs at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = conv2d_same(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?.relu()?)
    }
}

/// Frozen feature extractor with five tap points and a classifier head.
pub struct Backbone {
    spec: BackboneSpec,
    blocks: Vec<Vec<Conv>>,
    classifier_w: Tensor,
    classifier_b: Tensor,
    shift: Tensor,
    scale: Tensor,
    store: ParamStore,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("spec", &self.spec).finish()
    }
}

impl Backbone {
    /// Random He-initialized weights drawn from `seed`.
    pub fn seeded(spec: BackboneSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::seeded(seed, dtype, false);
        Self::build(spec, store)
    }

    /// Loads weights from a safetensors file laid out as in the module docs.
    pub fn load(path: &Path, spec: BackboneSpec, dtype: DType) -> Result<Self> {
        spec.validate()?;
        if !path.is_file() {
            return Err(DseError::io(
                path,
                format!(
                    "backbone weights not found; expected a safetensors file with \
                     `features.<block>.<conv>.weight|bias` and `classifier.weight|bias` \
                     keys at this path (set `backbone.path` in the config or the \
                     {BACKBONE_ENV} environment variable), or use the seeded desk backbone"
                ),
            ));
        }
        let store = ParamStore::load(path, dtype, false)?;
        Self::build(spec, store)
    }

    /// Path named by the `DSE_BACKBONE` environment variable, if set.
    pub fn env_path() -> Option<PathBuf> {
        std::env::var_os(BACKBONE_ENV).map(PathBuf::from)
    }

    fn build(spec: BackboneSpec, mut store: ParamStore) -> Result<Self> {
        let dtype = store.dtype();
        let dev = store.device().clone();
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut in_c = 3;
        for (b, widths) in spec.blocks.iter().enumerate() {
            let mut convs = Vec::with_capacity(widths.len());
            for (i, &out_c) in widths.iter().enumerate() {
                let std = (2.0 / (in_c * 9) as f64).sqrt();
                let weight = store.get(
                    &format!("features.{b}.{i}.weight"),
                    &[out_c, in_c, 3, 3],
                    Init::Normal(std),
                )?;
                let bias = store.get(&format!("features.{b}.{i}.bias"), &[out_c], Init::Const(0.0))?;
                convs.push(Conv { weight, bias });
                in_c = out_c;
            }
            blocks.push(convs);
        }
        let std = (1.0 / in_c as f64).sqrt();
        let classifier_w = store.get("classifier.weight", &[spec.n_classes, in_c], Init::Normal(std))?;
        let classifier_b = store.get("classifier.bias", &[spec.n_classes], Init::Const(0.0))?;
        let shift = Tensor::new(&SHIFT, &dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let scale = Tensor::new(&SCALE, &dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            spec,
            blocks,
            classifier_w,
            classifier_b,
            shift,
            scale,
            store,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Copy in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(self.spec.clone(), self.store.to_dtype(dtype, false)?)
    }

    /// Copy with the classifier weights and bias multiplied by `factor`.
    pub fn with_scaled_classifier(&self, factor: f64) -> Result<Self> {
        let store = self.store.deep_copy(false)?;
        let mut out = Self::build(self.spec.clone(), store)?;
        out.classifier_w = (&out.classifier_w * factor)?;
        out.classifier_b = (&out.classifier_b * factor)?;
        Ok(out)
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1)? != 3 {
            return Err(contract!("backbone expects (n, 3, h, w) images, got {:?}", x.dims()));
        }
        let x = x.to_dtype(self.dtype())?;
        Ok(x.broadcast_sub(&self.shift)?.broadcast_div(&self.scale)?)
    }

    fn pool(x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h >= 2 && w >= 2 {
            Ok(x.avg_pool2d(2)?)
        } else {
            Ok(x.clone())
        }
    }

    fn run_block(&self, b: usize, mut x: Tensor) -> Result<Tensor> {
        for conv in &self.blocks[b] {
            x = conv.forward(&x)?;
        }
        Ok(x)
    }

    /// Activations at all five taps.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.normalize(x)?;
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for b in 0..self.blocks.len() {
            if b > 0 {
                h = Self::pool(&h)?;
            }
            h = self.run_block(b, h)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap >= self.blocks.len() {
            return Err(DseError::Config(format!(
                "backbone tap layer {tap} not found (valid taps are 0..{})",
                self.blocks.len() - 1
            )));
        }
        Ok(())
    }

    /// Activation at tap `tap`.
    pub fn forward_to(&self, x: &Tensor, tap: usize) -> Result<Tensor> {
        self.check_tap(tap)?;
        let mut h = self.normalize(x)?;
        for b in 0..=tap {
            if b > 0 {
                h = Self::pool(&h)?;
            }
            h = self.run_block(b, h)?;
        }
        Ok(h)
    }

    /// Class logits computed from an activation taken at `tap`.
    pub fn forward_from(&self, tap: usize, act: &Tensor) -> Result<Tensor> {
        self.check_tap(tap)?;
        let mut h = act.clone();
        for b in tap + 1..self.blocks.len() {
            h = Self::pool(&h)?;
            h = self.run_block(b, h)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(pooled
            .matmul(&self.classifier_w.t()?)?
            .broadcast_add(&self.classifier_b)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.blocks.len() - 1;
        let act = self.forward_to(x, last)?;
        self.forward_from(last, &act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn five_taps_with_expected_widths() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 0, DType::F32).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let taps = bb.features(&x).unwrap();
        let dims: Vec<_> = taps.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![2, 16, 32, 32],
                vec![2, 16, 16, 16],
                vec![2, 32, 8, 8],
                vec![2, 32, 4, 4],
                vec![2, 32, 2, 2]
            ]
        );
        assert_eq!(bb.logits(&x).unwrap().dims(), &[2, 10]);
    }

    #[test]
    fn tiny_inputs_stop_pooling_at_one_pixel() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 0, DType::F64).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let taps = bb.features(&x).unwrap();
        assert_eq!(taps[4].dims(), &[1, 32, 1, 1]);
    }

    #[test]
    fn missing_weights_error_names_the_file_and_env_var() {
        let err = Backbone::load(Path::new("/nonexistent/vgg.safetensors"), BackboneSpec::vgg16(), DType::F32)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/vgg.safetensors"), "{msg}");
        assert!(msg.contains(BACKBONE_ENV), "{msg}");
    }

    #[test]
    fn bad_tap_is_a_config_error() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward_to(&x, 9), Err(DseError::Config(_))));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.safetensors");
        let bb = Backbone::seeded(BackboneSpec::desk(), 4, DType::F32).unwrap();
        bb.save(&path).unwrap();
        let back = Backbone::load(&path, BackboneSpec::desk(), DType::F32).unwrap();
        assert_eq!(bb.checksum().unwrap(), back.checksum().unwrap());
    }
}
