//! Building blocks shared by the generator, encoder and backbone.

use candle_core::{DType, Tensor, Var, D};

use crate::error::{contract, Result};
use crate::params::{Init, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Runtime weight multiplier of the equalized learning rate.
pub fn equalized_scale(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

/// Fully connected layer with equalized learning rate: the raw weight is
/// stored unit-normal and multiplied by `gain / sqrt(fan_in)` on every call.
#[derive(Debug, Clone)]
pub struct EqualLinear {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
    bias_scale: f64,
    in_dim: usize,
    out_dim: usize,
}

impl EqualLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias_init: f64,
    ) -> Result<Self> {
        Self::with_lr_mul(store, name, in_dim, out_dim, gain, bias_init, 1.0)
    }

    /// Layer whose effective learning rate is `lr_mul` times the optimizer's:
    /// raw parameters are stored divided by `lr_mul` and scaled back on use.
    #[allow(clippy::too_many_arguments)]
    pub fn with_lr_mul(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias_init: f64,
        lr_mul: f64,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[out_dim, in_dim], Init::Normal(1.0 / lr_mul))?;
        let bias = store.get(&format!("{name}.bias"), &[out_dim], Init::Const(bias_init / lr_mul))?;
        Ok(Self {
            weight,
            bias,
            scale: equalized_scale(in_dim, gain) * lr_mul,
            bias_scale: lr_mul,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.in_dim {
            return Err(contract!(
                "linear layer expects width {}, got {:?}",
                self.in_dim,
                x.dims()
            ));
        }
        let w = (&self.weight * self.scale)?;
        let y = x.broadcast_matmul(&w.t()?)?;
        if self.bias_scale == 1.0 {
            Ok(y.broadcast_add(&self.bias)?)
        } else {
            Ok(y.broadcast_add(&(&self.bias * self.bias_scale)?)?)
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }
}

/// 2-D convolution with equalized learning rate, square kernel.
#[derive(Debug, Clone)]
pub struct EqualConv2d {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl EqualConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Normal(1.0),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[out_channels], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            scale: equalized_scale(in_channels * kernel * kernel, gain),
            stride,
            padding: kernel / 2,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = (&self.weight * self.scale)?;
        let y = if self.stride == 1 {
            conv2d_same(x, &w)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }

    /// `(in, out, kernel)` as listed in architecture tables.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.in_channels, self.out_channels, self.kernel)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// Stride-1 convolution with `k / 2` zero padding, computed as a sum of `k²`
/// shifted matrix products. Equal to `Tensor::conv2d` but several times
/// cheaper to differentiate on the CPU backend.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 || k % 2 == 0 {
        return Err(contract!(
            "conv2d_same: input {:?} incompatible with kernel {:?}",
            x.dims(),
            w.dims()
        ));
    }
    let p = k / 2;
    let padded = if p > 0 {
        x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?
    } else {
        x.clone()
    };
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let cols = padded
                .narrow(2, dy, h)?
                .narrow(3, dx, wd)?
                .transpose(0, 1)?
                .reshape((c, n * h * wd))?;
            let tap = w.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((o, c))?;
            let y = tap.matmul(&cols)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
    }
    let acc = acc.ok_or_else(|| contract!("conv2d_same: empty kernel"))?;
    Ok(acc.reshape((o, n, h, wd))?.transpose(0, 1)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAKY_SLOPE)?)?)
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Normalizes each pixel's feature vector to unit mean square.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(1)?;
    Ok(x.broadcast_div(&(ms + 1e-8)?.sqrt()?)?)
}

/// Batch normalization with tracked running statistics and no built-in
/// affine; the affine part is supplied per sample by the caller, which is
/// what makes conditional batch norm possible.
#[derive(Debug, Clone)]
pub struct BatchStats {
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    channels: usize,
}

impl BatchStats {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Const(0.0))?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Const(1.0))?,
            momentum: 0.1,
            channels,
        })
    }

    /// With `train`, normalizes with batch statistics and folds them into the
    /// running averages; otherwise uses the running averages.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(3)?
                .mean_keepdim(2)?
                .mean_keepdim(0)?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.flatten_all()?.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.flatten_all()?.detach() * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
    }

    /// Overwrite the running statistics from a calibration batch.
    pub fn calibrate(&self, x: &Tensor) -> Result<()> {
        let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
        let var = x
            .broadcast_sub(&mean)?
            .sqr()?
            .mean_keepdim(3)?
            .mean_keepdim(2)?
            .mean_keepdim(0)?;
        self.running_mean.set(&mean.flatten_all()?.detach())?;
        self.running_var.set(&var.flatten_all()?.detach())?;
        Ok(())
    }
}

/// Applies `(1 + scale) * x + shift` with `style` of shape `(n, 2C)`.
pub fn modulate(x: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (n, two_c) = style.dims2()?;
    let c = two_c / 2;
    let scale = (style.narrow(1, 0, c)?.reshape((n, c, 1, 1))? + 1.0)?;
    let shift = style.narrow(1, c, c)?.reshape((n, c, 1, 1))?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

/// Axis-aligned region in pixel units; may be fractional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0.0,
            left: 0.0,
            height: height as f64,
            width: width as f64,
        }
    }

    /// Square box of side `frac * size`, centred in a `size`×`size` frame.
    pub fn centred(size: usize, frac: f64) -> Self {
        let side = frac * size as f64;
        let off = (size as f64 - side) / 2.0;
        Self {
            top: off,
            left: off,
            height: side,
            width: side,
        }
    }

    pub fn contains(&self, other: &CropBox) -> bool {
        const TOL: f64 = 1e-9;
        other.top >= self.top - TOL
            && other.left >= self.left - TOL
            && other.top + other.height <= self.top + self.height + TOL
            && other.left + other.width <= self.left + self.width + TOL
    }
}

/// Bilinear resampling weights (half-pixel centres, edge clamped) mapping
/// `src_len` source samples onto `out_len` outputs covering
/// `[start, start + extent)`. Row-major `out_len × src_len`.
pub fn resample_weights(src_len: usize, start: f64, extent: f64, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * src_len];
    let step = extent / out_len as f64;
    let max = (src_len - 1) as f64;
    for i in 0..out_len {
        let pos = (start + (i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
        let lo = pos.floor();
        let frac = pos - lo;
        let lo = lo as usize;
        let hi = (lo + 1).min(src_len - 1);
        m[i * src_len + lo] += 1.0 - frac;
        m[i * src_len + hi] += frac;
    }
    m
}

/// Crops `region` out of `(n, c, h, w)` images and bilinearly resamples it to
/// `out_h × out_w`. Implemented as two matrix products, so it is linear and
/// differentiable in the pixels.
pub fn crop_resize(img: &Tensor, region: CropBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    let dtype = img.dtype();
    let dev = img.device();
    let rows = Tensor::from_vec(
        resample_weights(h, region.top, region.height, out_h),
        (out_h, h),
        dev,
    )?
    .to_dtype(dtype)?;
    let cols = Tensor::from_vec(
        resample_weights(w, region.left, region.width, out_w),
        (out_w, w),
        dev,
    )?
    .to_dtype(dtype)?;
    let tmp = img.broadcast_matmul(&cols.t()?)?;
    Ok(rows.broadcast_matmul(&tmp)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn equalized_scale_fan_in_four() {
        let s = equalized_scale(4, 2f64.sqrt());
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn doubling_raw_weight_doubles_output() {
        let mut store = ParamStore::seeded(5, DType::F64, true);
        let lin = EqualLinear::new(&mut store, "fc", 4, 3, 1.0, 0.0).unwrap();
        let x = Tensor::new(&[[0.3f64, -1.0, 2.0, 0.5]], &Device::Cpu).unwrap();
        let y1 = to_f64_vec(&lin.forward(&x).unwrap()).unwrap();
        let raw = store.named_params().find(|(k, _)| *k == "fc.weight").unwrap().1.as_tensor().clone();
        store.set("fc.weight", &(raw * 2.0).unwrap()).unwrap();
        let y2 = to_f64_vec(&lin.forward(&x).unwrap()).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_conv_matches_direct_conv() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 6), &candle_core::Device::Cpu).unwrap();
        for k in [1, 3, 5] {
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &candle_core::Device::Cpu).unwrap();
            let a = to_f64_vec(&conv2d_same(&x, &w).unwrap()).unwrap();
            let b = to_f64_vec(&x.conv2d(&w, k / 2, 1, 1, 1).unwrap()).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Tensor::arange(0f64, 2.0 * 3.0 * 5.0 * 5.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 5, 5))
            .unwrap();
        let out = crop_resize(&img, CropBox::full(5, 5), 5, 5).unwrap();
        assert_eq!(to_f64_vec(&img).unwrap(), to_f64_vec(&out).unwrap());
    }

    #[test]
    fn resample_rows_sum_to_one() {
        let m = resample_weights(7, 1.3, 4.1, 9);
        for row in m.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_of_zero_is_zero() {
        let x = Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let y = to_f64_vec(&instance_norm(&x).unwrap()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
