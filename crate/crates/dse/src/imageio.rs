//! PNG/JPEG reading and writing. Tensors hold RGB in [-1, 1].

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ImageFormat, RgbImage};

use crate::checkpoint::write_atomic;
use crate::error::{contract, DseError, Result};
use crate::layers::{crop_resize, to_f64_vec, CropBox};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Reads an image file as a `(1, 3, h, w)` tensor.
pub fn load_image(path: &Path, dtype: DType) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| DseError::io(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img)?.to_dtype(dtype)?)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu)?)
}

/// Converts one `(3, h, w)` or `(1, 3, h, w)` tensor to 8-bit RGB, clamping to
/// [-1, 1] and rounding to nearest.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 if t.dim(0)? == 1 => t.squeeze(0)?,
        3 => t.clone(),
        _ => return Err(contract!("expected a single (3, h, w) image, got {:?}", t.dims())),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(contract!("expected 3 channels, got {c}"));
    }
    let v = to_f64_vec(&t)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|ch| {
                let s = v[ch * h * w + y * w + x].clamp(-1.0, 1.0);
                ((s + 1.0) * 127.5).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| DseError::InvalidInput(format!("png encoding failed: {e}")))?;
    Ok(bytes.into_inner())
}

/// Writes a single image tensor as PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    }
    write_atomic(path, &encode_png(&tensor_to_rgb(t)?)?)
}

/// Centre-crops to a square and resizes to `resolution` (bilinear).
pub fn preprocess(img: &Tensor, resolution: usize) -> Result<Tensor> {
    let (_, c, h, w) = img
        .dims4()
        .map_err(|_| contract!("expected an (n, 3, h, w) batch, got {:?}", img.dims()))?;
    if c != 3 {
        return Err(contract!("expected 3 channels, got {c}"));
    }
    let side = h.min(w);
    let region = CropBox {
        top: ((h - side) / 2) as f64,
        left: ((w - side) / 2) as f64,
        height: side as f64,
        width: side as f64,
    };
    if side == resolution && h == w {
        return Ok(img.clone());
    }
    crop_resize(img, region, resolution, resolution)
}

/// Image files in `dir`, sorted by file stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DseError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DseError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && EXTENSIONS.contains(&ext.as_str()) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| DseError::io(&path, "file name is not valid UTF-8"))?
                .to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads images, preprocesses each to `resolution` and stacks them.
pub fn load_batch(paths: &[PathBuf], resolution: usize, dtype: DType) -> Result<Tensor> {
    if paths.is_empty() {
        return Err(DseError::InvalidInput("no input images".into()));
    }
    let imgs = paths
        .iter()
        .map(|p| preprocess(&load_image(p, DType::F32)?, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&imgs, 0)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let levels: Vec<f32> = (0..48).map(|i| (i * 5) as f32 / 127.5 - 1.0).collect();
        let t = Tensor::from_vec(levels, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let path = dir.path().join("a.png");
        save_png(&path, &t).unwrap();
        let back = load_image(&path, DType::F32).unwrap();
        let a = to_f64_vec(&t).unwrap();
        let b = to_f64_vec(&back).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn preprocess_crops_to_square() {
        let t = Tensor::zeros((1, 3, 20, 30), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(preprocess(&t, 16).unwrap().dims(), &[1, 3, 16, 16]);
    }

    #[test]
    fn listing_ignores_other_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        save_png(&dir.path().join("b.png"), &t).unwrap();
        save_png(&dir.path().join("a.png"), &t).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let ids: Vec<String> = list_images(dir.path()).unwrap().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }
}
