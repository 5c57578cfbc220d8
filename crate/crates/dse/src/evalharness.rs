//! Pairwise image metrics and reports.
//!
//! All metrics are computed on images in [-1, 1] (dynamic range 2). CS is the
//! cosine similarity of the two images flattened to vectors. The MSE column is
//! reported in units of 1e-2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::write_atomic;
use crate::error::{contract, DseError, Result};
use crate::imageio::{encode_png, list_images, load_image, tensor_to_rgb};
use crate::layers::{scalar, to_f64_vec};
use crate::similarity::{lpips_distance, ssim, SsimParams};

pub const CS_DEFINITION: &str = "CS = cosine similarity of the flattened target and reconstruction images";

/// Peak signal-to-noise ratio in dB over the whole batch; `+inf` when the
/// inputs are identical.
pub fn psnr(a: &Tensor, b: &Tensor, dynamic_range: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(contract!("psnr: shape mismatch {:?} vs {:?}", a.dims(), b.dims()));
    }
    let mse = scalar(&(a - b)?.sqr()?.mean_all()?)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / mse).log10())
}

/// Cosine similarity of two images as flat vectors; 1 when both are zero.
pub fn image_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = to_f64_vec(a)?;
    let b = to_f64_vec(b)?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    pub dynamic_range: f64,
    pub ssim: SsimParams,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            dynamic_range: 2.0,
            ssim: SsimParams::default(),
        }
    }
}

/// Metrics of one image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean squared error × 100.
    pub mse_e2: f64,
    pub lpips: f64,
    pub cs: f64,
}

impl MetricRow {
    pub fn mse(&self) -> f64 {
        self.mse_e2 / 100.0
    }
}

/// Metrics of each pair in two aligned `(n, 3, h, w)` batches.
pub fn pair_metrics(
    ids: &[String],
    a: &Tensor,
    b: &Tensor,
    backbone: &Backbone,
    params: &MetricParams,
) -> Result<Vec<MetricRow>> {
    if a.dims() != b.dims() {
        return Err(contract!("pair_metrics: shape mismatch {:?} vs {:?}", a.dims(), b.dims()));
    }
    let n = a.dim(0)?;
    if ids.len() != n {
        return Err(contract!("pair_metrics: {} ids for {n} pairs", ids.len()));
    }
    let a = a.detach().to_dtype(DType::F64)?;
    let b = b.detach().to_dtype(DType::F64)?;
    let bb = if backbone.dtype() == DType::F64 { None } else { Some(backbone.to_dtype(DType::F64)?) };
    let bb = bb.as_ref().unwrap_or(backbone);
    (0..n)
        .map(|i| {
            let x = a.narrow(0, i, 1)?;
            let y = b.narrow(0, i, 1)?;
            let mse = scalar(&(&x - &y)?.sqr()?.mean_all()?)?;
            Ok(MetricRow {
                id: ids[i].clone(),
                psnr: psnr(&x, &y, params.dynamic_range)?,
                ssim: scalar(&ssim(&x, &y, &params.ssim)?)?,
                mse_e2: mse * 100.0,
                lpips: scalar(&lpips_distance(&x, &y, bb)?)?,
                cs: image_cosine(&x, &y)?,
            })
        })
        .collect()
}

/// Ids `0000`, `0001`, ... for a batch of `n`.
pub fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:04}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub mse_e2: f64,
    pub lpips: f64,
    pub cs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub params: MetricParams,
    pub cs_definition: String,
    pub mse_units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: Aggregate,
    pub config: ReportConfig,
}

impl MetricReport {
    /// Report over `rows`, sorted by id.
    pub fn from_rows(mut rows: Vec<MetricRow>, params: &MetricParams) -> Result<Self> {
        if rows.is_empty() {
            return Err(DseError::InvalidInput("metric report needs at least one pair".into()));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let agg = Aggregate {
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            mse_e2: mean(|r| r.mse_e2),
            lpips: mean(|r| r.lpips),
            cs: mean(|r| r.cs),
        };
        Ok(Self {
            mean: agg,
            rows,
            config: ReportConfig {
                params: *params,
                cs_definition: CS_DEFINITION.to_string(),
                mse_units: "1e-2".to_string(),
            },
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| DseError::InvalidInput(format!("csv: {e}"));
        w.write_record(["id", "psnr", "ssim", "mse_e2", "lpips", "cs"]).map_err(err)?;
        let fmt = |v: f64| {
            if v.is_infinite() {
                if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
            } else {
                format!("{v:.6}")
            }
        };
        for r in &self.rows {
            w.write_record([r.id.clone(), fmt(r.psnr), fmt(r.ssim), fmt(r.mse_e2), fmt(r.lpips), fmt(r.cs)])
                .map_err(err)?;
        }
        let m = &self.mean;
        w.write_record(["mean".to_string(), fmt(m.psnr), fmt(m.ssim), fmt(m.mse_e2), fmt(m.lpips), fmt(m.cs)])
            .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| DseError::InvalidInput(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| DseError::InvalidInput(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>9} {:>7} {:>9} {:>7} {:>7}\n",
            "id", "PSNR", "SSIM", "MSE(e2)", "LPIPS", "CS"
        );
        let line = |id: &str, p: f64, s: f64, m: f64, l: f64, c: f64| {
            format!("{id:<16} {p:>9.3} {s:>7.4} {m:>9.4} {l:>7.4} {c:>7.4}\n")
        };
        for r in &self.rows {
            out += &line(&r.id, r.psnr, r.ssim, r.mse_e2, r.lpips, r.cs);
        }
        let m = &self.mean;
        out += &line("mean", m.psnr, m.ssim, m.mse_e2, m.lpips, m.cs);
        out += CS_DEFINITION;
        out.push('\n');
        out
    }
}

/// Where a set of images comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// Every PNG/JPEG file in a directory, identified by file stem.
    Directory(PathBuf),
    /// CSV file with `id,path` rows; relative paths resolve against the
    /// manifest's directory.
    Manifest(PathBuf),
}

impl ImageSource {
    /// A directory path becomes [`ImageSource::Directory`], anything else a
    /// manifest.
    pub fn from_path(path: &Path) -> Self {
        if path.is_dir() {
            ImageSource::Directory(path.to_path_buf())
        } else {
            ImageSource::Manifest(path.to_path_buf())
        }
    }

    pub fn entries(&self) -> Result<Vec<(String, PathBuf)>> {
        match self {
            ImageSource::Directory(dir) => list_images(dir),
            ImageSource::Manifest(path) => {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                let mut reader = csv::Reader::from_path(path).map_err(|e| DseError::io(path, e))?;
                let mut out = Vec::new();
                for rec in reader.records() {
                    let rec = rec.map_err(|e| DseError::io(path, e))?;
                    let (Some(id), Some(p)) = (rec.get(0), rec.get(1)) else {
                        return Err(DseError::io(path, "manifest rows need `id,path`"));
                    };
                    out.push((id.to_string(), base.join(p)));
                }
                out.sort();
                Ok(out)
            }
        }
    }
}

/// Loads two aligned image sets and compares them pair by pair.
pub fn evaluate_pairs(
    set_a: &ImageSource,
    set_b: &ImageSource,
    backbone: &Backbone,
    params: &MetricParams,
) -> Result<MetricReport> {
    let a: BTreeMap<String, PathBuf> = set_a.entries()?.into_iter().collect();
    let b: BTreeMap<String, PathBuf> = set_b.entries()?.into_iter().collect();
    let only_a: Vec<&String> = a.keys().filter(|k| !b.contains_key(*k)).collect();
    let only_b: Vec<&String> = b.keys().filter(|k| !a.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(DseError::InvalidInput(format!(
            "image sets are not aligned; only in first: {only_a:?}; only in second: {only_b:?}"
        )));
    }
    let mut rows = Vec::new();
    for (id, pa) in &a {
        let x = load_image(pa, DType::F64)?;
        let y = load_image(&b[id], DType::F64)?;
        if x.dims() != y.dims() {
            return Err(contract!("{id}: image sizes differ {:?} vs {:?}", x.dims(), y.dims()));
        }
        rows.extend(pair_metrics(std::slice::from_ref(id), &x, &y, backbone, params)?);
    }
    MetricReport::from_rows(rows, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// Pixels of white space between cells.
    pub padding: usize,
}

/// Montage of `(3, h, w)` or `(1, 3, h, w)` images laid out row by row.
/// Captions, when given, are written next to the image as
/// `<name>.captions.txt`, one `row,col,caption` line per cell.
pub fn emit_grid(images: &[Tensor], layout: GridLayout, captions: Option<&[String]>, path: &Path) -> Result<()> {
    let first = images.first().ok_or_else(|| contract!("emit_grid: no images"))?;
    let cells = layout.rows * layout.cols;
    if images.len() > cells {
        return Err(contract!(
            "emit_grid: {} images do not fit a {}x{} grid",
            images.len(),
            layout.rows,
            layout.cols
        ));
    }
    if let Some(c) = captions {
        if c.len() != images.len() {
            return Err(contract!("emit_grid: {} captions for {} images", c.len(), images.len()));
        }
    }
    let tiles = images.iter().map(tensor_to_rgb).collect::<Result<Vec<_>>>()?;
    let (w, h) = tensor_to_rgb(first)?.dimensions();
    if let Some((i, t)) = tiles.iter().enumerate().find(|(_, t)| t.dimensions() != (w, h)) {
        return Err(contract!(
            "emit_grid: image {i} is {}x{}, expected {w}x{h}",
            t.width(),
            t.height()
        ));
    }
    let pad = layout.padding as u32;
    let gw = layout.cols as u32 * (w + pad) + pad;
    let gh = layout.rows as u32 * (h + pad) + pad;
    let mut grid = RgbImage::from_pixel(gw, gh, image::Rgb([255, 255, 255]));
    for (i, tile) in tiles.iter().enumerate() {
        let r = (i / layout.cols) as u32;
        let c = (i % layout.cols) as u32;
        image::imageops::replace(&mut grid, tile, (pad + c * (w + pad)) as i64, (pad + r * (h + pad)) as i64);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    }
    write_atomic(path, &encode_png(&grid)?)?;
    if let Some(caps) = captions {
        let text: String = caps
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{},{},{c}\n", i / layout.cols, i % layout.cols))
            .collect();
        let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".captions.txt");
        write_atomic(&path.with_file_name(name), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use candle_core::Device;

    fn filled(v: f64) -> Tensor {
        Tensor::full(v, (1, 3, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&filled(0.3), &filled(0.3), 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&filled(0.0), &filled(1.0), 1.0).unwrap().abs() < 1e-12);
        let p = psnr(&filled(0.0), &filled(0.5), 1.0).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(matches!(psnr(&filled(0.0), &Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap(), 1.0), Err(DseError::Contract(_))));
    }

    #[test]
    fn aggregate_is_the_row_mean() {
        let rows = (0..3)
            .map(|i| MetricRow {
                id: format!("{i}"),
                psnr: i as f64,
                ssim: 0.5,
                mse_e2: 2.0 * i as f64,
                lpips: 0.1,
                cs: 1.0,
            })
            .collect();
        let r = MetricReport::from_rows(rows, &MetricParams::default()).unwrap();
        assert!((r.mean.psnr - 1.0).abs() < 1e-12);
        assert!((r.mean.mse_e2 - 2.0).abs() < 1e-12);
        assert!(r.to_csv().unwrap().starts_with("id,psnr,ssim,mse_e2,lpips,cs\n"));
        assert!(r.to_table().contains(CS_DEFINITION));
    }

    #[test]
    fn grid_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let layout = GridLayout { rows: 1, cols: 2, padding: 1 };
        assert!(matches!(emit_grid(&[], layout, None, &p), Err(DseError::Contract(_))));
        let small = Tensor::zeros((3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let big = Tensor::zeros((3, 5, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(emit_grid(&[small, big], layout, None, &p), Err(DseError::Contract(_))));
    }

    #[test]
    fn self_pairs_are_ideal() {
        let bb = Backbone::seeded(BackboneSpec::desk(), 0, DType::F32).unwrap();
        let x = Tensor::randn(0f64, 0.5, (2, 3, 16, 16), &Device::Cpu).unwrap().tanh().unwrap();
        let rows = pair_metrics(&index_ids(2), &x, &x, &bb, &MetricParams::default()).unwrap();
        for r in rows {
            assert_eq!(r.psnr, f64::INFINITY);
            assert!((r.ssim - 1.0).abs() < 1e-6);
            assert_eq!(r.mse_e2, 0.0);
            assert!(r.lpips.abs() < 1e-6);
            assert!((r.cs - 1.0).abs() < 1e-6);
        }
    }
}
