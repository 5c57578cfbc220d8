//! Subcommand bodies. Each writes its effective config to `run_config.toml`
//! in its output directory.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use dse::checkpoint::write_atomic;
use dse::encoder::{Encoder, EncoderSpec};
use dse::evalharness::{evaluate_pairs, ImageSource, MetricReport};
use dse::generators::Generator;
use dse::imageio::{load_batch, save_png};
use dse::inversion::{
    edit as shift_latents, finetune_encoder, invert_batch, load_direction, optimize_w_direct, EditRequest,
    InversionResult, LatentInit, OptimizeConfig,
};
use dse::training::train_dse;
use dse::{DseError, Family, LatentBundle, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{InvertMode, RunConfig};

pub const RUN_CONFIG: &str = "run_config.toml";
pub const MANIFEST: &str = "manifest.csv";
pub const LATENTS: &str = "latents.safetensors";
pub const METRICS: &str = "metrics.csv";

const RENDER_CHUNK: usize = 16;
/// Mapping samples averaged when centring a fresh style encoder.
const ANCHOR_SAMPLES: usize = 256;

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    write_atomic(&dir.join(RUN_CONFIG), cfg.effective().to_toml()?.as_bytes())
}

fn render(gen: &Generator, latents: &LatentBundle) -> Result<Tensor> {
    let n = latents.batch_size()?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = RENDER_CHUNK.min(n - start);
        parts.push(gen.synthesize(&latents.narrow(start, len)?)?.image);
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Writes `<id>.png` per image and a manifest with `id,path[,label]` rows.
fn write_images(dir: &Path, ids: &[String], images: &Tensor, labels: &[usize]) -> Result<()> {
    let mut manifest = String::from(if labels.is_empty() { "id,path\n" } else { "id,path,label\n" });
    for (i, id) in ids.iter().enumerate() {
        let name = format!("{id}.png");
        save_png(&dir.join(&name), &images.narrow(0, i, 1)?)?;
        match labels.get(i) {
            Some(l) => manifest += &format!("{id},{name},{l}\n"),
            None => manifest += &format!("{id},{name}\n"),
        }
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

fn ids(n: usize) -> Vec<String> {
    dse::evalharness::index_ids(n)
}

pub fn synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let gen = cfg.generator()?;
    prepare_dir(out, cfg)?;
    if count == 0 {
        return write_atomic(&out.join(MANIFEST), b"id,path\n");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (latents, _, labels) = gen.sample_latents(count, &mut rng)?;
    let images = render(&gen, &latents)?;
    write_images(out, &ids(count), &images, &labels)?;
    latents.save(&out.join(LATENTS))?;
    log::info!("wrote {count} images to {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let gen = cfg.generator()?;
    let spec = EncoderSpec::mirror(gen.spec(), cfg.train.strategy.fused_scale());
    let enc = Encoder::build(spec, cfg.seed.wrapping_add(1), cfg.dtype())?;
    if gen.family() == Family::Style {
        enc.anchor_to(&gen, ANCHOR_SAMPLES, cfg.seed)?;
    }
    let backbone = cfg.backbone()?;
    prepare_dir(out, cfg)?;
    let before = gen.checksum()?;
    let history = train_dse(&gen, &enc, &backbone, &cfg.attention, &cfg.train, Some(out))?;
    if gen.checksum()? != before {
        return Err(DseError::Contract("generator parameters changed during training".into()));
    }
    let last = history.records.last();
    log::info!(
        "trained {} steps in {:.1}s; last loss {:.5}, reconstruction mse {:.5}{}",
        history.records.len(),
        history.wall_clock_secs,
        last.map_or(f64::NAN, |r| r.loss.total),
        last.map_or(f64::NAN, |r| r.reconstruction_mse),
        if history.stopped_early { " (stopped early)" } else { "" },
    );
    Ok(())
}

fn load_images(cfg: &RunConfig, gen: &Generator, source: &Path) -> Result<(Vec<String>, Tensor)> {
    let entries = ImageSource::from_path(source).entries()?;
    if entries.is_empty() {
        return Err(DseError::InvalidInput(format!("no images found in {}", source.display())));
    }
    let paths: Vec<PathBuf> = entries.iter().map(|(_, p)| p.clone()).collect();
    let images = load_batch(&paths, gen.spec().resolution, cfg.dtype())?;
    Ok((entries.into_iter().map(|(id, _)| id).collect(), images))
}

fn optimize_config(cfg: &RunConfig) -> OptimizeConfig {
    let base = match cfg.invert.mode {
        InvertMode::Direct => OptimizeConfig::direct(),
        _ => OptimizeConfig::default(),
    };
    OptimizeConfig {
        steps: cfg.invert.steps,
        learning_rate: cfg.invert.learning_rate,
        loss: cfg.invert.loss,
        optimize_const: cfg.invert.optimize_const,
        metrics: cfg.metrics,
        ..base
    }
}

fn run_inversion(cfg: &RunConfig, gen: &Generator, images: &Tensor) -> Result<InversionResult> {
    let enc = Encoder::load(&cfg.encoder_dir(), gen.family(), cfg.dtype())?;
    enc.spec().check_against(gen.spec())?;
    let backbone = cfg.backbone()?;
    match cfg.invert.mode {
        InvertMode::Single => invert_batch(&enc, gen, images, None, &backbone, &cfg.metrics),
        InvertMode::Finetune => {
            finetune_encoder(&enc, gen, images, None, &backbone, &cfg.attention, &optimize_config(cfg))
        }
        InvertMode::Direct => optimize_w_direct(
            gen,
            images,
            LatentInit::Encoder(&enc),
            &backbone,
            &cfg.attention,
            &optimize_config(cfg),
        ),
    }
}

pub fn invert(cfg: &RunConfig, images: &Path, out: &Path) -> Result<()> {
    let gen = cfg.generator()?;
    let (ids, batch) = load_images(cfg, &gen, images)?;
    let result = run_inversion(cfg, &gen, &batch)?;
    prepare_dir(out, cfg)?;
    write_images(out, &ids, &result.reconstruction, &[])?;
    result.latents.save(&out.join(LATENTS))?;
    let rows = result
        .metrics
        .into_iter()
        .zip(&ids)
        .map(|(row, id)| dse::evalharness::MetricRow { id: id.clone(), ..row })
        .collect();
    let report = MetricReport::from_rows(rows, &cfg.metrics)?;
    report.write_csv(&out.join(METRICS))?;
    print!("{}", report.to_table());
    Ok(())
}

pub enum EditSource {
    Latents(PathBuf),
    Images(PathBuf),
}

pub fn edit(
    cfg: &RunConfig,
    source: &EditSource,
    direction: &Path,
    alpha: f64,
    layers: Option<Vec<usize>>,
    out: &Path,
) -> Result<()> {
    let gen = cfg.generator()?;
    if gen.family() != Family::Style {
        return Err(DseError::Contract(format!("editing needs a style generator, got {}", gen.family())));
    }
    let (ids, latents) = match source {
        EditSource::Latents(path) => {
            let latents = LatentBundle::load(path, Family::Style, cfg.dtype())?;
            (ids(latents.batch_size()?), latents)
        }
        EditSource::Images(path) => {
            let (ids, batch) = load_images(cfg, &gen, path)?;
            (ids, run_inversion(cfg, &gen, &batch)?.latents)
        }
    };
    let (manifest, direction) = load_direction(direction, cfg.dtype())?;
    let request = EditRequest {
        direction,
        alpha,
        layers: layers.or(manifest.layers),
    };
    let LatentBundle::Style { w, z_c, z_n } = latents else {
        return Err(DseError::Contract("editing needs style latents".into()));
    };
    let edited = LatentBundle::Style {
        w: shift_latents(&w, &request)?,
        z_c,
        z_n,
    };
    prepare_dir(out, cfg)?;
    write_images(out, &ids, &render(&gen, &edited)?, &[])?;
    edited.save(&out.join(LATENTS))?;
    log::info!("edited {} latents along `{}` by {alpha}", ids.len(), manifest.name);
    Ok(())
}

pub fn eval(cfg: &RunConfig, first: &Path, second: &Path, csv: &Path) -> Result<()> {
    let backbone = cfg.backbone()?;
    let report = evaluate_pairs(
        &ImageSource::from_path(first),
        &ImageSource::from_path(second),
        &backbone,
        &cfg.metrics,
    )?;
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DseError::io(dir, e))?;
    }
    report.write_csv(csv)?;
    print!("{}", report.to_table());
    Ok(())
}
