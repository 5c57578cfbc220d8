//! Overfits a desk-scale encoder to a fixed pool of toy-generator samples and
//! prints the reconstruction error as training proceeds.

use candle_core::DType;
use dse::attention::AttentionConfig;
use dse::backbone::{Backbone, BackboneSpec};
use dse::encoder::{Encoder, EncoderSpec};
use dse::generators::{Generator, GeneratorSpec};
use dse::latent::Family;
use dse::training::{reconstruction_mse, train_dse, SampleBatch, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dse::error::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(2000);
    let batch = args.get(1).copied().unwrap_or(8);
    let gen = Generator::toy(GeneratorSpec::desk(Family::Style, 32), 7, DType::F32)?;
    let enc = Encoder::build(EncoderSpec::mirror(gen.spec(), false), 11, DType::F32)?;
    enc.anchor_to(&gen, 256, 11)?;
    let backbone = Backbone::seeded(BackboneSpec::desk(), 3, DType::F32)?;
    let attention = AttentionConfig::default();
    let pool_seed = 5;
    let pool = SampleBatch::draw(&gen, 64, &mut ChaCha8Rng::seed_from_u64(pool_seed))?;
    println!("initial mse {:.5}", reconstruction_mse(&gen, &enc, &pool, 16, false)?);
    let cfg = TrainConfig {
        batch_size: batch,
        fixed_pool: Some(64),
        seed: pool_seed,
        max_steps: Some(steps),
        samples_per_epoch: steps * batch,
        ..TrainConfig::desk()
    };
    let history = train_dse(&gen, &enc, &backbone, &attention, &cfg, None)?;
    for window in history.records.chunks(100) {
        let mean = window.iter().map(|r| r.reconstruction_mse).sum::<f64>() / window.len() as f64;
        println!("steps {:>5}: batch mse {mean:.5}", window[0].step);
    }
    println!(
        "final mse {:.5} after {:.0}s",
        reconstruction_mse(&gen, &enc, &pool, 16, false)?,
        history.wall_clock_secs
    );
    Ok(())
}
