//! Acceptance checks. Each test prints one PASS/FAIL line with its measured
//! value and runtime; they run one at a time so the timings are honest.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use dse::attention::{
    centre_boxes, centre_views, gradcam_from_parts, gradcam_heatmap, paired_views, views, AttentionConfig,
    AttentionMode,
};
use dse::backbone::{Backbone, BackboneSpec};
use dse::encoder::{Encoder, EncoderSpec};
use dse::evalharness::{image_cosine, psnr, MetricParams};
use dse::generators::{full_scale_channels, Generator, GeneratorSpec};
use dse::inversion::{
    edit, finetune_encoder, invert_batch, optimize_w_direct, EditRequest, LatentInit, OptimizeConfig,
};
use dse::latent::{Family, LatentBundle};
use dse::layers::{to_f64_vec, CropBox};
use dse::similarity::{
    cos_loss, image_loss, kl_softmax_images, kl_softmax_loss, latent_loss, lpips_distance, mse_loss, ssim,
    total_loss, LossConfig, MseMode, SsimParams,
};
use dse::training::{
    apply_strategy_gating, reconstruct, reconstruction_mse, train_dse, SampleBatch, Strategy, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Prints the criterion's line when dropped; FAIL if the test panicked.
struct Criterion {
    id: u8,
    name: &'static str,
    budget_secs: f64,
    start: Instant,
    notes: Vec<String>,
    _serial: MutexGuard<'static, ()>,
}

impl Criterion {
    fn begin(id: u8, name: &'static str, budget_secs: f64) -> Self {
        let serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        Self {
            id,
            name,
            budget_secs,
            start: Instant::now(),
            notes: Vec::new(),
            _serial: serial,
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(&self) {
        let secs = self.start.elapsed().as_secs_f64();
        assert!(secs <= self.budget_secs, "took {secs:.1}s, budget {}s", self.budget_secs);
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        let verdict = if std::thread::panicking() { "FAIL" } else { "PASS" };
        let secs = self.start.elapsed().as_secs_f64();
        // Written straight to stdout so the line survives output capture.
        let _ = writeln!(
            std::io::stdout(),
            "\nacceptance {} {:<28} {verdict}  [{}] {secs:.1}s / {}s",
            self.id,
            self.name,
            self.notes.join("; "),
            self.budget_secs
        );
    }
}

fn f64s(t: &Tensor) -> Vec<f64> {
    to_f64_vec(t).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    f64s(t)[0]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    f64s(a).iter().zip(f64s(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-wise KL(softmax(b) ‖ softmax(a)) averaged over rows, one scalar at a time.
fn kl_oracle(a: &[f64], b: &[f64], row: usize) -> f64 {
    let softmax = |r: &[f64]| -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let rows = a.len() / row;
    let mut total = 0.0;
    for i in 0..rows {
        let pa = softmax(&a[i * row..(i + 1) * row]);
        let pb = softmax(&b[i * row..(i + 1) * row]);
        for j in 0..row {
            total += pb[j] * (pb[j].ln() - pa[j].ln());
        }
    }
    total / rows as f64
}

#[test]
fn criterion_1_metric_identities() {
    let mut c = Criterion::begin(1, "metric identities", 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
    let backbone = Backbone::seeded(BackboneSpec::desk(), 2, DType::F64).unwrap();
    let tol = 1e-6;
    let identities = [
        ("mse", scalar(&mse_loss(&x, &x, MseMode::MeanSq).unwrap()), 0.0),
        ("mse_l2", scalar(&mse_loss(&x, &x, MseMode::L2OverBatch).unwrap()), 0.0),
        ("cos", scalar(&cos_loss(&x, &x).unwrap()), 0.0),
        ("kl", scalar(&kl_softmax_images(&x, &x).unwrap()), 0.0),
        ("lpips", scalar(&lpips_distance(&x, &x, &backbone).unwrap()), 0.0),
        ("ssim", scalar(&ssim(&x, &x, &SsimParams::default()).unwrap()), 1.0),
        ("cs", image_cosine(&x, &x).unwrap(), 1.0),
    ];
    let worst = identities.iter().map(|(_, v, ideal)| (v - ideal).abs()).fold(0.0, f64::max);
    for (name, v, ideal) in identities {
        assert!((v - ideal).abs() <= tol, "{name}: {v} vs {ideal}");
    }
    assert_eq!(psnr(&x, &x, 2.0).unwrap(), f64::INFINITY);
    c.note(format!("self-pair worst {worst:.1e}"));

    let mut kl_err: f64 = 0.0;
    for (shape, row) in [(vec![5, 7], 7), (vec![2, 3, 11], 11), (vec![1, 64], 64)] {
        let a = uniform(&mut rng, &shape, -3.0, 3.0);
        let b = uniform(&mut rng, &shape, -3.0, 3.0);
        let got = scalar(&kl_softmax_loss(&a, &b).unwrap());
        let want = kl_oracle(&f64s(&a), &f64s(&b), row);
        kl_err = kl_err.max((got - want).abs());
    }
    assert!(kl_err <= 1e-9, "kl oracle error {kl_err:e}");
    c.note(format!("kl oracle {kl_err:.1e}"));

    let params = SsimParams::default();
    let c1 = (0.01 * params.dynamic_range).powi(2);
    let mut ssim_err: f64 = 0.0;
    for (p, q) in [(0.3, -0.2), (0.9, 0.9), (-1.0, 1.0), (0.0, 0.5)] {
        let a = Tensor::full(p, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let b = Tensor::full(q, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let got = scalar(&ssim(&a, &b, &params).unwrap());
        let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
        ssim_err = ssim_err.max((got - want).abs());
    }
    assert!(ssim_err <= 1e-6, "constant-image ssim error {ssim_err:e}");
    c.note(format!("ssim closed form {ssim_err:.1e}"));
    c.finish();
}

#[test]
fn criterion_2_gradient_check() {
    let mut c = Criterion::begin(2, "gradient check", 120.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let backbone = Backbone::seeded(BackboneSpec::desk(), 4, DType::F64).unwrap();
    let attention = AttentionConfig::default();
    let cfg = LossConfig {
        ssim: SsimParams { window: 5, ..SsimParams::default() },
        ..LossConfig::default()
    };
    let x = uniform(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let w = uniform(&mut rng, &[1, 16], -1.0, 1.0);
    let x_hat0 = uniform(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let w_hat0 = uniform(&mut rng, &[1, 16], -1.0, 1.0);
    let views = centre_views(&x, &attention).unwrap();
    let loss = |x_hat: &Tensor, w_hat: &Tensor| {
        let image = image_loss(&views, &centre_views(x_hat, &attention).unwrap(), &cfg, &backbone).unwrap();
        let latent = latent_loss(&w, w_hat, &cfg).unwrap();
        total_loss(&image, &latent, &cfg.weights).unwrap().value
    };

    let xv = Var::from_tensor(&x_hat0).unwrap();
    let wv = Var::from_tensor(&w_hat0).unwrap();
    let grads = loss(xv.as_tensor(), wv.as_tensor()).backward().unwrap();
    let analytic = [f64s(grads.get(xv.as_tensor()).unwrap()), f64s(grads.get(wv.as_tensor()).unwrap())];

    let h = 1e-6;
    let bases = [x_hat0.clone(), w_hat0.clone()];
    let mut worst: f64 = 0.0;
    for (which, base) in bases.iter().enumerate() {
        let flat = f64s(base);
        let g_max = analytic[which].iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..flat.len() {
            let shifted = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                Tensor::from_vec(v, base.dims(), &Device::Cpu).unwrap()
            };
            let eval = |t: Tensor| {
                if which == 0 {
                    scalar(&loss(&t, &w_hat0))
                } else {
                    scalar(&loss(&x_hat0, &t))
                }
            };
            let fd = (eval(shifted(h)) - eval(shifted(-h))) / (2.0 * h);
            let a = analytic[which][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * g_max);
            worst = worst.max(rel);
        }
    }
    c.note(format!("worst relative error {worst:.2e} over {} coords", 3 * 64 + 16));
    assert!(worst <= 1e-3, "relative error {worst:e}");
    c.finish();
}

/// Widths of the published tables, encoder order: `min(512, 2^14 / R · 2^k)`.
fn table_widths(resolution: usize) -> Vec<usize> {
    let blocks = resolution.trailing_zeros() as usize - 1;
    (0..blocks).map(|k| ((16384 / resolution) << k).min(512)).collect()
}

#[test]
fn criterion_3_architecture() {
    let mut c = Criterion::begin(3, "architecture conformance", 60.0);
    let columns = [
        (Family::Style, 256),
        (Family::Style, 512),
        (Family::Style, 1024),
        (Family::Progressive, 1024),
        (Family::ClassConditional, 128),
        (Family::ClassConditional, 256),
        (Family::ClassConditional, 512),
    ];
    for (family, res) in columns {
        let spec = EncoderSpec::mirror(&GeneratorSpec::full_scale(family, res), false);
        let widths = table_widths(res);
        assert_eq!(spec.channel_schedule, widths, "{family} {res}");
        for (k, b) in spec.blocks().iter().enumerate() {
            let cw = widths[k];
            let mut want = vec![(cw, cw, 3)];
            if k + 1 < widths.len() {
                want.push((cw, widths[k + 1], 3));
            }
            assert_eq!(b.convs, want, "{family} {res} block {k}");
            assert_eq!(b.has_style_fc, family == Family::Style);
        }
    }
    c.note("7 table columns");

    let spec = EncoderSpec::mirror(&GeneratorSpec::full_scale(Family::Style, 1024), false);
    let enc = Encoder::build(spec.clone(), 0, DType::F32).unwrap();
    let built: Vec<Vec<(usize, usize, usize)>> = enc.conv_shapes();
    let declared: Vec<Vec<(usize, usize, usize)>> = spec.blocks().into_iter().map(|b| b.convs).collect();
    assert_eq!(built, declared);
    assert_eq!(enc.conv_shapes()[0][0], (16, 16, 3));
    let named: Vec<(String, Vec<usize>)> = enc
        .store()
        .named_params()
        .into_iter()
        .map(|(n, v)| (n.clone(), v.dims().to_vec()))
        .collect();
    let slices = named
        .iter()
        .filter(|(n, _)| n.ends_with(".style.weight") || n == "tail.w.weight")
        .inspect(|(n, d)| assert_eq!(d[0], 512, "{n}"))
        .count();
    assert_eq!(slices, 18, "style slices");
    let offset = named.iter().find(|(n, _)| n == "tail.z_c_offset").unwrap();
    assert_eq!(offset.1, vec![512, 4, 4]);
    let head = named.iter().find(|(n, _)| n == "tail.z_c.weight").unwrap();
    assert_eq!(head.1[0], 512);
    assert_eq!(full_scale_channels(4), 512);
    c.note(format!("1024 style: w' (n, {slices}, 512), z_c' (n, 512, 4, 4), {} params", enc.num_parameters()));
    drop(enc);

    for family in [Family::Style, Family::Progressive, Family::ClassConditional] {
        for fused in [false, true] {
            let gen = GeneratorSpec::desk(family, 32);
            let spec = EncoderSpec::mirror(&gen, fused);
            let enc = Encoder::build(spec.clone(), 1, DType::F32).unwrap();
            let declared: Vec<Vec<(usize, usize, usize)>> = spec.blocks().into_iter().map(|b| b.convs).collect();
            assert_eq!(enc.conv_shapes(), declared);
            let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
            let traced = enc.trace_block_shapes(&x).unwrap();
            let inferred: Vec<Vec<usize>> = spec.infer_block_shapes(2).iter().map(|s| s.to_vec()).collect();
            assert_eq!(traced, inferred, "{family} fused={fused}");
            if let LatentBundle::Style { w, z_c, .. } = enc.encode(&x, None).unwrap() {
                assert_eq!(w.dims(), &[2, gen.n_layers(), gen.d_w]);
                assert_eq!(z_c.unwrap().dims(), &[2, gen.const_channels(), 4, 4]);
            }
        }
    }
    c.note("desk encoders traced");
    c.finish();
}

fn encoder_grad_norm(strategy: Strategy) -> f64 {
    let gen = Generator::toy(GeneratorSpec::desk(Family::Style, 16), 3, DType::F32).unwrap();
    let enc = Encoder::build(EncoderSpec::mirror(gen.spec(), strategy.fused_scale()), 4, DType::F32).unwrap();
    let backbone = Backbone::seeded(BackboneSpec::desk(), 5, DType::F32).unwrap();
    let attention = AttentionConfig::default();
    let batch = SampleBatch::draw(&gen, 3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (_, x_hat) = reconstruct(&gen, &enc, &batch.images, None, false).unwrap();
    let (views, views_hat) = paired_views(&batch.images, &x_hat, &attention, &backbone).unwrap();
    let views_hat = apply_strategy_gating(strategy, &views_hat);
    // Original-scale term alone.
    let cfg = LossConfig::with_weights(dse::LossWeights::default().with_attention(0.0, 0.0));
    let loss = image_loss(&views, &views_hat, &cfg, &backbone).unwrap();
    let grads = loss.value.backward().unwrap();
    enc.trainable_vars()
        .iter()
        .filter_map(|v| grads.get(v.as_tensor()))
        .map(|g| f64s(g).iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn criterion_4_strategy_gating() {
    let mut c = Criterion::begin(4, "strategy gating", 60.0);
    let one = encoder_grad_norm(Strategy::One);
    let two = encoder_grad_norm(Strategy::Two);
    c.note(format!("strategy 1 grad norm {one:e}, strategy 2 {two:.3e}"));
    assert_eq!(one, 0.0);
    assert!(two > 0.0 && two.is_finite());
    c.finish();
}

#[test]
fn criterion_5_overfit() {
    let mut c = Criterion::begin(5, "desk overfit", 900.0);
    let gen = Generator::toy(GeneratorSpec::desk(Family::Style, 32), 7, DType::F32).unwrap();
    let enc = Encoder::build(EncoderSpec::mirror(gen.spec(), false), 11, DType::F32).unwrap();
    enc.anchor_to(&gen, 256, 11).unwrap();
    let backbone = Backbone::seeded(BackboneSpec::desk(), 3, DType::F32).unwrap();
    let pool_seed = 5;
    let pool = SampleBatch::draw(&gen, 64, &mut ChaCha8Rng::seed_from_u64(pool_seed)).unwrap();
    let initial = reconstruction_mse(&gen, &enc, &pool, 16, false).unwrap();
    let steps = 2000;
    let batch = 4;
    let cfg = TrainConfig {
        strategy: Strategy::One,
        batch_size: batch,
        fixed_pool: Some(64),
        seed: pool_seed,
        max_steps: Some(steps),
        samples_per_epoch: steps * batch,
        ..TrainConfig::desk()
    };
    assert_eq!((cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2), (0.0015, 0.0, 0.99));
    let history = train_dse(&gen, &enc, &backbone, &AttentionConfig::default(), &cfg, None).unwrap();
    let fin = reconstruction_mse(&gen, &enc, &pool, 16, false).unwrap();
    c.note(format!("mse {initial:.4} -> {fin:.4} in {} steps", history.records.len()));
    assert!(history.records.len() <= steps);
    assert!(fin < 0.02, "final reconstruction mse {fin}");
    c.finish();
}

#[test]
fn criterion_6_inversion_ordering() {
    let mut c = Criterion::begin(6, "inversion ordering", 600.0);
    let gen = Generator::toy(GeneratorSpec::desk(Family::Style, 32), 7, DType::F32).unwrap();
    let enc = Encoder::build(EncoderSpec::mirror(gen.spec(), false), 21, DType::F32).unwrap();
    enc.anchor_to(&gen, 256, 21).unwrap();
    let backbone = Backbone::seeded(BackboneSpec::desk(), 3, DType::F32).unwrap();
    let attention = AttentionConfig::default();
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 8,
        max_steps: Some(300),
        samples_per_epoch: 1200,
        ..TrainConfig::desk()
    };
    train_dse(&gen, &enc, &backbone, &attention, &cfg, None).unwrap();
    let held_out = SampleBatch::draw(&gen, 8, &mut ChaCha8Rng::seed_from_u64(1234)).unwrap();
    let single = invert_batch(&enc, &gen, &held_out.images, None, &backbone, &MetricParams::default()).unwrap();
    let tuned_cfg = OptimizeConfig { steps: 200, ..OptimizeConfig::default() };
    let tuned = finetune_encoder(&enc, &gen, &held_out.images, None, &backbone, &attention, &tuned_cfg).unwrap();
    let wins = single
        .metrics
        .iter()
        .zip(&tuned.metrics)
        .filter(|(s, t)| t.mse() < s.mse())
        .count();
    let mean = |rows: &[dse::evalharness::MetricRow]| rows.iter().map(|r| r.mse()).sum::<f64>() / rows.len() as f64;
    c.note(format!(
        "fine-tuned wins {wins}/8 (mse {:.4} vs {:.4})",
        mean(&tuned.metrics),
        mean(&single.metrics)
    ));
    assert!(wins >= 7, "fine-tuning beat one-pass inversion on {wins}/8");

    let targets = SampleBatch::draw(&gen, 4, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let direct_cfg = OptimizeConfig::direct();
    let direct =
        optimize_w_direct(&gen, &targets.images, LatentInit::Random(1), &backbone, &attention, &direct_cfg).unwrap();
    let worst = direct.metrics.iter().map(|r| r.mse()).fold(0.0, f64::max);
    c.note(format!("direct self-inversion worst mse {worst:.2e} after {} steps", direct.steps_used));
    assert!(direct.steps_used <= 1000);
    assert!(worst < 1e-3, "direct optimization mse {worst}");
    c.finish();
}

#[test]
fn criterion_7_attention_properties() {
    let mut c = Criterion::begin(7, "attention properties", 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let acts = uniform(&mut rng, &[3, 6, 5, 5], -1.0, 2.0);
        let grads = uniform(&mut rng, &[3, 6, 5, 5], -1.0, 1.0);
        let cam = gradcam_from_parts(&acts, &grads).unwrap();
        for sample in f64s(&cam).chunks(25) {
            assert!(sample.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = sample.iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || (max - 1.0).abs() <= 1e-12, "max {max}");
        }
        for k in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = gradcam_from_parts(&acts, &(&grads * k).unwrap()).unwrap();
            assert!(max_abs_diff(&cam, &scaled) <= 1e-6);
        }
    }
    let backbone = Backbone::seeded(BackboneSpec::desk(), 8, DType::F64).unwrap();
    let img = uniform(&mut rng, &[2, 3, 32, 32], -1.0, 1.0);
    let base = gradcam_heatmap(&img, &backbone, 4, None).unwrap();
    let mut heat_err: f64 = 0.0;
    for k in [0.25, 4.0] {
        let scaled = gradcam_heatmap(&img, &backbone.with_scaled_classifier(k).unwrap(), 4, Some(&base.classes)).unwrap();
        heat_err = heat_err.max(max_abs_diff(&base.maps, &scaled.maps));
    }
    assert!(heat_err <= 1e-6, "heat map changed under gradient scaling by {heat_err:e}");
    c.note(format!("cam in [0,1], max 1, scale drift {heat_err:.1e}"));

    for side in [8, 16, 31, 32, 64, 1024] {
        for (f1, f2) in [(0.625, 0.375), (1.0, 1.0), (0.9, 0.1), (0.5, 0.5)] {
            let cfg = AttentionConfig { crop_frac_at1: f1, crop_frac_at2: f2, ..AttentionConfig::default() };
            let (b1, b2) = centre_boxes(side, &cfg);
            assert!(CropBox::full(side, side).contains(&b1));
            assert!(b1.contains(&b2), "side {side} fracs ({f1}, {f2})");
        }
    }
    c.note("centre crops nested");

    for cfg in [AttentionConfig::default(), AttentionConfig::gradcam()] {
        let a = views(&img, &cfg, &backbone).unwrap();
        let b = views(&img, &cfg, &backbone).unwrap();
        for (u, v) in [(Some(&a.orig), Some(&b.orig)), (a.at1.as_ref(), b.at1.as_ref()), (a.at2.as_ref(), b.at2.as_ref())] {
            assert_eq!(f64s(u.unwrap()), f64s(v.unwrap()), "{:?}", cfg.mode);
        }
    }
    assert!(matches!(AttentionConfig::gradcam().mode, AttentionMode::Gradcam));
    c.note("views deterministic in both modes");
    c.finish();
}

#[test]
fn criterion_8_edit_algebra() {
    let mut c = Criterion::begin(8, "edit algebra", 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = uniform(&mut rng, &[3, 8, 16], -2.0, 2.0);
    let mut worst: f64 = 0.0;
    for layers in [None, Some(vec![0, 3, 7])] {
        for direction in [uniform(&mut rng, &[16], -1.0, 1.0), uniform(&mut rng, &[8, 16], -1.0, 1.0)] {
            let req = |alpha: f64| EditRequest { direction: direction.clone(), alpha, layers: layers.clone() };
            let identity = edit(&w, &req(0.0)).unwrap();
            worst = worst.max(max_abs_diff(&identity, &w));
            let there = edit(&w, &req(1.7)).unwrap();
            let back = edit(&there, &req(-1.7)).unwrap();
            worst = worst.max(max_abs_diff(&back, &w));
            let (a, b) = (0.6, -2.3);
            let sum = edit(&w, &req(a + b)).unwrap();
            let chained = edit(&edit(&w, &req(a)).unwrap(), &req(b)).unwrap();
            worst = worst.max(max_abs_diff(&sum, &chained));
            let shift_a = (edit(&w, &req(a)).unwrap() - &w).unwrap();
            let shift_3a = (edit(&w, &req(3.0 * a)).unwrap() - &w).unwrap();
            worst = worst.max(max_abs_diff(&(shift_a * 3.0).unwrap(), &shift_3a));
        }
    }
    c.note(format!("worst deviation {worst:.1e}"));
    assert!(worst <= 1e-6);
    c.finish();
}
