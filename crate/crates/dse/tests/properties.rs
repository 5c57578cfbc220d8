//! Invariants of the losses, metrics, attention geometry and edits.

use candle_core::{Device, Tensor};
use dse::attention::{centre_boxes, gradcam_from_parts, AttentionConfig};
use dse::evalharness::{image_cosine, psnr};
use dse::inversion::{edit, EditRequest};
use dse::layers::{to_f64_vec, CropBox};
use dse::similarity::{cos_loss, kl_softmax_loss, mse_loss, ssim, LossWeights, MseMode, SsimParams};
use proptest::prelude::*;

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn value(t: &Tensor) -> f64 {
    to_f64_vec(t).unwrap()[0]
}

fn images() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let n = 2 * 3 * 8 * 8;
    (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))
}

const IMG: [usize; 4] = [2, 3, 8, 8];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mse_is_symmetric_and_nonnegative((a, b) in images()) {
        let (x, y) = (tensor(a, &IMG), tensor(b, &IMG));
        for mode in [MseMode::MeanSq, MseMode::L2OverBatch] {
            let ab = value(&mse_loss(&x, &y, mode).unwrap());
            let ba = value(&mse_loss(&y, &x, mode).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_loss_lies_in_zero_two((a, b) in images()) {
        let v = value(&cos_loss(&tensor(a, &IMG), &tensor(b, &IMG)).unwrap());
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
    }

    #[test]
    fn kl_is_nonnegative_and_shift_invariant(
        a in prop::collection::vec(-4.0f64..4.0, 12),
        b in prop::collection::vec(-4.0f64..4.0, 12),
        shift in -10.0f64..10.0,
    ) {
        let (x, y) = (tensor(a.clone(), &[3, 4]), tensor(b, &[3, 4]));
        let kl = value(&kl_softmax_loss(&x, &y).unwrap());
        prop_assert!(kl >= -1e-12);
        let shifted = tensor(a.iter().map(|v| v + shift).collect(), &[3, 4]);
        let kl_shift = value(&kl_softmax_loss(&shifted, &y).unwrap());
        prop_assert!((kl - kl_shift).abs() <= 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_at_most_one((a, b) in images()) {
        let (x, y) = (tensor(a, &IMG), tensor(b, &IMG));
        let p = SsimParams { window: 5, ..SsimParams::default() };
        let ab = value(&ssim(&x, &y, &p).unwrap());
        let ba = value(&ssim(&y, &x, &p).unwrap());
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn psnr_and_cosine_are_symmetric((a, b) in images()) {
        let (x, y) = (tensor(a, &IMG), tensor(b, &IMG));
        prop_assert_eq!(psnr(&x, &y, 2.0).unwrap(), psnr(&y, &x, 2.0).unwrap());
        let c = image_cosine(&x, &y).unwrap();
        prop_assert!((c - image_cosine(&y, &x).unwrap()).abs() <= 1e-12);
        prop_assert!(c.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn centre_crops_nest(side in 4usize..300, f1 in 0.05f64..1.0, ratio in 0.05f64..1.0) {
        let cfg = AttentionConfig { crop_frac_at1: f1, crop_frac_at2: f1 * ratio, ..AttentionConfig::default() };
        let (b1, b2) = centre_boxes(side, &cfg);
        prop_assert!(CropBox::full(side, side).contains(&b1));
        prop_assert!(b1.contains(&b2));
    }

    #[test]
    fn gradcam_is_bounded_and_gradient_scale_invariant(
        acts in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 9),
        grads in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 9),
        k in 1e-3f64..1e3,
    ) {
        let acts = tensor(acts, &[2, 4, 3, 3]);
        let grads = tensor(grads, &[2, 4, 3, 3]);
        let cam = to_f64_vec(&gradcam_from_parts(&acts, &grads).unwrap()).unwrap();
        prop_assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
        let scaled = to_f64_vec(&gradcam_from_parts(&acts, &(&grads * k).unwrap()).unwrap()).unwrap();
        for (u, v) in cam.iter().zip(&scaled) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn edits_compose_additively(
        w in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 5),
        d in prop::collection::vec(-1.0f64..1.0, 5),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        layer in 0usize..4,
    ) {
        let w = tensor(w, &[2, 4, 5]);
        let req = |alpha: f64| EditRequest { direction: tensor(d.clone(), &[5]), alpha, layers: Some(vec![layer]) };
        let once = to_f64_vec(&edit(&w, &req(a + b)).unwrap()).unwrap();
        let twice = to_f64_vec(&edit(&edit(&w, &req(a)).unwrap(), &req(b)).unwrap()).unwrap();
        for (u, v) in once.iter().zip(&twice) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
        let untouched = to_f64_vec(&edit(&w, &req(a)).unwrap()).unwrap();
        let orig = to_f64_vec(&w).unwrap();
        for (i, (u, v)) in untouched.iter().zip(&orig).enumerate() {
            if (i / 5) % 4 != layer {
                prop_assert_eq!(u, v);
            }
        }
    }

    #[test]
    fn negative_loss_weights_are_rejected(v in -10.0f64..-1e-9) {
        let alpha = LossWeights { alpha: v, ..LossWeights::default() };
        let epsilon = LossWeights { epsilon: v, ..LossWeights::default() };
        prop_assert!(alpha.validate().is_err());
        prop_assert!(epsilon.validate().is_err());
    }
}
