use proptest::prelude::*;

use emostyle::dataset::{apply_style_transform, StyleTransformSpec};
use emostyle::encoders::{encode_emotion, encode_style, EmotionLabel, StyleFeature, NUM_EMOTIONS};
use emostyle::eval::metrics::{edge_iou, ssim};
use emostyle::generator::{guidance_weights, initial_noise, integrate, PointVelocity};
use emostyle::image::Image;
use emostyle::numerics::Tensor;
use emostyle::quantizer::{lloyd_step, perplexity, style_loss, StyleDictionaries, StyleDictionary};
use emostyle::training::{Checkpoint, Stored, TrainConfig};

fn vectors(k: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k)
}

fn image(size: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, 3 * size * size)
        .prop_map(move |d| Image::new(size, size, d).unwrap())
}

fn weighted_loss(dict: &StyleDictionary, feats: &[StyleFeature], w: &[f64]) -> f64 {
    feats
        .iter()
        .zip(w)
        .map(|(f, &w)| style_loss(dict, f, w).unwrap().loss)
        .sum()
}

proptest! {
    #[test]
    fn quantize_matches_brute_force_within_the_queried_emotion(
        entries in vectors(1..10, 4),
        q in prop::collection::vec(-3.0f64..3.0, 4),
        e in 0..NUM_EMOTIONS,
    ) {
        let emotion = EmotionLabel::from_index(e).unwrap();
        let mut dicts = StyleDictionaries::new(
            EmotionLabel::ALL
                .iter()
                .map(|&l| {
                    // Other emotions hold an entry exactly at the query.
                    let own = if l == emotion { entries.clone() } else { vec![q.clone()] };
                    StyleDictionary::new(l, own).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let d: Vec<f64> = entries.iter().map(|x| x.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = d.iter().position(|&v| v == best).unwrap();
        let got = dicts.quantize(&q, emotion);
        prop_assert_eq!(got.emotion, emotion);
        prop_assert_eq!(got.k, expected);
        prop_assert_eq!(&got.z, &entries[expected]);
    }

    #[test]
    fn lloyd_steps_never_increase_the_weighted_loss(
        entries in vectors(1..6, 3),
        feats in vectors(1..40, 3),
        seed in 0u64..1000,
    ) {
        let feats: Vec<StyleFeature> = feats.into_iter().map(StyleFeature).collect();
        let w: Vec<f64> = (0..feats.len()).map(|i| 0.1 + 0.9 * (((i as u64 * 7919 + seed) % 97) as f64 / 96.0)).collect();
        let mut dict = StyleDictionary::new(EmotionLabel::Awe, entries).unwrap();
        let mut prev = weighted_loss(&dict, &feats, &w);
        for _ in 0..8 {
            lloyd_step(&mut dict, &feats, &w);
            let now = weighted_loss(&dict, &feats, &w);
            prop_assert!(now <= prev * (1.0 + 1e-12) + 1e-12, "{} > {}", now, prev);
            prev = now;
        }
    }

    #[test]
    fn uniform_rescaling_leaves_lloyd_steps_in_place(
        entries in vectors(1..6, 3),
        feats in vectors(1..30, 3),
        c in 0.01f64..1.0,
    ) {
        let feats: Vec<StyleFeature> = feats.into_iter().map(StyleFeature).collect();
        let w: Vec<f64> = (0..feats.len()).map(|i| 0.5 + 0.5 * ((i % 5) as f64 / 4.0)).collect();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let mut a = StyleDictionary::new(EmotionLabel::Fear, entries.clone()).unwrap();
        let mut b = StyleDictionary::new(EmotionLabel::Fear, entries).unwrap();
        for _ in 0..5 {
            lloyd_step(&mut a, &feats, &w);
            lloyd_step(&mut b, &feats, &scaled);
        }
        for (x, y) in a.entries.iter().zip(&b.entries) {
            for (u, v) in x.iter().zip(y) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn prototype_loss_is_zero_exactly_at_an_entry(
        entries in vectors(1..6, 5),
        pick in 0usize..6,
        nudge in prop::collection::vec(-1.0f64..1.0, 5),
        w in 0.01f64..=1.0,
    ) {
        let dict = StyleDictionary::new(EmotionLabel::Anger, entries.clone()).unwrap();
        let at = StyleFeature(entries[pick % entries.len()].clone());
        let l = style_loss(&dict, &at, w).unwrap();
        prop_assert_eq!(l.loss, 0.0);
        prop_assert!(l.grad.iter().all(|g| *g == 0.0));
        let off = StyleFeature(at.0.iter().zip(&nudge).map(|(a, b)| a + b).collect());
        let on_entry = entries.contains(&off.0);
        prop_assert_eq!(style_loss(&dict, &off, w).unwrap().loss == 0.0, on_entry);
    }

    #[test]
    fn perplexity_lies_between_one_and_the_used_count(usage in prop::collection::vec(0u64..50, 1..16)) {
        let used = usage.iter().filter(|&&u| u > 0).count();
        let p = perplexity(&usage);
        if used == 0 {
            prop_assert_eq!(p, 0.0);
        } else {
            prop_assert!(p >= 1.0 - 1e-12 && p <= used as f64 + 1e-9);
        }
    }

    #[test]
    fn guidance_coefficients_sum_to_one(s_style in -2.0f64..8.0, s_content in -2.0f64..8.0) {
        let total: f64 = guidance_weights(s_style, s_content).iter().map(|(c, _)| c).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a_single_point_field_is_integrated_exactly(
        x0 in prop::collection::vec(-2.0f64..2.0, 1..20),
        steps in 1usize..60,
        s_style in 0.0f64..5.0,
        seed in 0u64..100,
    ) {
        let model = PointVelocity { x0: x0.clone() };
        let x = integrate(&model, initial_noise(x0.len(), seed), steps, s_style, 1.0).unwrap();
        for (a, b) in x.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn style_features_are_pure(img in image(32)) {
        prop_assert_eq!(encode_style(&img).unwrap(), encode_style(&img).unwrap());
    }

    #[test]
    fn transforms_stay_in_range_and_identity_is_exact(
        img in image(32),
        hue in 0.0f64..360.0,
        sat in 0.3f64..1.8,
        gamma in 0.5f64..2.0,
        edge in 0.0f64..0.3,
        grain in 0.0f64..0.04,
        seed in 0u64..100,
    ) {
        let id = StyleTransformSpec::identity(EmotionLabel::Sadness);
        prop_assert_eq!(apply_style_transform(&img, &id, seed), img.clone());
        let spec = StyleTransformSpec {
            hue_degrees: hue,
            saturation_scale: sat,
            contrast_gamma: gamma,
            edge_darkening: edge,
            grain_amplitude: grain,
            ..id
        };
        let out = apply_style_transform(&img, &spec, seed);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn structural_metrics_are_bounded(a in image(16), b in image(16)) {
        let iou = edge_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(ssim(&a, &b).unwrap().is_finite());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_round_trip_and_reject_any_flipped_byte(
        tensors in prop::collection::vec((prop::collection::vec(1usize..5, 1..3), any::<bool>(), any::<u64>()), 1..5),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut c = Checkpoint::new();
        for (i, (shape, wide, seed)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|j| ((seed.wrapping_add(j as u64) % 1000) as f64) * 1.5e-3 - 0.7).collect();
            let t = Tensor::<f64>::new(shape, data).unwrap();
            c.push(format!("t{i}"), if *wide { Stored::F64(t) } else { Stored::F32(t.cast()) });
        }
        let bytes = c.to_bytes();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &c);
        let mut bad = bytes.clone();
        let at = flip.index(bad.len());
        bad[at] ^= 0x20;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn config_text_round_trips(
        stage in 1u8..=2,
        epochs in 1usize..100,
        batch in 1usize..64,
        lr in 1e-5f64..1e-1,
        k in 1usize..=64,
        tau in 0.0f64..1.0,
        drop in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut cfg = TrainConfig::for_stage(stage);
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.learning_rate = lr;
        cfg.k = k;
        cfg.tau = tau;
        cfg.p_drop_style = drop;
        cfg.seed = seed;
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.hash(), cfg.hash());
    }
}

#[test]
fn emotion_codes_form_the_standard_basis() {
    for (i, e) in EmotionLabel::ALL.iter().enumerate() {
        let v = encode_emotion(*e);
        for (j, x) in v.iter().enumerate() {
            assert_eq!(*x, if i == j { 1.0 } else { 0.0 });
        }
    }
}
