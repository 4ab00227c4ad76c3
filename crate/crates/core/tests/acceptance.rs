//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line for each and exits non-zero if any failed.
//!
//! Extra command-line words filter criteria by substring, e.g.
//! `cargo test --test acceptance -- quantizer`.

use std::path::Path;
use std::time::Instant;

use emostyle::dataset::{gen_synthetic, Dataset, Split};
use emostyle::encoders::{
    ContentTokens, EmotionLabel, StyleFeature, NUM_EMOTIONS, NUM_TOKENS, PATCH_FEATURES, STYLE_DIM,
};
use emostyle::eval::metrics::edge_iou;
use emostyle::eval::probe::{Probe, ProbeConfig};
use emostyle::eval::{
    generate, score, target_probabilities, train_gated_probe, write_report, EvalSet, StyleGroups,
};
use emostyle::generator::{
    initial_noise, integrate, sample_image, toy, PointVelocity, VelocityNetConfig,
};
use emostyle::gradsuite::{self, COMPOSED_TOLERANCE, PRIMITIVE_TOLERANCE};
use emostyle::numerics::{Optimizer, OptimizerKind, SeedRng, Tape, Tensor};
use emostyle::pipeline::{SampleSettings, Stylizer};
use emostyle::quantizer::{StyleDictionaries, StyleDictionary};
use emostyle::reasoner::{
    block, emotion_token, init_reasoner_params, reason, sublayer_param_names, ReasonerConfig,
};
use emostyle::training::*;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

/// State shared by the end-to-end criteria: one trained pipeline.
struct Trained {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    state: TrainState<f32>,
    train_seconds: f64,
}

#[derive(Default)]
struct Ctx {
    trained: Option<Trained>,
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, Criterion); 10] = [
        ("gradient suite", gradient_suite),
        ("quantizer oracle", quantizer_oracle),
        ("stage-1 clustering oracle", clustering_oracle),
        ("flow-matching toy oracle", toy_flow_oracle),
        ("exact integration", exact_integration),
        ("end-to-end benchmark", end_to_end),
        ("guidance trend", guidance_trend),
        ("emotion-score weighting", weighting_semantics),
        ("determinism and persistence", determinism),
        ("reasoner structure", reasoner_structure),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = run(&mut ctx);
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] criterion {:>2} {name}: {} ({:.1}s)",
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(outcome: emostyle::Result<Outcome>) -> Outcome {
    outcome.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")))
}

// ------------------------------------------------------------------ 1

fn gradient_suite(_: &mut Ctx) -> Outcome {
    check((|| {
        let start = Instant::now();
        let results = gradsuite::run_all(gradsuite::DEFAULT_TRIALS)?;
        let seconds = start.elapsed().as_secs_f64();
        let failed: Vec<_> = results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.clone())
            .collect();
        let worst = |tol: f64| {
            results
                .iter()
                .filter(|r| r.tolerance == tol)
                .map(|r| r.max_rel_error)
                .fold(0.0, f64::max)
        };
        let min_trials = results.iter().map(|r| r.trials).min().unwrap_or(0);
        Ok(Outcome::new(
            failed.is_empty() && min_trials >= 20 && seconds < 120.0,
            format!(
                "{} checks, >= {min_trials} trials each, worst primitive {:.1e} (<= 1e-5), worst composed {:.1e} (<= 1e-4), {seconds:.0}s (< 120s){}",
                results.len(),
                worst(PRIMITIVE_TOLERANCE),
                worst(COMPOSED_TOLERANCE),
                if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 2

/// Exhaustive scan with the lowest index winning ties.
fn scan(entries: &[Vec<f64>], q: &[f64]) -> usize {
    let d: Vec<f64> = entries
        .iter()
        .map(|e| e.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v == best).expect("non-empty")
}

fn quantizer_oracle(_: &mut Ctx) -> Outcome {
    check((|| {
        let mut rng = SeedRng::new(2024);
        let (mut agree, mut ties) = (0, 0);
        let total = 1000;
        for trial in 0..total {
            let k = 1 + rng.below(12);
            let dim = 1 + rng.below(6);
            // Small integer grids make exact distance ties common.
            let grid = |rng: &mut SeedRng| (rng.below(5) as f64) - 2.0;
            let mut entries: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| grid(&mut rng)).collect())
                .collect();
            if k > 1 && trial % 4 == 0 {
                let src = rng.below(k);
                let dst = rng.below(k);
                entries[dst] = entries[src].clone();
            }
            let q: Vec<f64> = (0..dim)
                .map(|_| grid(&mut rng) + 0.5 * rng.below(2) as f64)
                .collect();
            let emotion = EmotionLabel::ALL[trial % NUM_EMOTIONS];
            let dicts = StyleDictionaries::new(
                EmotionLabel::ALL
                    .iter()
                    .map(|&e| {
                        let own = if e == emotion {
                            entries.clone()
                        } else {
                            vec![vec![9.0; dim]]
                        };
                        StyleDictionary::new(e, own)
                    })
                    .collect::<emostyle::Result<Vec<_>>>()?,
            )?;
            let mut dicts = dicts;
            let expected = scan(&entries, &q);
            let got = dicts.quantize(&q, emotion);
            let best = entries[expected]
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let n_best = entries
                .iter()
                .filter(|e| {
                    e.iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        == best
                })
                .count();
            if n_best > 1 {
                ties += 1;
            }
            if got.k == expected
                && got.z == entries[expected]
                && dicts.get(emotion).usage[expected] == 1
            {
                agree += 1;
            }
        }
        Ok(Outcome::new(
            agree == total,
            format!(
                "{agree}/{total} agree with exhaustive scan ({ties} cases with tied distances)"
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 3

/// Planted features: 3 clusters per emotion, centers at least 1 apart.
fn planted(per_cluster: usize, seed: u64) -> (Vec<StyleSample>, Vec<Vec<Vec<f64>>>) {
    let mut rng = SeedRng::new(seed);
    let mut samples = Vec::new();
    let mut centers = Vec::new();
    for e in EmotionLabel::ALL {
        let mut ce: Vec<Vec<f64>> = Vec::new();
        while ce.len() < 3 {
            let c: Vec<f64> = (0..STYLE_DIM).map(|_| 0.5 * rng.normal()).collect();
            if ce.iter().all(|o| dist(o, &c) >= 1.0) {
                ce.push(c);
            }
        }
        for c in &ce {
            for _ in 0..per_cluster {
                samples.push(StyleSample {
                    emotion: e,
                    feature: StyleFeature(c.iter().map(|v| v + 0.05 * rng.normal()).collect()),
                    weight: 0.5 + 0.5 * rng.uniform(),
                });
            }
        }
        centers.push(ce);
    }
    (samples, centers)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn lloyd_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_stage(1);
    cfg.optimizer = OptimizerKind::Lloyd;
    cfg.epochs = epochs;
    cfg
}

fn clustering_oracle(_: &mut Ctx) -> Outcome {
    check((|| {
        let start = Instant::now();
        let (samples, centers) = planted(40, 31);
        let result = train_stage1_on(&samples, &lloyd_config(40))?;
        let seconds = start.elapsed().as_secs_f64();

        let increases = result.losses.windows(2).filter(|w| w[1] > w[0]).count();
        let (mut worst, mut covered) = (0.0f64, 0);
        for (e, ce) in EmotionLabel::ALL.iter().zip(&centers) {
            let dict = result.dictionaries.get(*e);
            let members: Vec<&StyleSample> = samples.iter().filter(|s| s.emotion == *e).collect();
            // Independent weighted centroid of each used entry's members.
            let mut owners = vec![Vec::new(); dict.k()];
            for s in &members {
                owners[scan(&dict.entries, &s.feature.0)].push(*s);
            }
            for (k, own) in owners.iter().enumerate() {
                if own.is_empty() {
                    continue;
                }
                let w: f64 = own.iter().map(|s| s.weight).sum();
                let centroid: Vec<f64> = (0..STYLE_DIM)
                    .map(|d| own.iter().map(|s| s.weight * s.feature.0[d]).sum::<f64>() / w)
                    .collect();
                worst = worst.max(dist(&centroid, &dict.entries[k]));
            }
            for c in ce {
                // Some used entry serves only this cluster.
                let serves = owners.iter().any(|own| {
                    !own.is_empty()
                        && own.iter().all(|s| {
                            let nearest = ce
                                .iter()
                                .map(|o| dist(o, &s.feature.0))
                                .fold(f64::INFINITY, f64::min);
                            dist(c, &s.feature.0) == nearest
                        })
                });
                covered += serves as usize;
            }
        }
        let planted_total = 3 * NUM_EMOTIONS;
        Ok(Outcome::new(
            worst <= 1e-3 && covered == planted_total && increases == 0 && seconds < 60.0,
            format!(
                "max entry-to-centroid distance {worst:.1e} (<= 1e-3), {covered}/{planted_total} planted clusters used, {increases} loss increases over {} epochs, {seconds:.1}s (< 60s)",
                result.losses.len()
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 4

fn toy_flow_oracle(_: &mut Ctx) -> Outcome {
    check((|| {
        let start = Instant::now();
        let params = toy::train(5000, 128, 2e-3, 1)?;
        let target_trace = 2.0 * toy::STD * toy::STD;
        let mut ok = true;
        let mut parts = Vec::new();
        for code in 0..toy::CODES {
            let s = toy::sample(&params, code, 2000, 100, 10 + code as u64)?;
            let n = (s.len() / 2) as f64;
            let mean = [0, 1].map(|d| s.iter().skip(d).step_by(2).sum::<f64>() / n);
            let trace: f64 = [0, 1]
                .iter()
                .map(|&d| {
                    s.iter()
                        .skip(d)
                        .step_by(2)
                        .map(|v| (v - mean[d]).powi(2))
                        .sum::<f64>()
                        / n
                })
                .sum();
            let err = dist(&mean, &toy::MEANS[code]);
            ok &= err <= 0.1 && (trace - target_trace).abs() <= 0.5 * target_trace;
            parts.push(format!(
                "code {code}: mean ({:.3}, {:.3}) off by {err:.3}, trace {trace:.4}",
                mean[0], mean[1]
            ));
        }
        let seconds = start.elapsed().as_secs_f64();
        Ok(Outcome::new(
            ok && seconds < 300.0,
            format!(
                "5000 steps; {} (target trace {target_trace}); {seconds:.0}s (< 300s)",
                parts.join("; ")
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 5

fn exact_integration(_: &mut Ctx) -> Outcome {
    check((|| {
        let mut rng = SeedRng::new(5);
        let x0: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.uniform()).collect();
        let model = PointVelocity { x0: x0.clone() };
        let mut worst = 0.0f64;
        for steps in [1, 10, 50] {
            for (s_style, s_content) in [(0.0, 1.0), (1.5, 1.0), (4.0, 2.0)] {
                let x = integrate(
                    &model,
                    initial_noise(x0.len(), steps as u64),
                    steps,
                    s_style,
                    s_content,
                )?;
                worst = worst.max(
                    x.iter()
                        .zip(&x0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
            }
            let img = sample_image(&model, 32, steps, 1.5, 1.0, 9)?;
            let err = img
                .data()
                .iter()
                .zip(&x0)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
        Ok(Outcome::new(
            worst <= 1e-6,
            format!("max |x - x0| = {worst:.1e} over steps 1, 10, 50 (<= 1e-6)"),
        ))
    })())
}

// ------------------------------------------------------------------ 6

fn trained(ctx: &mut Ctx) -> emostyle::Result<&Trained> {
    if ctx.trained.is_none() {
        let dir = tempfile::tempdir().map_err(|e| emostyle::Error::io("tempdir", e))?;
        gen_synthetic(dir.path(), 2000, 2, 7)?;
        let dataset = Dataset::load(dir.path())?;
        let start = Instant::now();
        let stage1 = train_stage1(&dataset, &TrainConfig::for_stage(1))?;
        let state = train_stage2(&dataset, stage1.dictionaries, &TrainConfig::for_stage(2))?;
        ctx.trained = Some(Trained {
            _dir: dir,
            dataset,
            state,
            train_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(ctx.trained.as_ref().expect("set above"))
}

fn end_to_end(ctx: &mut Ctx) -> Outcome {
    check((|| {
        let t = trained(ctx)?;
        let held = EvalSet::load(&t.dataset, Split::Test)?;
        let (probe, oracle) = train_gated_probe(&t.dataset, &held, &ProbeConfig::default())?;
        let groups = StyleGroups::from_dataset(&t.dataset, Split::Train)?;
        let sty = Stylizer::new(t.state.params()?, t.state.arch, t.state.dictionaries()?);
        let settings = SampleSettings::default();
        let generated = generate(&sty, &held, &settings)?;
        let r = score(
            &probe,
            oracle,
            &groups,
            &held,
            &generated,
            &settings,
            &t.state.config.hash(),
        )?;
        let iou_floor = r.edge_iou_reference - 0.1;
        let sd_ceiling = 1.5 * r.style_difference_reference;
        let passed = r.emo_accuracy >= 0.60
            && r.edge_iou >= iou_floor
            && r.style_difference <= sd_ceiling
            && t.train_seconds <= 1800.0;
        Ok(Outcome::new(
            passed,
            format!(
                "{} held-out images; Emo-A {:.3} (>= 0.60; oracle {:.3}, 0.8 x oracle = {:.3}), edge IoU {:.3} (>= {iou_floor:.3}), SD {:.3} (<= {sd_ceiling:.3}), training {:.0}s (<= 1800s)",
                held.triplets.len(),
                r.emo_accuracy,
                oracle,
                0.8 * oracle,
                r.edge_iou,
                r.style_difference,
                t.train_seconds
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 7

/// Adjacent steps that go the wrong way.
fn inversions(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

fn guidance_trend(ctx: &mut Ctx) -> Outcome {
    check((|| {
        let t = trained(ctx)?;
        let held = EvalSet::load(&t.dataset, Split::Test)?;
        let (probe, _) = train_gated_probe(&t.dataset, &held, &ProbeConfig::default())?;
        let sty = Stylizer::new(t.state.params()?, t.state.arch, t.state.dictionaries()?);
        let (mut probs, mut ious) = (Vec::new(), Vec::new());
        for s_style in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let settings = SampleSettings {
                s_style,
                ..Default::default()
            };
            let generated = generate(&sty, &held, &settings)?;
            let p = target_probabilities(&probe, &generated)?;
            probs.push(p.iter().sum::<f64>() / p.len() as f64);
            let iou = held
                .content
                .iter()
                .zip(&generated)
                .map(|(c, (g, _))| edge_iou(c, g))
                .collect::<emostyle::Result<Vec<_>>>()?;
            ious.push(iou.iter().sum::<f64>() / iou.len() as f64);
        }
        let (pi, ii) = (inversions(&probs, true), inversions(&ious, false));
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        Ok(Outcome::new(
            pi <= 1 && ii <= 1,
            format!(
                "s_style 0/0.5/1/2/4: target probability {} ({pi} inversions), edge IoU {} ({ii} inversions), at most 1 each",
                fmt(&probs),
                fmt(&ious)
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 8

fn small_arch() -> Arch {
    Arch {
        reasoner: ReasonerConfig {
            width: 16,
            heads: 2,
            blocks: 1,
            mlp_hidden: 32,
            style_dim: STYLE_DIM,
        },
        vnet: VelocityNetConfig {
            channels: 8,
            blocks: 1,
            cond_dim: 16,
            content_dim: 16,
            style_dim: STYLE_DIM,
            size: 8,
        },
    }
}

fn random_pairs(n: usize, seed: u64) -> Vec<PairSample<f64>> {
    let mut rng = SeedRng::new(seed);
    (0..n)
        .map(|i| PairSample {
            id: i as u64,
            emotion: EmotionLabel::ALL[i % NUM_EMOTIONS],
            weight: 0.5 + 0.5 * rng.uniform(),
            patches: Tensor::randn(&[NUM_TOKENS, PATCH_FEATURES], 1.0, &mut rng),
            content: Tensor::randn(&[3, 8, 8], 0.3, &mut rng),
            stylized: Tensor::randn(&[3, 8, 8], 0.3, &mut rng),
            style: (0..STYLE_DIM).map(|_| rng.normal()).collect(),
        })
        .collect()
}

fn weighting_semantics(_: &mut Ctx) -> Outcome {
    check((|| {
        // Stage 1: a zero-weight sample changes nothing, bit for bit.
        let (samples, _) = planted(6, 8);
        let cfg = TrainConfig::for_stage(1);
        let init = stage1_init(&samples, &cfg)?;
        let mut ghost = samples[3].clone();
        ghost.weight = 0.0;
        ghost.feature.0.iter_mut().for_each(|v| *v += 3.0);
        let run1 = |batch: Vec<&StyleSample>| -> emostyle::Result<_> {
            let mut d = init.clone();
            let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 1e-2);
            for _ in 0..3 {
                stage1_step(&mut d, &mut opt, &batch)?;
            }
            Ok((d, opt))
        };
        let without = run1(samples.iter().collect())?;
        let with = run1(samples.iter().chain(std::iter::once(&ghost)).collect())?;
        let stage1_same = without == with;

        // Stage 2: the same for the joint objective.
        let arch = small_arch();
        let pairs = random_pairs(6, 9);
        let dicts = stage1_init(&samples, &cfg)?;
        let mut zero = random_pairs(1, 10).remove(0);
        zero.weight = 0.0;
        zero.id = 99;
        let s2cfg = TrainConfig::for_stage(2);
        let run2 = |batch: Vec<&PairSample<f64>>| -> emostyle::Result<_> {
            let mut params = init_model::<f64>(&arch, 3);
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
            let draws = batch
                .iter()
                .map(|s| draw_for(s, &s2cfg, 0))
                .collect::<emostyle::Result<Vec<_>>>()?;
            let b: Vec<_> = batch.iter().copied().zip(draws.iter()).collect();
            for _ in 0..2 {
                stage2_step(&mut params, &mut opt, &arch, &dicts, &b, 1.0)?;
            }
            Ok((params, opt))
        };
        let mut with_zero: Vec<&PairSample<f64>> = pairs.iter().collect();
        with_zero.insert(2, &zero);
        let stage2_same = run2(pairs.iter().collect())? == run2(with_zero)?;

        // Rescaling every e_n leaves the converged dictionaries in place.
        let base = train_stage1_on(&samples, &lloyd_config(30))?.dictionaries;
        let mut drift = 0.0f64;
        // Scores stay in (0, 1], so the largest upscale maps the top weight to 1.
        let top = samples.iter().map(|s| s.weight).fold(0.0, f64::max);
        for c in [0.01, 0.37, 1.0 / top] {
            let mut scaled_samples = samples.clone();
            scaled_samples
                .iter_mut()
                .for_each(|s| s.weight = (s.weight * c).min(1.0));
            let scaled = train_stage1_on(&scaled_samples, &lloyd_config(30))?.dictionaries;
            for (a, b) in base.iter().zip(scaled.iter()) {
                for (x, y) in a.entries.iter().zip(&b.entries) {
                    drift = drift.max(dist(x, y));
                }
            }
        }
        Ok(Outcome::new(
            stage1_same && stage2_same && drift <= 1e-6,
            format!(
                "zero-weight sample bit-identical: stage 1 {stage1_same}, stage 2 {stage2_same}; fixed-point drift under rescaling {drift:.1e} (<= 1e-6)"
            ),
        ))
    })())
}

// ------------------------------------------------------------------ 9

struct RunArtifacts {
    manifest: Vec<u8>,
    checkpoint: Vec<u8>,
    images: Vec<Vec<u8>>,
    report: Vec<u8>,
}

fn pipeline_run(dir: &Path) -> emostyle::Result<RunArtifacts> {
    gen_synthetic(dir, 96, 2, 11)?;
    let dataset = Dataset::load(dir)?;
    let mut s1 = TrainConfig::for_stage(1);
    s1.epochs = 3;
    let stage1 = train_stage1(&dataset, &s1)?;
    let mut s2 = TrainConfig::for_stage(2);
    s2.epochs = 1;
    let state = train_stage2(&dataset, stage1.dictionaries, &s2)?;
    let ckpt = dir.join("model.ckpt");
    state.save(&ckpt)?;

    let held = EvalSet::load(&dataset, Split::Test)?;
    let sty = Stylizer::new(state.params()?, state.arch, state.dictionaries()?);
    let settings = SampleSettings {
        steps: 4,
        ..Default::default()
    };
    let generated = generate(&sty, &held, &settings)?;
    let train: Vec<_> = dataset
        .split(Split::Train)
        .iter()
        .map(|t| Ok((dataset.stylized(t)?, t.emotion)))
        .collect::<emostyle::Result<_>>()?;
    let probe = Probe::train(
        &train,
        &ProbeConfig {
            epochs: 2,
            ..Default::default()
        },
    )?;
    let accuracy = probe.accuracy(&held.stylized)?;
    let groups = StyleGroups::from_dataset(&dataset, Split::Train)?;
    let report = score(
        &probe,
        accuracy,
        &groups,
        &held,
        &generated,
        &settings,
        &state.config.hash(),
    )?;
    let report_path = dir.join("report.jsonl");
    write_report(&report, &report_path)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| emostyle::Error::io(p, e));
    Ok(RunArtifacts {
        manifest: read(&dir.join(emostyle::dataset::MANIFEST))?,
        checkpoint: read(&ckpt)?,
        images: generated
            .iter()
            .map(|(g, _)| g.to_rgb8().into_raw())
            .collect(),
        report: read(&report_path)?,
    })
}

fn determinism(_: &mut Ctx) -> Outcome {
    check((|| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| emostyle::Error::InvalidArgument(e.to_string()))?;
        pool.install(|| {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            let ra = pipeline_run(a.path())?;
            let rb = pipeline_run(b.path())?;
            let same_data = ra.manifest == rb.manifest;
            let same_ckpt = ra.checkpoint == rb.checkpoint;
            let same_images = ra.images == rb.images;
            let same_report = ra.report == rb.report;

            // Save/load round trip.
            let loaded = TrainState::<f32>::load(&a.path().join("model.ckpt"))?;
            let again = a.path().join("again.ckpt");
            loaded.save(&again)?;
            let round_trip = std::fs::read(&again).map_err(|e| emostyle::Error::io(&again, e))? == ra.checkpoint;

            // Two epochs straight versus one, save, load and one more.
            let dataset = Dataset::load(a.path())?;
            let pairs = pair_samples::<f32>(&dataset, Split::Train)?;
            let dicts = TrainState::<f32>::load(&a.path().join("model.ckpt"))?.dictionaries;
            let mut cfg = TrainConfig::for_stage(2);
            cfg.epochs = 2;
            let mut straight = TrainState::<f32>::new(cfg.clone(), Arch::default());
            straight.dictionaries = dicts.clone();
            run_stage2(&mut straight, &pairs, |_, _| {})?;

            let mut first = TrainState::<f32>::new(TrainConfig { epochs: 1, ..cfg.clone() }, Arch::default());
            first.dictionaries = dicts;
            run_stage2(&mut first, &pairs, |_, _| {})?;
            let mid = a.path().join("mid.ckpt");
            first.save(&mid)?;
            let mut resumed = TrainState::<f32>::load(&mid)?;
            resumed.reconfigure(cfg);
            run_stage2(&mut resumed, &pairs, |_, _| {})?;
            let resume_same = resumed.to_checkpoint().to_bytes() == straight.to_checkpoint().to_bytes();

            let all = same_data && same_ckpt && same_images && same_report && round_trip && resume_same;
            Ok(Outcome::new(
                all,
                format!(
                    "single thread, repeated run identical: dataset {same_data}, checkpoint {same_ckpt}, samples {same_images}, report {same_report}; round trip byte-exact {round_trip}; resume equals uninterrupted {resume_same}"
                ),
            ))
        })
    })())
}

// ------------------------------------------------------------------ 10

fn reasoner_structure(_: &mut Ctx) -> Outcome {
    check((|| {
        // Zeroed sublayers: every block is the identity on its input.
        let cfg = ReasonerConfig::default();
        let mut params = init_reasoner_params::<f64>(&cfg, &mut SeedRng::new(1));
        for name in sublayer_param_names(&cfg) {
            params
                .get_mut(&name)
                .expect("sublayer")
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        // An identity head exposes the emotion token as the query.
        let head = params.get_mut("reasoner.head.weight").expect("head");
        head.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..cfg.width.min(cfg.style_dim) {
            head.data_mut()[i * cfg.style_dim + i] = 1.0;
        }
        let mut rng = SeedRng::new(2);
        let content = ContentTokens {
            tokens: Tensor::randn(&[NUM_TOKENS, cfg.width], 1.0, &mut rng),
            raw_features: None,
        };
        let mut identity = true;
        for e in EmotionLabel::ALL {
            let mut tape = Tape::new();
            let c = tape.constant(content.tokens.clone());
            let tok = emotion_token(&mut tape, &params, e)?;
            let seq = tape.concat(&[tok, c])?;
            let mut x = seq;
            for i in 0..cfg.blocks {
                x = block(&mut tape, &params, &cfg, i, x)?;
            }
            identity &= tape.value(x) == tape.value(seq);
            let q = reason(&params, &cfg, e, &content)?;
            identity &= q.0 == tape.value(tok).to_f64_vec();
        }

        // Flow-matching loss sends exactly zero gradient into the reasoner.
        let arch = small_arch();
        let params = init_model::<f64>(&arch, 4);
        let (samples, _) = planted(2, 12);
        let dicts = stage1_init(&samples, &TrainConfig::for_stage(1))?;
        let pairs = random_pairs(8, 13);
        let cfg2 = TrainConfig {
            p_drop_content: 0.0,
            p_drop_style: 0.0,
            ..TrainConfig::for_stage(2)
        };
        let is_reasoner = |n: &str| {
            n.starts_with("reasoner.")
                || n.starts_with("emotion_proj.")
                || n.starts_with("content_proj.")
        };
        let (mut fm_touch, mut align_touch) = (0usize, 0usize);
        for s in &pairs {
            let draw = draw_for(s, &cfg2, 0)?;
            for (weight, counter) in [(0.0, &mut fm_touch), (1.0, &mut align_touch)] {
                let mut tape = Tape::new();
                let (loss, _) =
                    pair_objective(&mut tape, &params, &arch, &dicts, s, &draw, weight)?;
                let grads = tape.backward(loss)?.into_param_grads();
                *counter += grads
                    .iter()
                    .filter(|(n, _)| is_reasoner(n))
                    .map(|(_, g)| g.data().iter().filter(|v| **v != 0.0).count())
                    .sum::<usize>();
            }
        }
        Ok(Outcome::new(
            identity && fm_touch == 0 && align_touch > 0,
            format!(
                "zeroed sublayers exact identity {identity}; non-zero reasoner gradient entries from L_FM {fm_touch} (must be 0), from L_align {align_touch}"
            ),
        ))
    })())
}
