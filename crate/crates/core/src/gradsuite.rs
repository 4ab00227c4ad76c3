//! Finite-difference gradient suites over every differentiable primitive
//! and each composed training loss, in 64-bit at reduced sizes.

use std::time::Instant;

use crate::encoders::{project_content, EmotionLabel, NUM_TOKENS, PATCH_FEATURES};
use crate::error::Result;
use crate::generator::{fm_loss, init_velocity_params, CondVars, DropMask, VelocityNetConfig};
use crate::numerics::{grad_check, ParamSet, SeedRng, Tape, Tensor, Var};
use crate::quantizer::{style_loss, StyleDictionaries, StyleDictionary};
use crate::reasoner::{init_reasoner_params, reason_patches, ReasonerConfig};
use crate::training::{pair_objective_with, Arch, PairDraw, PairSample};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Build = for<'a> fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>;

/// One primitive: named input shapes, output shape, builder.
pub struct Primitive {
    pub name: &'static str,
    pub inputs: &'static [(&'static str, &'static [usize])],
    pub output: &'static [usize],
    pub build: Build,
}

const X46: &[(&str, &[usize])] = &[("x", &[4, 6])];
const AB46: &[(&str, &[usize])] = &[("a", &[4, 6]), ("b", &[4, 6])];

pub const PRIMITIVES: &[Primitive] = &[
    Primitive {
        name: "affine",
        inputs: &[("x", &[4, 6]), ("w", &[6, 5]), ("b", &[5])],
        output: &[4, 5],
        build: |t, v| t.affine(v[0], v[1], Some(v[2])),
    },
    Primitive {
        name: "layer_norm",
        inputs: &[("x", &[4, 6]), ("g", &[6]), ("b", &[6])],
        output: &[4, 6],
        build: |t, v| t.layer_norm(v[0], v[1], v[2]),
    },
    Primitive {
        name: "attention",
        inputs: &[("q", &[4, 6]), ("k", &[4, 6]), ("v", &[4, 6])],
        output: &[4, 6],
        build: |t, v| t.attention(v[0], v[1], v[2], 2),
    },
    Primitive {
        name: "gelu",
        inputs: X46,
        output: &[4, 6],
        build: |t, v| Ok(t.gelu(v[0])),
    },
    Primitive {
        name: "relu",
        inputs: X46,
        output: &[4, 6],
        build: |t, v| Ok(t.relu(v[0])),
    },
    Primitive {
        name: "scale",
        inputs: X46,
        output: &[4, 6],
        build: |t, v| Ok(t.scale(v[0], -1.7)),
    },
    Primitive {
        name: "sum_sq",
        inputs: X46,
        output: &[1],
        build: |t, v| Ok(t.sum_sq(v[0])),
    },
    Primitive {
        name: "add",
        inputs: AB46,
        output: &[4, 6],
        build: |t, v| t.add(v[0], v[1]),
    },
    Primitive {
        name: "sub",
        inputs: AB46,
        output: &[4, 6],
        build: |t, v| t.sub(v[0], v[1]),
    },
    Primitive {
        name: "mse",
        inputs: AB46,
        output: &[1],
        build: |t, v| t.mse(v[0], v[1]),
    },
    Primitive {
        name: "sq_dist",
        inputs: &[("a", &[6]), ("b", &[6])],
        output: &[1],
        build: |t, v| t.sq_dist(v[0], v[1]),
    },
    Primitive {
        name: "conv3x3",
        inputs: &[("x", &[2, 4, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
        output: &[3, 4, 6],
        build: |t, v| t.conv3x3(v[0], v[1], v[2]),
    },
    Primitive {
        name: "mean_rows",
        inputs: X46,
        output: &[6],
        build: |t, v| t.mean_rows(v[0]),
    },
    Primitive {
        name: "avg_pool2",
        inputs: &[("x", &[2, 4, 6])],
        output: &[2, 2, 3],
        build: |t, v| t.avg_pool2(v[0]),
    },
    Primitive {
        name: "film",
        inputs: &[("x", &[2, 4, 6]), ("g", &[2]), ("b", &[2])],
        output: &[2, 4, 6],
        build: |t, v| t.film(v[0], v[1], v[2]),
    },
    Primitive {
        name: "concat_slice",
        inputs: &[("a", &[1, 6]), ("b", &[3, 6])],
        output: &[2, 6],
        build: |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            t.slice(c, 1, 2)
        },
    },
    Primitive {
        name: "reshape",
        inputs: X46,
        output: &[6, 4],
        build: |t, v| t.reshape(v[0], &[6, 4]),
    },
    Primitive {
        name: "cross_entropy",
        inputs: &[("x", &[6])],
        output: &[1],
        build: |t, v| t.cross_entropy(v[0], 2),
    },
];

/// Max relative error of one primitive at one seed. Non-scalar outputs are
/// reduced with a mean squared error against a random target.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<f64> {
    let mut rng = SeedRng::new(seed);
    let mut params = ParamSet::new();
    for (name, shape) in p.inputs {
        params.insert(*name, Tensor::randn(shape, 1.0, &mut rng));
    }
    let target = Tensor::<f64>::randn(p.output, 1.0, &mut rng);
    let report = grad_check(
        |tape, ps| {
            let vars = p
                .inputs
                .iter()
                .map(|(n, _)| tape.param(ps, n))
                .collect::<Result<Vec<_>>>()?;
            let y = (p.build)(tape, &vars)?;
            if tape.value(y).len() == 1 {
                return Ok(y);
            }
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        },
        &params,
        STEP,
    )?;
    Ok(report.max_rel_error)
}

fn timed(
    name: &str,
    trials: usize,
    tolerance: f64,
    f: impl Fn(u64) -> Result<f64>,
) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..trials as u64 {
        worst = worst.max(f(seed)?);
    }
    Ok(SuiteResult {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn primitive_suite(trials: usize) -> Result<SuiteResult> {
    timed("primitives", trials, PRIMITIVE_TOLERANCE, |seed| {
        PRIMITIVES
            .iter()
            .try_fold(0.0f64, |m, p| Ok(m.max(check_primitive(p, seed)?)))
    })
}

/// Reduced architecture used by the composed checks.
pub fn tiny_arch() -> Arch {
    Arch {
        reasoner: ReasonerConfig {
            width: 8,
            heads: 2,
            blocks: 1,
            mlp_hidden: 12,
            style_dim: 6,
        },
        vnet: VelocityNetConfig {
            channels: 4,
            blocks: 1,
            cond_dim: 8,
            content_dim: 8,
            style_dim: 6,
            size: 4,
        },
    }
}

fn random_dicts(k: usize, dim: usize, rng: &mut SeedRng) -> Result<StyleDictionaries> {
    let dicts = EmotionLabel::ALL
        .iter()
        .map(|&e| {
            StyleDictionary::new(
                e,
                (0..k)
                    .map(|_| (0..dim).map(|_| rng.normal()).collect())
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    StyleDictionaries::new(dicts)
}

/// Prototype loss: analytic gradient with respect to every dictionary entry
/// against central differences of the loss value.
pub fn style_loss_trial(seed: u64) -> Result<f64> {
    let mut rng = SeedRng::new(seed);
    let (k, dim) = (4, 6);
    let entries: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();
    let mut dict = StyleDictionary::new(EmotionLabel::Awe, entries)?;
    let feature = crate::encoders::StyleFeature((0..dim).map(|_| rng.normal()).collect());
    let weight = 0.1 + 0.9 * rng.uniform();
    let base = style_loss(&dict, &feature, weight)?;
    let mut worst = 0.0f64;
    for j in 0..k {
        for d in 0..dim {
            let orig = dict.entries[j][d];
            dict.entries[j][d] = orig + STEP;
            let up = style_loss(&dict, &feature, weight)?.loss;
            dict.entries[j][d] = orig - STEP;
            let down = style_loss(&dict, &feature, weight)?.loss;
            dict.entries[j][d] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = if j == base.k { base.grad[d] } else { 0.0 };
            worst = worst.max((an - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Flow-matching loss over all velocity-network parameters.
pub fn flow_loss_trial(seed: u64) -> Result<f64> {
    let arch = tiny_arch();
    let cfg = arch.vnet;
    let mut rng = SeedRng::new(seed);
    let params: ParamSet<f64> = init_velocity_params(&cfg, &mut rng);
    let s = cfg.size;
    let x0 = Tensor::randn(&[3, s, s], 0.5, &mut rng);
    let eps = Tensor::randn(&[3, s, s], 1.0, &mut rng);
    let tokens = Tensor::<f64>::randn(&[NUM_TOKENS, cfg.content_dim], 1.0, &mut rng);
    let image = Tensor::<f64>::randn(&[3, s, s], 0.5, &mut rng);
    let style = Tensor::<f64>::randn(&[cfg.style_dim], 1.0, &mut rng);
    let t = 0.05 + 0.9 * rng.uniform();
    let r = grad_check(
        |tape, p| {
            let content = Some((tape.constant(tokens.clone()), tape.constant(image.clone())));
            let style = Some(tape.constant(style.clone()));
            fm_loss(tape, p, &cfg, &x0, &eps, t, CondVars { content, style })
        },
        &params,
        STEP,
    )?;
    Ok(r.max_rel_error)
}

/// Alignment loss over the reasoner and both input projections, with the
/// nearest prototype held fixed.
pub fn align_loss_trial(seed: u64) -> Result<f64> {
    let arch = tiny_arch();
    let cfg = arch.reasoner;
    let mut rng = SeedRng::new(seed);
    let params: ParamSet<f64> = init_reasoner_params(&cfg, &mut rng);
    let raw = Tensor::<f64>::randn(&[NUM_TOKENS, PATCH_FEATURES], 1.0, &mut rng);
    let dicts = random_dicts(3, cfg.style_dim, &mut rng)?;
    let emotion = EmotionLabel::ALL[rng.below(8)];
    let r = grad_check(
        |tape, p| {
            let x = tape.constant(raw.clone());
            let q = reason_patches(tape, p, &cfg, emotion, x)?;
            let z = dicts.lookup(&tape.value(q).to_f64_vec(), emotion).z;
            let zc = tape.constant(Tensor::from_f64(&[z.len()], &z)?);
            tape.sq_dist(q, zc)
        },
        &params,
        STEP,
    )?;
    Ok(r.max_rel_error)
}

/// The full weighted stage-2 objective on one triplet over every parameter.
pub fn stage2_trial(seed: u64) -> Result<f64> {
    let arch = tiny_arch();
    let mut rng = SeedRng::new(seed);
    let params: ParamSet<f64> = crate::training::init_model(&arch, seed);
    let s = arch.vnet.size;
    let sample = PairSample {
        id: 0,
        emotion: EmotionLabel::ALL[rng.below(8)],
        weight: 0.5 + 0.5 * rng.uniform(),
        patches: Tensor::randn(&[NUM_TOKENS, PATCH_FEATURES], 1.0, &mut rng),
        content: Tensor::randn(&[3, s, s], 0.5, &mut rng),
        stylized: Tensor::randn(&[3, s, s], 0.5, &mut rng),
        style: (0..arch.reasoner.style_dim).map(|_| rng.normal()).collect(),
    };
    let draw = PairDraw {
        t: 0.05 + 0.9 * rng.uniform(),
        eps: Tensor::randn(&[3, s, s], 1.0, &mut rng),
        mask: DropMask {
            drop_content: false,
            drop_style: false,
        },
    };
    let dicts = random_dicts(3, arch.reasoner.style_dim, &mut rng)?;
    // Content tokens reach the generator through a stop-gradient, so they are
    // held at their base-point values while perturbing.
    let tokens = {
        let mut tape = Tape::new();
        let raw = tape.constant(sample.patches.clone());
        let v = project_content(&mut tape, &params, raw)?;
        tape.value(v).clone()
    };
    let r = grad_check(
        |tape, p| {
            Ok(pair_objective_with(tape, p, &arch, &dicts, &sample, &draw, 1.0, Some(&tokens))?.0)
        },
        &params,
        STEP,
    )?;
    Ok(r.max_rel_error)
}

pub fn run_all(trials: usize) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        primitive_suite(trials)?,
        timed("style_loss", trials, COMPOSED_TOLERANCE, style_loss_trial)?,
        timed(
            "flow_matching_loss",
            trials,
            COMPOSED_TOLERANCE,
            flow_loss_trial,
        )?,
        timed("align_loss", trials, COMPOSED_TOLERANCE, align_loss_trial)?,
        timed("stage2_objective", trials, COMPOSED_TOLERANCE, stage2_trial)?,
    ])
}
