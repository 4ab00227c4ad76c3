//! Two-stage training: prototype learning on frozen style features, then
//! emotion-style alignment jointly with the flow-matching generator.

mod checkpoint;
mod config;

use rayon::prelude::*;

pub use checkpoint::{
    pack_text, pack_u64s, store, unpack_text, unpack_u64s, Checkpoint, Stored, CHECKSUM, MAGIC,
    VERSION,
};
pub use config::{LrSchedule, Precision, TrainConfig, KEYS};

use crate::dataset::{Dataset, Split};
use crate::encoders::{encode_style, patch_features, EmotionLabel, StyleFeature};
use crate::error::{CheckpointError, Error, Result};
use crate::generator::{
    apply_guidance_dropout, fm_loss, init_velocity_params, CondVars, DropMask, VelocityNetConfig,
};
use crate::numerics::{
    Optimizer, OptimizerKind, ParamSet, Real, RngState, SeedRng, Tape, Tensor, Var,
};
use crate::quantizer::{
    codebook_stats, init_codebooks, lloyd_step, style_loss, CodebookStats, StyleDictionaries,
    StyleDictionary,
};
use crate::reasoner::{init_reasoner_params, reason_tokens, ReasonerConfig};

const TAG_S1_EPOCH: u32 = 64;
const TAG_S2_EPOCH: u32 = 65;
const TAG_S2_SAMPLE: u32 = 66;
const TAG_MODEL_INIT: u32 = 67;

/// Architecture of every trained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Arch {
    pub reasoner: ReasonerConfig,
    pub vnet: VelocityNetConfig,
}

impl Arch {
    fn to_u64s(self) -> Vec<u64> {
        let (r, v) = (self.reasoner, self.vnet);
        [
            r.width,
            r.heads,
            r.blocks,
            r.mlp_hidden,
            r.style_dim,
            v.channels,
            v.blocks,
            v.cond_dim,
            v.content_dim,
            v.style_dim,
            v.size,
        ]
        .iter()
        .map(|&x| x as u64)
        .collect()
    }

    fn from_u64s(v: &[u64]) -> Result<Self> {
        if v.len() != 11 {
            return Err(CheckpointError::Malformed("meta.arch".into()).into());
        }
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        Ok(Arch {
            reasoner: ReasonerConfig {
                width: u[0],
                heads: u[1],
                blocks: u[2],
                mlp_hidden: u[3],
                style_dim: u[4],
            },
            vnet: VelocityNetConfig {
                channels: u[5],
                blocks: u[6],
                cond_dim: u[7],
                content_dim: u[8],
                style_dim: u[9],
                size: u[10],
            },
        })
    }
}

/// Losses recorded at the end of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Stage 1: `[loss_style]`; stage 2: `[loss_fm, loss_align]`.
    pub losses: Vec<f64>,
}

impl EpochLog {
    pub fn csv_header(stage: u8) -> &'static str {
        if stage == 1 {
            "epoch,loss_style"
        } else {
            "epoch,loss_fm,loss_align"
        }
    }

    pub fn csv_line(&self) -> String {
        let mut s = self.epoch.to_string();
        for l in &self.losses {
            s.push_str(&format!(",{l:.8}"));
        }
        s
    }
}

/// Everything needed to resume or use a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real> {
    pub config: TrainConfig,
    /// Stage the state was last trained in.
    pub stage: u8,
    /// Completed epochs of that stage.
    pub epoch: usize,
    pub arch: Arch,
    pub dictionaries: Option<StyleDictionaries>,
    pub dict_optimizer: Optimizer<f64>,
    pub params: Option<ParamSet<T>>,
    pub optimizer: Optimizer<T>,
    pub rng: SeedRng,
    pub history: Vec<EpochLog>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig, arch: Arch) -> Self {
        let rng = SeedRng::new(config.seed);
        TrainState {
            stage: config.stage,
            epoch: 0,
            arch,
            dictionaries: None,
            dict_optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            params: None,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            rng,
            config,
            history: Vec::new(),
        }
    }

    /// Switches to the stage named by `config`, keeping learned state.
    /// Epoch counting restarts when the stage changes.
    pub fn reconfigure(&mut self, config: TrainConfig) {
        if config.stage != self.stage {
            self.stage = config.stage;
            self.epoch = 0;
            self.optimizer = Optimizer::new(config.optimizer, config.learning_rate);
            self.history.clear();
        } else {
            self.dict_optimizer.kind = config.optimizer;
            self.dict_optimizer.lr = config.learning_rate;
            self.optimizer.kind = config.optimizer;
            self.optimizer.lr = config.learning_rate;
        }
        self.config = config;
    }

    pub fn dictionaries(&self) -> Result<&StyleDictionaries> {
        self.dictionaries.as_ref().ok_or_else(|| {
            Error::InvalidArgument("checkpoint has no style dictionaries; run stage 1 first".into())
        })
    }

    pub fn params(&self) -> Result<&ParamSet<T>> {
        self.params.as_ref().ok_or_else(|| {
            Error::InvalidArgument("checkpoint has no trained model; run stage 2 first".into())
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(
            "meta.config",
            Stored::F32(pack_text(&self.config.to_text())),
        );
        c.push(
            "meta.progress",
            Stored::F64(pack_u64s(&[self.stage as u64, self.epoch as u64])),
        );
        c.push("meta.arch", Stored::F64(pack_u64s(&self.arch.to_u64s())));
        let s = self.rng.state();
        c.push(
            "meta.rng",
            Stored::F64(pack_u64s(&[
                s.seed,
                s.stream,
                s.word_pos as u64,
                (s.word_pos >> 64) as u64,
            ])),
        );
        if !self.history.is_empty() {
            let width = self
                .history
                .iter()
                .map(|h| h.losses.len())
                .max()
                .unwrap_or(0)
                + 2;
            let mut rows = Vec::new();
            for h in &self.history {
                rows.push(h.stage as f64);
                rows.push(h.epoch as f64);
                rows.extend(&h.losses);
                rows.extend(std::iter::repeat_n(f64::NAN, width - 2 - h.losses.len()));
            }
            c.push(
                "meta.history",
                Stored::F64(
                    Tensor::from_f64(&[self.history.len(), width], &rows).expect("history shape"),
                ),
            );
        }
        if let Some(d) = &self.dictionaries {
            for dict in d.iter() {
                let name = format!("codebook.{}", dict.emotion);
                let flat: Vec<f64> = dict.entries.concat();
                c.push(
                    &name,
                    Stored::F64(
                        Tensor::from_f64(&[dict.k(), dict.dim()], &flat).expect("codebook"),
                    ),
                );
                c.push(format!("{name}.usage"), Stored::F64(pack_u64s(&dict.usage)));
            }
            push_optimizer(&mut c, "codebook_opt", &self.dict_optimizer);
        }
        if let Some(p) = &self.params {
            for (name, t) in p.iter() {
                c.push(format!("param.{name}"), store(t));
            }
            push_optimizer(&mut c, "opt", &self.optimizer);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text = unpack_text(c.get("meta.config")?, "meta.config")?;
        let config = TrainConfig::parse(&text)?;
        let progress = unpack_u64s(c.get("meta.progress")?, "meta.progress")?;
        if progress.len() != 2 {
            return Err(CheckpointError::Malformed("meta.progress".into()).into());
        }
        let arch = Arch::from_u64s(&unpack_u64s(c.get("meta.arch")?, "meta.arch")?)?;
        let r = unpack_u64s(c.get("meta.rng")?, "meta.rng")?;
        if r.len() != 4 {
            return Err(CheckpointError::Malformed("meta.rng".into()).into());
        }
        let rng = SeedRng::from_state(RngState {
            seed: r[0],
            stream: r[1],
            word_pos: r[2] as u128 | ((r[3] as u128) << 64),
        });
        let mut history = Vec::new();
        if c.contains("meta.history") {
            let h = c.get("meta.history")?.to::<f64>();
            let width = h.shape()[1];
            for row in h.data().chunks(width) {
                history.push(EpochLog {
                    stage: row[0] as u8,
                    epoch: row[1] as usize,
                    losses: row[2..].iter().copied().filter(|v| !v.is_nan()).collect(),
                });
            }
        }

        let dictionaries = if c.contains(&format!("codebook.{}", EmotionLabel::ALL[0])) {
            let mut dicts = Vec::new();
            for e in EmotionLabel::ALL {
                let name = format!("codebook.{e}");
                let t = c.get(&name)?;
                if t.shape().len() != 2 {
                    return Err(CheckpointError::Malformed(name).into());
                }
                let (k, d) = (t.shape()[0], t.shape()[1]);
                if k != config.k || d != arch.reasoner.style_dim {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: vec![config.k, arch.reasoner.style_dim],
                        found: vec![k, d],
                    }
                    .into());
                }
                let data = t.to::<f64>();
                let mut dict =
                    StyleDictionary::new(e, data.data().chunks(d).map(<[f64]>::to_vec).collect())?;
                let usage = unpack_u64s(c.get(&format!("{name}.usage"))?, "usage")?;
                if usage.len() != k {
                    return Err(CheckpointError::Malformed(format!("{name}.usage")).into());
                }
                dict.usage = usage;
                dicts.push(dict);
            }
            Some(StyleDictionaries::new(dicts)?)
        } else {
            None
        };
        let dict_optimizer = if dictionaries.is_some() {
            read_optimizer(c, "codebook_opt", config.optimizer, config.learning_rate)?
        } else {
            Optimizer::new(config.optimizer, config.learning_rate)
        };

        let (params, optimizer) = if c.contains("param.reasoner.head.weight") {
            let expected = init_model::<T>(&arch, 0);
            let mut p = ParamSet::new();
            for (name, t) in expected.iter() {
                let stored = c.get_shaped(&format!("param.{name}"), t.shape())?;
                p.insert(name, stored.to::<T>());
            }
            if c.names_with_prefix("param.").count() != p.len() {
                return Err(
                    CheckpointError::Malformed("unexpected model parameters".into()).into(),
                );
            }
            (
                Some(p),
                read_optimizer(c, "opt", config.optimizer, config.learning_rate)?,
            )
        } else {
            (None, Optimizer::new(config.optimizer, config.learning_rate))
        };

        Ok(TrainState {
            stage: progress[0] as u8,
            epoch: progress[1] as usize,
            arch,
            dictionaries,
            dict_optimizer,
            params,
            optimizer,
            rng,
            config,
            history,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn push_optimizer<T: Real>(c: &mut Checkpoint, prefix: &str, opt: &Optimizer<T>) {
    c.push(
        format!("{prefix}.step"),
        Stored::F64(pack_u64s(&[opt.step])),
    );
    for (name, m) in &opt.m {
        c.push(format!("{prefix}.m.{name}"), store(m));
    }
    for (name, v) in &opt.v {
        c.push(format!("{prefix}.v.{name}"), store(v));
    }
}

fn read_optimizer<T: Real>(
    c: &Checkpoint,
    prefix: &str,
    kind: OptimizerKind,
    lr: f64,
) -> Result<Optimizer<T>> {
    let mut opt = Optimizer::new(kind, lr);
    opt.step = unpack_u64s(c.get(&format!("{prefix}.step"))?, "step")?
        .first()
        .copied()
        .ok_or_else(|| CheckpointError::Malformed(format!("{prefix}.step")))?;
    let m_prefix = format!("{prefix}.m.");
    let v_prefix = format!("{prefix}.v.");
    for (name, t) in &c.tensors {
        if let Some(n) = name.strip_prefix(&m_prefix) {
            opt.m.insert(n.to_string(), t.to::<T>());
        } else if let Some(n) = name.strip_prefix(&v_prefix) {
            opt.v.insert(n.to_string(), t.to::<T>());
        }
    }
    Ok(opt)
}

/// Reasoner (with both input projections) and velocity network parameters.
pub fn init_model<T: Real>(arch: &Arch, seed: u64) -> ParamSet<T> {
    let mut rng = SeedRng::fork(seed, TAG_MODEL_INIT, 0);
    let mut p = init_reasoner_params(&arch.reasoner, &mut rng);
    p.extend(init_velocity_params(&arch.vnet, &mut rng));
    p
}

// ---------------------------------------------------------------- stage 1

/// A frozen style feature with its emotion and emotion score.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSample {
    pub emotion: EmotionLabel,
    pub feature: StyleFeature,
    pub weight: f64,
}

/// Style features of the training split's stylized images.
pub fn style_samples(dataset: &Dataset) -> Result<Vec<StyleSample>> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("dataset has no training triplets".into()));
    }
    train
        .par_iter()
        .map(|t| {
            Ok(StyleSample {
                emotion: t.emotion,
                feature: encode_style(&dataset.stylized(t)?)?,
                weight: t.emotion_score,
            })
        })
        .collect()
}

fn group(samples: &[StyleSample], emotion: EmotionLabel) -> (Vec<StyleFeature>, Vec<f64>) {
    samples
        .iter()
        .filter(|s| s.emotion == emotion)
        .map(|s| (s.feature.clone(), s.weight))
        .unzip()
}

/// `L1 = (1/N) sum_n e_n ||z_k - E_s(I_s)||^2` over positive-weight samples.
pub fn stage1_loss(dicts: &StyleDictionaries, samples: &[StyleSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples.iter().filter(|s| s.weight > 0.0) {
        total += style_loss(dicts.get(s.emotion), &s.feature, s.weight)?.loss;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Recounts usage from the current nearest-entry assignments.
pub fn recount_usage(dicts: &mut StyleDictionaries, samples: &[StyleSample]) {
    dicts.reset_usage();
    for s in samples.iter().filter(|s| s.weight > 0.0) {
        dicts.quantize(&s.feature.0, s.emotion);
    }
}

pub fn stage1_init(samples: &[StyleSample], config: &TrainConfig) -> Result<StyleDictionaries> {
    let groups: Vec<Vec<StyleFeature>> = EmotionLabel::ALL
        .iter()
        .map(|&e| group(samples, e).0)
        .collect();
    let init = init_codebooks(&groups, config.tau, config.k, config.seed)?;
    Ok(init.dictionaries)
}

fn dicts_to_params(dicts: &StyleDictionaries) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for d in dicts.iter() {
        let flat = d.entries.concat();
        p.insert(
            format!("codebook.{}", d.emotion),
            Tensor::from_f64(&[d.k(), d.dim()], &flat).expect("codebook"),
        );
    }
    p
}

fn params_to_dicts(p: &ParamSet<f64>, dicts: &mut StyleDictionaries) {
    for d in dicts.iter_mut() {
        let t = p
            .get(&format!("codebook.{}", d.emotion))
            .expect("codebook present");
        let dim = d.dim();
        for (e, row) in d.entries.iter_mut().zip(t.data().chunks(dim)) {
            e.copy_from_slice(row);
        }
    }
}

/// One gradient step of the prototype loss over `batch`, averaged over its
/// positive-weight samples. Zero-weight samples contribute nothing.
pub fn stage1_step(
    dicts: &mut StyleDictionaries,
    opt: &mut Optimizer<f64>,
    batch: &[&StyleSample],
) -> Result<()> {
    let live: Vec<&&StyleSample> = batch.iter().filter(|s| s.weight > 0.0).collect();
    if live.is_empty() {
        return Ok(());
    }
    let mut params = dicts_to_params(dicts);
    let mut grads: std::collections::BTreeMap<String, Tensor<f64>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
        .collect();
    let scale = 1.0 / live.len() as f64;
    for s in live {
        let dict = dicts.get(s.emotion);
        let l = style_loss(dict, &s.feature, s.weight)?;
        let g = grads
            .get_mut(&format!("codebook.{}", s.emotion))
            .expect("codebook grad");
        let row = &mut g.data_mut()[l.k * dict.dim()..(l.k + 1) * dict.dim()];
        row.iter_mut()
            .zip(&l.grad)
            .for_each(|(a, b)| *a += scale * b);
    }
    params.accumulate(&grads, 1.0)?;
    opt.update(&mut params)?;
    params_to_dicts(&params, dicts);
    Ok(())
}

/// One epoch of stage 1; returns the full-data loss afterwards.
pub fn stage1_epoch(
    dicts: &mut StyleDictionaries,
    opt: &mut Optimizer<f64>,
    samples: &[StyleSample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if opt.kind == OptimizerKind::Lloyd {
        for e in EmotionLabel::ALL {
            let (feats, weights) = group(samples, e);
            lloyd_step(dicts.get_mut(e), &feats, &weights);
        }
    } else {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SeedRng::fork(config.seed, TAG_S1_EPOCH, epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch: Vec<&StyleSample> = idx.iter().map(|&i| &samples[i]).collect();
            stage1_step(dicts, opt, &batch)?;
        }
    }
    if dicts
        .iter()
        .flat_map(|d| d.entries.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("style dictionary".into()));
    }
    stage1_loss(dicts, samples)
}

/// Stage 1 on precomputed style features, resuming from `state`.
pub fn run_stage1<T: Real>(
    state: &mut TrainState<T>,
    samples: &[StyleSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no style samples to train on".into()));
    }
    let config = state.config.clone();
    if state.dictionaries.is_none() {
        state.dictionaries = Some(stage1_init(samples, &config)?);
        state.dict_optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    }
    while state.epoch < config.epochs {
        state.dict_optimizer.lr = config.learning_rate_at(state.epoch);
        let dicts = state.dictionaries.as_mut().expect("initialized");
        let loss = stage1_epoch(
            dicts,
            &mut state.dict_optimizer,
            samples,
            &config,
            state.epoch,
        )?;
        recount_usage(dicts, samples);
        state.epoch += 1;
        let log = EpochLog {
            stage: 1,
            epoch: state.epoch,
            losses: vec![loss],
        };
        on_epoch(&log);
        state.history.push(log);
    }
    Ok(())
}

/// Result of a complete stage-1 run.
#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub dictionaries: StyleDictionaries,
    pub losses: Vec<f64>,
    pub stats: Vec<CodebookStats>,
}

pub fn train_stage1(dataset: &Dataset, config: &TrainConfig) -> Result<Stage1Result> {
    let samples = style_samples(dataset)?;
    train_stage1_on(&samples, config)
}

pub fn train_stage1_on(samples: &[StyleSample], config: &TrainConfig) -> Result<Stage1Result> {
    let mut cfg = config.clone();
    cfg.stage = 1;
    let mut state = TrainState::<f64>::new(cfg, Arch::default());
    let mut losses = Vec::new();
    run_stage1(&mut state, samples, |l| losses.push(l.losses[0]))?;
    let dictionaries = state.dictionaries.expect("trained");
    let stats = codebook_stats(&dictionaries);
    Ok(Stage1Result {
        dictionaries,
        losses,
        stats,
    })
}

// ---------------------------------------------------------------- stage 2

/// One preprocessed training triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<T: Real> {
    /// Stable identifier used to derive per-sample randomness.
    pub id: u64,
    pub emotion: EmotionLabel,
    pub weight: f64,
    /// Raw patch statistics `[16, 8]`.
    pub patches: Tensor<T>,
    pub content: Tensor<T>,
    pub stylized: Tensor<T>,
    /// Frozen style feature of the stylized image.
    pub style: Vec<f64>,
}

pub fn pair_samples<T: Real>(dataset: &Dataset, split: Split) -> Result<Vec<PairSample<T>>> {
    let triplets = dataset.split(split);
    let index_of = |t: &crate::dataset::Triplet| {
        dataset
            .triplets
            .iter()
            .position(|u| std::ptr::eq(u, t))
            .expect("triplet from this dataset") as u64
    };
    triplets
        .par_iter()
        .map(|t| {
            let content = dataset.content(t)?;
            let stylized = dataset.stylized(t)?;
            Ok(PairSample {
                id: index_of(t),
                emotion: t.emotion,
                weight: t.emotion_score,
                patches: patch_features(&content)?.cast(),
                content: content.to_tensor(),
                style: encode_style(&stylized)?.0,
                stylized: stylized.to_tensor(),
            })
        })
        .collect()
}

/// Per-sample loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss {
    pub fm: f64,
    pub align: f64,
    pub k: usize,
}

/// Flow time, noise and guidance dropout for one sample visit.
pub struct PairDraw<T: Real> {
    pub t: f64,
    pub eps: Tensor<T>,
    pub mask: DropMask,
}

pub fn draw_for<T: Real>(
    sample: &PairSample<T>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<PairDraw<T>> {
    let mut rng = SeedRng::fork(
        config.seed,
        TAG_S2_SAMPLE,
        ((epoch as u64) << 32) ^ sample.id,
    );
    let t = loop {
        let t = rng.uniform();
        if t > 0.0 {
            break t;
        }
    };
    let eps = Tensor::randn(sample.stylized.shape(), 1.0, &mut rng);
    let mask = apply_guidance_dropout(config.p_drop_style, config.p_drop_content, &mut rng)?;
    Ok(PairDraw { t, eps, mask })
}

/// Builds `e_n (L_FM + lambda L_align)` for one sample on `tape`.
///
/// The style query is pulled toward its nearest prototype. The generator
/// renders the prototype nearest the target's own style feature from
/// detached content tokens, so the flow-matching term sends no gradient into
/// the reasoner or projections.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    arch: &Arch,
    dicts: &StyleDictionaries,
    sample: &PairSample<T>,
    draw: &PairDraw<T>,
    align_weight: f64,
) -> Result<(Var, PairLoss)> {
    pair_objective_with(tape, params, arch, dicts, sample, draw, align_weight, None)
}

/// [`pair_objective`] with the generator's content tokens optionally pinned
/// to given values; pinning them at their base-point values turns the
/// stop-gradient into a true constant for finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective_with<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    arch: &Arch,
    dicts: &StyleDictionaries,
    sample: &PairSample<T>,
    draw: &PairDraw<T>,
    align_weight: f64,
    pinned_tokens: Option<&Tensor<T>>,
) -> Result<(Var, PairLoss)> {
    let raw = tape.constant(sample.patches.clone());
    let tokens = crate::encoders::project_content(tape, params, raw)?;
    let q = reason_tokens(tape, params, &arch.reasoner, sample.emotion, tokens)?;
    let quant = dicts.lookup(&tape.value(q).to_f64_vec(), sample.emotion);
    let z = Tensor::<T>::from_f64(&[quant.z.len()], &quant.z)?;
    let zc = tape.constant(z);
    let align = tape.sq_dist(q, zc)?;

    let target = dicts.lookup(&sample.style, sample.emotion).z;
    let frozen_tokens = match pinned_tokens {
        Some(t) => tape.constant(t.clone()),
        None => tape.detach(tokens),
    };
    let content =
        (!draw.mask.drop_content).then(|| (frozen_tokens, tape.constant(sample.content.clone())));
    let style = (!draw.mask.drop_style)
        .then(|| tape.constant(Tensor::from_f64(&[target.len()], &target).expect("style code")));
    let fm = fm_loss(
        tape,
        params,
        &arch.vnet,
        &sample.stylized,
        &draw.eps,
        draw.t,
        CondVars { content, style },
    )?;

    let weighted_align = tape.scale(align, T::of(align_weight));
    let sum = tape.add(fm, weighted_align)?;
    let total = tape.scale(sum, T::of(sample.weight));
    let parts = PairLoss {
        fm: tape.value(fm).item().f64(),
        align: tape.value(align).item().f64(),
        k: quant.k,
    };
    Ok((total, parts))
}

/// Gradient step over one batch, averaged over positive-weight samples.
/// Per-sample gradients are merged in batch order, so the update does not
/// depend on the number of worker threads.
pub fn stage2_step<T: Real>(
    params: &mut ParamSet<T>,
    opt: &mut Optimizer<T>,
    arch: &Arch,
    dicts: &StyleDictionaries,
    batch: &[(&PairSample<T>, &PairDraw<T>)],
    align_weight: f64,
) -> Result<Vec<PairLoss>> {
    let live: Vec<_> = batch.iter().filter(|(s, _)| s.weight > 0.0).collect();
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let frozen: &ParamSet<T> = params;
    let results: Vec<_> = live
        .par_iter()
        .map(|(s, d)| {
            let mut tape = Tape::new();
            let (total, parts) =
                pair_objective(&mut tape, frozen, arch, dicts, s, d, align_weight)?;
            let grads = tape.backward(total)?.into_param_grads();
            Ok((grads, parts))
        })
        .collect::<Result<Vec<_>>>()?;
    params.zero_grads();
    let scale = T::one() / T::of(results.len() as f64);
    let mut parts = Vec::with_capacity(results.len());
    for (g, p) in results {
        params.accumulate(&g, scale)?;
        parts.push(p);
    }
    opt.update(params)?;
    params.zero_grads();
    Ok(parts)
}

/// One epoch of stage 2; returns the mean `(loss_fm, loss_align)` and the
/// per-sample assignments.
pub fn stage2_epoch<T: Real>(
    params: &mut ParamSet<T>,
    opt: &mut Optimizer<T>,
    arch: &Arch,
    dicts: &mut StyleDictionaries,
    samples: &[PairSample<T>],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SeedRng::fork(config.seed, TAG_S2_EPOCH, epoch as u64).shuffle(&mut order);
    let (mut fm, mut align, mut n) = (0.0, 0.0, 0usize);
    dicts.reset_usage();
    for chunk in order.chunks(config.batch_size) {
        let mut idx = chunk.to_vec();
        idx.sort_unstable();
        let draws = idx
            .iter()
            .map(|&i| draw_for(&samples[i], config, epoch))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<_> = idx.iter().map(|&i| &samples[i]).zip(draws.iter()).collect();
        let frozen_dicts: &StyleDictionaries = dicts;
        let parts = stage2_step(params, opt, arch, frozen_dicts, &batch, config.align_weight)?;
        for ((s, _), p) in batch.iter().filter(|(s, _)| s.weight > 0.0).zip(&parts) {
            fm += p.fm;
            align += p.align;
            n += 1;
            dicts.get_mut(s.emotion).usage[p.k] += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let n = n.max(1) as f64;
    Ok((fm / n, align / n))
}

/// Stage 2 against frozen dictionaries, resuming from `state`.
pub fn run_stage2<T: Real>(
    state: &mut TrainState<T>,
    samples: &[PairSample<T>],
    mut on_epoch: impl FnMut(&EpochLog, &TrainState<T>),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training triplets for stage 2".into()));
    }
    let config = state.config.clone();
    if state.dictionaries.is_none() {
        return Err(Error::InvalidArgument(
            "stage 2 needs style dictionaries; resume from a stage-1 checkpoint".into(),
        ));
    }
    if let Some(d) = &state.dictionaries {
        if d.iter().any(|d| d.dim() != state.arch.reasoner.style_dim) {
            return Err(Error::InvalidArgument(
                "dictionary width does not match the style query".into(),
            ));
        }
    }
    if state.params.is_none() {
        state.params = Some(init_model(&state.arch, config.seed));
        state.optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    }
    while state.epoch < config.epochs {
        state.optimizer.lr = config.learning_rate_at(state.epoch);
        let params = state.params.as_mut().expect("initialized");
        let dicts = state.dictionaries.as_mut().expect("checked");
        let (fm, align) = stage2_epoch(
            params,
            &mut state.optimizer,
            &state.arch,
            dicts,
            samples,
            &config,
            state.epoch,
        )?;
        state.epoch += 1;
        let log = EpochLog {
            stage: 2,
            epoch: state.epoch,
            losses: vec![fm, align],
        };
        state.history.push(log.clone());
        on_epoch(&log, state);
    }
    Ok(())
}

/// Stage 2 from a dataset and stage-1 dictionaries.
pub fn train_stage2(
    dataset: &Dataset,
    dicts: StyleDictionaries,
    config: &TrainConfig,
) -> Result<TrainState<f32>> {
    let mut cfg = config.clone();
    cfg.stage = 2;
    let mut state = TrainState::<f32>::new(cfg, Arch::default());
    state.dictionaries = Some(dicts);
    let samples = pair_samples(dataset, Split::Train)?;
    run_stage2(&mut state, &samples, |_, _| {})?;
    Ok(state)
}
