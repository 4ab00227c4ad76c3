//! Per-emotion style dictionaries: threshold initialization, nearest-entry
//! quantization, the weighted prototype loss and usage statistics.

use crate::encoders::{l2, EmotionLabel, StyleFeature, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::numerics::SeedRng;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_TAU: f64 = 0.8;
pub const MAX_K: usize = 64;
const JITTER: f64 = 1e-3;
const TAG_INIT_ORDER: u32 = 16;
const TAG_JITTER: u32 = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleDictionary {
    pub emotion: EmotionLabel,
    /// `K` prototypes of equal dimension.
    pub entries: Vec<Vec<f64>>,
    pub usage: Vec<u64>,
}

impl StyleDictionary {
    pub fn new(emotion: EmotionLabel, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "dictionary for {emotion} has no entries"
            )));
        }
        let d = entries[0].len();
        if entries.iter().any(|e| e.len() != d) {
            return Err(Error::InvalidArgument(
                "dictionary entries differ in length".into(),
            ));
        }
        if entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dictionary entry for {emotion}")));
        }
        let usage = vec![0; entries.len()];
        Ok(StyleDictionary {
            emotion,
            entries,
            usage,
        })
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].len()
    }

    /// Index and distance of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.iter().enumerate() {
            let d: f64 = e.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.k() {
            for j in i + 1..self.k() {
                m = m.min(l2(&self.entries[i], &self.entries[j]));
            }
        }
        m
    }
}

/// Result of quantizing a query.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub emotion: EmotionLabel,
    pub k: usize,
    pub z: Vec<f64>,
}

/// One dictionary per emotion, in canonical emotion order.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDictionaries {
    dicts: Vec<StyleDictionary>,
}

impl StyleDictionaries {
    pub fn new(dicts: Vec<StyleDictionary>) -> Result<Self> {
        if dicts.len() != NUM_EMOTIONS
            || dicts
                .iter()
                .enumerate()
                .any(|(i, d)| d.emotion.index() != i)
        {
            return Err(Error::InvalidArgument(
                "need one dictionary per emotion in canonical order".into(),
            ));
        }
        Ok(StyleDictionaries { dicts })
    }

    pub fn get(&self, emotion: EmotionLabel) -> &StyleDictionary {
        &self.dicts[emotion.index()]
    }

    pub fn get_mut(&mut self, emotion: EmotionLabel) -> &mut StyleDictionary {
        &mut self.dicts[emotion.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &StyleDictionary> {
        self.dicts.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut StyleDictionary> {
        self.dicts.iter_mut()
    }

    pub fn k(&self) -> usize {
        self.dicts[0].k()
    }

    /// Nearest entry of the emotion's dictionary without touching usage.
    pub fn lookup(&self, q: &[f64], emotion: EmotionLabel) -> Quantized {
        let dict = self.get(emotion);
        let (k, _) = dict.nearest(q);
        Quantized {
            emotion,
            k,
            z: dict.entries[k].clone(),
        }
    }

    /// Nearest entry of the emotion's dictionary; increments its usage.
    pub fn quantize(&mut self, q: &[f64], emotion: EmotionLabel) -> Quantized {
        let out = self.lookup(q, emotion);
        self.get_mut(emotion).usage[out.k] += 1;
        out
    }

    pub fn reset_usage(&mut self) {
        for d in &mut self.dicts {
            d.usage.iter_mut().for_each(|u| *u = 0);
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Dictionaries plus any warnings raised while padding degenerate inputs.
#[derive(Clone, Debug)]
pub struct CodebookInit {
    pub dictionaries: StyleDictionaries,
    /// Per emotion, how many entries were admitted by the similarity threshold.
    pub admitted: Vec<usize>,
    pub warnings: Vec<String>,
}

fn init_one(
    emotion: EmotionLabel,
    features: &[StyleFeature],
    tau: f64,
    k: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<(StyleDictionary, usize)> {
    if features.is_empty() {
        return Err(Error::Dataset(format!(
            "no style features for emotion {emotion}"
        )));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    SeedRng::fork(seed, TAG_INIT_ORDER, emotion.index() as u64).shuffle(&mut order);

    let mut chosen: Vec<usize> = Vec::new();
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        let f = &features[i].0;
        let max_sim = chosen
            .iter()
            .map(|&c| cosine(&features[c].0, f))
            .fold(f64::NEG_INFINITY, f64::max);
        if chosen.is_empty() || max_sim < tau {
            chosen.push(i);
        }
    }
    let admitted = chosen.len();

    // Farthest-point fill from the leftovers, scanning in index order.
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| l2(&features[c].0, &f.0))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d > 1e-8 => chosen.push(i),
            _ => break,
        }
    }

    let mut entries: Vec<Vec<f64>> = chosen.iter().map(|&i| features[i].0.clone()).collect();
    if entries.len() < k {
        let msg = format!(
            "{emotion}: only {} distinct features for {k} entries; padding with jittered copies",
            entries.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
        let mut rng = SeedRng::fork(seed, TAG_JITTER, emotion.index() as u64);
        let base = entries[0].clone();
        while entries.len() < k {
            let dir: Vec<f64> = base.iter().map(|_| rng.normal()).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            entries.push(
                base.iter()
                    .zip(&dir)
                    .map(|(b, d)| b + JITTER * d / n)
                    .collect(),
            );
        }
    }
    Ok((StyleDictionary::new(emotion, entries)?, admitted))
}

/// Threshold initialization per emotion: features are scanned in seeded
/// random order and admitted while their maximum cosine similarity to the
/// admitted set is below `tau`; remaining slots are filled by farthest-point
/// selection (ties to the lowest sample index).
pub fn init_codebooks(
    groups: &[Vec<StyleFeature>],
    tau: f64,
    k: usize,
    seed: u64,
) -> Result<CodebookInit> {
    if groups.len() != NUM_EMOTIONS {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_EMOTIONS} feature groups, got {}",
            groups.len()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    if k == 0 || k > MAX_K {
        return Err(Error::InvalidArgument(format!(
            "K must lie in 1..={MAX_K}, got {k}"
        )));
    }
    let mut warnings = Vec::new();
    let mut dicts = Vec::new();
    let mut admitted = Vec::new();
    for (e, feats) in EmotionLabel::ALL.iter().zip(groups) {
        let (d, a) = init_one(*e, feats, tau, k, seed, &mut warnings)?;
        dicts.push(d);
        admitted.push(a);
    }
    Ok(CodebookInit {
        dictionaries: StyleDictionaries::new(dicts)?,
        admitted,
        warnings,
    })
}

/// Weighted prototype loss for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLoss {
    /// Entry nearest to the style feature.
    pub k: usize,
    pub loss: f64,
    /// Gradient with respect to entry `k`.
    pub grad: Vec<f64>,
}

/// `e_n * ||z_k - f||^2` with `k` the entry nearest to `f`.
pub fn style_loss(
    dict: &StyleDictionary,
    feature: &StyleFeature,
    weight: f64,
) -> Result<StyleLoss> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "emotion score must lie in (0, 1], got {weight}"
        )));
    }
    let (k, _) = dict.nearest(&feature.0);
    let diff: Vec<f64> = dict.entries[k]
        .iter()
        .zip(&feature.0)
        .map(|(z, f)| z - f)
        .collect();
    Ok(StyleLoss {
        k,
        loss: weight * diff.iter().map(|d| d * d).sum::<f64>(),
        grad: diff.iter().map(|d| 2.0 * weight * d).collect(),
    })
}

/// Usage histogram and perplexity of one dictionary.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CodebookStats {
    pub emotion: EmotionLabel,
    pub usage: Vec<u64>,
    pub used_entries: usize,
    pub perplexity: f64,
}

pub fn perplexity(usage: &[u64]) -> f64 {
    let total: u64 = usage.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = usage
        .iter()
        .filter(|&&u| u > 0)
        .map(|&u| {
            let p = u as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub fn codebook_stats(dicts: &StyleDictionaries) -> Vec<CodebookStats> {
    dicts
        .iter()
        .map(|d| CodebookStats {
            emotion: d.emotion,
            usage: d.usage.clone(),
            used_entries: d.usage.iter().filter(|&&u| u > 0).count(),
            perplexity: perplexity(&d.usage),
        })
        .collect()
}

/// Weighted features assigned to each entry of one dictionary.
pub fn assign<'a>(
    dict: &StyleDictionary,
    samples: impl IntoIterator<Item = (&'a StyleFeature, f64)>,
) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); dict.k()];
    for (i, (f, w)) in samples.into_iter().enumerate() {
        if w > 0.0 {
            out[dict.nearest(&f.0).0].push((i, w));
        }
    }
    out
}

/// Exact weighted k-means step: every used entry moves to the weighted mean
/// of its assigned features. Returns the number of entries that moved.
pub fn lloyd_step(dict: &mut StyleDictionary, features: &[StyleFeature], weights: &[f64]) -> usize {
    let groups = assign(dict, features.iter().zip(weights.iter().copied()));
    let mut moved = 0;
    for (k, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let total: f64 = members.iter().map(|&(_, w)| w).sum();
        let mut mean = vec![0.0; dict.dim()];
        for &(i, w) in members {
            for (m, f) in mean.iter_mut().zip(&features[i].0) {
                *m += w * f;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        if mean != dict.entries[k] {
            moved += 1;
        }
        dict.entries[k] = mean;
    }
    moved
}
