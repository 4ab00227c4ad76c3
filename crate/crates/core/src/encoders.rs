//! Emotion, content, style, and text encoders.
//!
//! Content images become 16 tokens: one per 8×8 patch of a 32×32 image, each
//! summarizing the patch by eight colour/edge statistics that a learned affine
//! map lifts into the embedding width, plus fixed 2D sinusoidal positions.
//! Stylized images are summarized by a frozen Gram-statistic encoder whose
//! output lives in the same space as the style prototypes.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::numerics::{ParamSet, Real, SeedRng, Tape, Tensor, Var};

pub const NUM_EMOTIONS: usize = 8;
pub const GRID: usize = 4;
pub const NUM_TOKENS: usize = GRID * GRID;
pub const PATCH_FEATURES: usize = 8;
pub const EMBED_DIM: usize = 64;
pub const STYLE_DIM: usize = 64;
pub const TEXT_VOCAB: usize = 1024;

/// Sobel magnitude above which a pixel counts toward a patch's edge density.
pub const EDGE_THRESHOLD: f32 = 0.5;

const STYLE_FILTERS: usize = 16;
const GRAM_FEATURES: usize = STYLE_FILTERS * (STYLE_FILTERS + 1) / 2;
const STYLE_RAW: usize = GRAM_FEATURES + 3;
const STYLE_ENCODER_SEED: u64 = 0x5747_4c45_5f45_4e43;
const TEXT_HASH_SEED: u64 = 0x7465_7874;

/// The eight emotion categories in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_EMOTIONS] = [
        EmotionLabel::Amusement,
        EmotionLabel::Awe,
        EmotionLabel::Contentment,
        EmotionLabel::Excitement,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Amusement => "amusement",
            EmotionLabel::Awe => "awe",
            EmotionLabel::Contentment => "contentment",
            EmotionLabel::Excitement => "excitement",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Sadness => "sadness",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::UnknownEmotion {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// One-hot encoding of length 8.
pub fn encode_emotion(label: EmotionLabel) -> [f64; NUM_EMOTIONS] {
    let mut v = [0.0; NUM_EMOTIONS];
    v[label.index()] = 1.0;
    v
}

/// Content tokens plus, for image content, the patch statistics they were projected from.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentTokens<T> {
    /// `[16, width]`.
    pub tokens: Tensor<T>,
    /// `[16, 8]` patch statistics; absent for text.
    pub raw_features: Option<Tensor<T>>,
}

/// Fixed 2D sinusoidal encodings over the 4×4 grid: the first half of each
/// row encodes the grid row, the second half the grid column.
pub fn positional_encoding<T: Real>(width: usize) -> Tensor<T> {
    assert!(
        width.is_multiple_of(4),
        "positional width must be divisible by 4"
    );
    let half = width / 2;
    let mut data = vec![0.0; NUM_TOKENS * width];
    for r in 0..GRID {
        for c in 0..GRID {
            let row = &mut data[(r * GRID + c) * width..][..width];
            for (off, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[off + 2 * i] = (pos as f64 * freq).sin();
                    row[off + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::from_f64(&[NUM_TOKENS, width], &data).expect("positional shape")
}

/// Per 8×8 patch: mean RGB, std RGB, Sobel edge density, mean luminance.
pub fn patch_features(image: &Image) -> Result<Tensor<f64>> {
    image.expect_square(SIZE)?;
    let patch = SIZE / GRID;
    let sobel = image.sobel_magnitude();
    let lum = image.luminance();
    let n = (patch * patch) as f64;
    let mut data = Vec::with_capacity(NUM_TOKENS * PATCH_FEATURES);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut sum = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            let mut edges = 0usize;
            let mut lsum = 0.0f64;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    let px = image.rgb(y, x);
                    for c in 0..3 {
                        sum[c] += px[c] as f64;
                    }
                    let i = y * SIZE + x;
                    if sobel[i] > EDGE_THRESHOLD {
                        edges += 1;
                    }
                    lsum += lum[i] as f64;
                }
            }
            let mean = sum.map(|s| s / n);
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    let px = image.rgb(y, x);
                    for c in 0..3 {
                        let d = px[c] as f64 - mean[c];
                        sq[c] += d * d;
                    }
                }
            }
            data.extend_from_slice(&mean);
            data.extend(sq.map(|s| (s / n).sqrt()));
            data.push(edges as f64 / n);
            data.push(lsum / n);
        }
    }
    Tensor::from_f64(&[NUM_TOKENS, PATCH_FEATURES], &data)
}

/// Learned content projection parameters (`content_proj.*`).
pub fn init_content_projection<T: Real>(params: &mut ParamSet<T>, width: usize, rng: &mut SeedRng) {
    params.insert_randn(
        "content_proj.weight",
        &[PATCH_FEATURES, width],
        PATCH_FEATURES,
        1.0,
        rng,
    );
    params.insert("content_proj.bias", Tensor::zeros(&[width]));
}

/// Projects raw patch statistics to tokens on a tape.
pub fn project_content<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    raw: Var,
) -> Result<Var> {
    let w = tape.param(params, "content_proj.weight")?;
    let b = tape.param(params, "content_proj.bias")?;
    let proj = tape.affine(raw, w, Some(b))?;
    let width = tape.value(proj).shape()[1];
    let pos = tape.constant(positional_encoding(width));
    tape.add(proj, pos)
}

/// Patch statistics projected by `params` with positional encodings added.
pub fn encode_content<T: Real>(image: &Image, params: &ParamSet<T>) -> Result<ContentTokens<T>> {
    let raw: Tensor<T> = patch_features(image)?.cast();
    let mut tape = Tape::new();
    let r = tape.constant(raw.clone());
    let tokens = project_content(&mut tape, params, r)?;
    Ok(ContentTokens {
        tokens: tape.value(tokens).clone(),
        raw_features: Some(raw),
    })
}

/// 64-dimensional style descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeature(pub Vec<f64>);

impl StyleFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &StyleFeature) -> f64 {
        l2(&self.0, &other.0)
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Frozen Gram-statistic style encoder.
pub struct StyleEncoder {
    /// `[16][3][3][3]` as `filter, channel, ky, kx`.
    filters: Vec<f64>,
    /// `[64][139]`, orthonormal rows.
    projection: Vec<f64>,
}

impl StyleEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = SeedRng::new(seed);
        let std = 1.0 / 27f64.sqrt();
        let filters = (0..STYLE_FILTERS * 27)
            .map(|_| rng.normal() * std)
            .collect();

        // Modified Gram-Schmidt on Gaussian rows.
        let mut rows: Vec<Vec<f64>> = (0..STYLE_DIM)
            .map(|_| (0..STYLE_RAW).map(|_| rng.normal()).collect())
            .collect();
        for i in 0..STYLE_DIM {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                rows[i]
                    .iter_mut()
                    .zip(&prev)
                    .for_each(|(a, b)| *a -= dot * b);
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        StyleEncoder {
            filters,
            projection: rows.concat(),
        }
    }

    /// Process-wide encoder with the pinned seed.
    pub fn shared() -> &'static StyleEncoder {
        static ENCODER: OnceLock<StyleEncoder> = OnceLock::new();
        ENCODER.get_or_init(|| StyleEncoder::new(STYLE_ENCODER_SEED))
    }

    pub fn filter(&self, f: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.filters[((f * 3 + c) * 3 + ky) * 3 + kx]
    }

    /// `[16, h-2, w-2]` valid-region filter responses.
    pub fn responses(&self, image: &Image) -> Vec<f64> {
        let (w, h) = (image.width(), image.height());
        let (ow, oh) = (w - 2, h - 2);
        let mut out = vec![0.0; STYLE_FILTERS * ow * oh];
        for f in 0..STYLE_FILTERS {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s +=
                                    self.filter(f, c, ky, kx) * image.get(c, y + ky, x + kx) as f64;
                            }
                        }
                    }
                    out[(f * oh + y) * ow + x] = s;
                }
            }
        }
        out
    }

    /// Position-averaged `16 × 16` Gram matrix of the filter responses.
    pub fn gram(&self, image: &Image) -> Vec<f64> {
        let r = self.responses(image);
        let p = r.len() / STYLE_FILTERS;
        let mut g = vec![0.0; STYLE_FILTERS * STYLE_FILTERS];
        for i in 0..STYLE_FILTERS {
            for j in i..STYLE_FILTERS {
                let s: f64 = (0..p).map(|k| r[i * p + k] * r[j * p + k]).sum::<f64>() / p as f64;
                g[i * STYLE_FILTERS + j] = s;
                g[j * STYLE_FILTERS + i] = s;
            }
        }
        g
    }

    /// Gram upper triangle (row-major, diagonal included) followed by mean RGB.
    pub fn raw_descriptor(&self, image: &Image) -> Vec<f64> {
        let g = self.gram(image);
        let mut v = Vec::with_capacity(STYLE_RAW);
        for i in 0..STYLE_FILTERS {
            for j in i..STYLE_FILTERS {
                v.push(g[i * STYLE_FILTERS + j]);
            }
        }
        for c in 0..3 {
            let plane = image.plane(c);
            v.push(plane.iter().map(|&x| x as f64).sum::<f64>() / plane.len() as f64);
        }
        v
    }

    pub fn encode(&self, image: &Image) -> Result<StyleFeature> {
        image.expect_square(SIZE)?;
        let raw = self.raw_descriptor(image);
        Ok(StyleFeature(self.project(&raw)))
    }

    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        self.projection
            .chunks(STYLE_RAW)
            .map(|row| row.iter().zip(raw).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Style feature of a 32×32 image under the shared encoder.
pub fn encode_style(image: &Image) -> Result<StyleFeature> {
    StyleEncoder::shared().encode(image)
}

/// Seeded 64-bit FNV-1a.
pub fn stable_hash(token: &str, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn init_text_embedding<T: Real>(params: &mut ParamSet<T>, width: usize, rng: &mut SeedRng) {
    params.insert(
        "text_embed.table",
        Tensor::randn(&[TEXT_VOCAB, width], 1.0, rng),
    );
}

/// Whitespace tokens hashed into the embedding table, padded with zero rows
/// to 16, positional encodings added.
pub fn encode_text<T: Real>(prompt: &str, params: &ParamSet<T>) -> Result<ContentTokens<T>> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument("prompt is empty".into()));
    }
    let table = params.get("text_embed.table")?;
    let width = table.shape()[1];
    let mut data = positional_encoding::<T>(width).into_data();
    for (i, word) in words.iter().take(NUM_TOKENS).enumerate() {
        let row = (stable_hash(word, TEXT_HASH_SEED) % TEXT_VOCAB as u64) as usize;
        for (d, &v) in data[i * width..][..width].iter_mut().zip(table.row(row)) {
            *d += v;
        }
    }
    Ok(ContentTokens {
        tokens: Tensor::new(&[NUM_TOKENS, width], data)?,
        raw_features: None,
    })
}
