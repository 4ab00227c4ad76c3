//! Synthetic content/emotion/stylized triplets with planted emotion→style
//! ground truth, and the JSON Lines manifest that indexes them.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! content/NNNNNN.png
//! stylized/NNNNNN.png
//! manifest.jsonl   first line is a header object, then one triplet per line
//! specs.jsonl      one StyleTransformSpec per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EmotionLabel, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::eval::metrics::edge_iou;
use crate::image::{Image, SIZE};
use crate::numerics::SeedRng;

pub const MANIFEST: &str = "manifest.jsonl";
pub const SPECS: &str = "specs.jsonl";
pub const DEFAULT_STYLES_PER_EMOTION: usize = 2;
/// Every stylized image keeps at least this edge-map IoU with its content.
pub const MIN_EDGE_IOU: f64 = 0.5;

const TAG_SPECS: u32 = 1;
const TAG_TRIPLET: u32 = 2;
const TAG_SCENE: u32 = 3;
const TAG_GRAIN: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One training sample. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub content_path: String,
    pub stylized_path: String,
    pub emotion: EmotionLabel,
    pub emotion_score: f64,
    pub style_id: Option<usize>,
    pub split: Split,
}

/// Parameters of one planted style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTransformSpec {
    pub emotion: EmotionLabel,
    pub style_id: usize,
    pub hue_degrees: f64,
    pub saturation_scale: f64,
    pub contrast_gamma: f64,
    pub edge_darkening: f64,
    pub grain_amplitude: f64,
}

/// Sampling range of each spec parameter, in field order.
pub const SPEC_RANGES: [(f64, f64); 5] = [
    (0.0, 360.0),
    (0.3, 1.8),
    (0.5, 2.0),
    (0.0, 0.3),
    (0.0, 0.04),
];

impl StyleTransformSpec {
    pub fn identity(emotion: EmotionLabel) -> Self {
        StyleTransformSpec {
            emotion,
            style_id: 0,
            hue_degrees: 0.0,
            saturation_scale: 1.0,
            contrast_gamma: 1.0,
            edge_darkening: 0.0,
            grain_amplitude: 0.0,
        }
    }

    fn values(&self) -> [f64; 5] {
        [
            self.hue_degrees,
            self.saturation_scale,
            self.contrast_gamma,
            self.edge_darkening,
            self.grain_amplitude,
        ]
    }

    /// Number of parameters differing by at least 20% of their range
    /// (hue measured around the circle).
    pub fn separated_params(&self, other: &StyleTransformSpec) -> usize {
        let (a, b) = (self.values(), other.values());
        (0..5)
            .filter(|&i| {
                let (lo, hi) = SPEC_RANGES[i];
                let mut d = (a[i] - b[i]).abs();
                if i == 0 {
                    d = d.min(360.0 - d);
                }
                d >= 0.2 * (hi - lo)
            })
            .count()
    }
}

/// Seeded spec table: `styles_per_emotion` specs per emotion, every pair
/// separated in at least two parameters.
pub fn spec_table(styles_per_emotion: usize, seed: u64) -> Result<Vec<StyleTransformSpec>> {
    let mut rng = SeedRng::fork(seed, TAG_SPECS, 0);
    let mut specs: Vec<StyleTransformSpec> = Vec::new();
    for e in EmotionLabel::ALL {
        for s in 0..styles_per_emotion {
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::Dataset(format!(
                        "could not place {styles_per_emotion} separated styles per emotion"
                    )));
                }
                let v: Vec<f64> = SPEC_RANGES
                    .iter()
                    .map(|&(lo, hi)| rng.uniform_range(lo, hi))
                    .collect();
                let cand = StyleTransformSpec {
                    emotion: e,
                    style_id: s,
                    hue_degrees: v[0],
                    saturation_scale: v[1],
                    contrast_gamma: v[2],
                    edge_darkening: v[3],
                    grain_amplitude: v[4],
                };
                if specs.iter().all(|o| cand.separated_params(o) >= 2) {
                    specs.push(cand);
                    break;
                }
            }
        }
    }
    Ok(specs)
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Hue rotation and saturation scaling in HSV, per-channel `x^gamma`,
/// edge darkening, Gaussian grain, clamp. Neutral parameters are skipped so
/// that the identity spec reproduces its input exactly.
pub fn apply_style_transform(image: &Image, spec: &StyleTransformSpec, grain_seed: u64) -> Image {
    let mut out = image.clone();
    let (w, h) = (image.width(), image.height());
    if spec.hue_degrees != 0.0 || spec.saturation_scale != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let [hh, s, v] = rgb_to_hsv(out.rgb(y, x));
                let s = (s * spec.saturation_scale as f32).clamp(0.0, 1.0);
                out.set_rgb(y, x, hsv_to_rgb([hh + spec.hue_degrees as f32, s, v]));
            }
        }
    }
    if spec.contrast_gamma != 1.0 {
        let g = spec.contrast_gamma as f32;
        for y in 0..h {
            for x in 0..w {
                let px = out.rgb(y, x).map(|v| v.clamp(0.0, 1.0).powf(g));
                out.set_rgb(y, x, px);
            }
        }
    }
    if spec.edge_darkening != 0.0 {
        let mag = out.sobel_magnitude();
        for y in 0..h {
            for x in 0..w {
                let k = 1.0 - spec.edge_darkening as f32 * mag[y * w + x].min(1.0);
                let px = out.rgb(y, x).map(|v| v * k);
                out.set_rgb(y, x, px);
            }
        }
    }
    if spec.grain_amplitude != 0.0 {
        let mut rng = SeedRng::fork(grain_seed, TAG_GRAIN, 0);
        for y in 0..h {
            for x in 0..w {
                let px = out.rgb(y, x);
                let noisy = px.map(|v| v + (rng.normal() * spec.grain_amplitude) as f32);
                out.set_rgb(y, x, noisy);
            }
        }
    }
    out.clamp01();
    out
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Content hues are drawn from a narrow warm band so that hue rotation is
/// recoverable from the stylized image.
const CONTENT_HUE_BAND: (f64, f64) = (0.0, 40.0);

/// 2-5 flat shapes (circle, triangle, rectangle) on a plain background.
pub fn content_scene(rng: &mut SeedRng) -> Image {
    let bg = hsv_to_rgb([
        rng.uniform_range(CONTENT_HUE_BAND.0, CONTENT_HUE_BAND.1) as f32,
        rng.uniform_range(0.05, 0.3) as f32,
        rng.uniform_range(0.45, 0.65) as f32,
    ]);
    let mut img = Image::filled(SIZE, SIZE, bg);
    let n_shapes = 2 + rng.below(4);
    for _ in 0..n_shapes {
        let fill = loop {
            let c = hsv_to_rgb([
                rng.uniform_range(CONTENT_HUE_BAND.0, CONTENT_HUE_BAND.1) as f32,
                rng.uniform_range(0.6, 1.0) as f32,
                rng.uniform_range(0.35, 1.0) as f32,
            ]);
            if (luma(c) - luma(bg)).abs() >= 0.2 {
                break c;
            }
        };
        let kind = rng.below(3);
        let cx = rng.uniform_range(6.0, 26.0);
        let cy = rng.uniform_range(6.0, 26.0);
        let size = rng.uniform_range(4.0, 9.0);
        let tri = [
            (cx + rng.uniform_range(-1.0, 1.0) * size, cy - size),
            (cx - size, cy + size * rng.uniform_range(0.5, 1.0)),
            (cx + size, cy + size * rng.uniform_range(0.5, 1.0)),
        ];
        let aspect = rng.uniform_range(0.5, 1.5);
        for y in 0..SIZE {
            for x in 0..SIZE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match kind {
                    0 => (px - cx).powi(2) + (py - cy).powi(2) <= size * size,
                    1 => in_triangle((px, py), tri),
                    _ => (px - cx).abs() <= size * aspect && (py - cy).abs() <= size / aspect,
                };
                if inside {
                    img.set_rgb(y, x, fill);
                }
            }
        }
    }
    img
}

fn in_triangle(p: (f64, f64), [a, b, c]: [(f64, f64); 3]) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| {
        (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0)
    };
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Summary written as the first manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub n_triplets: usize,
    pub styles_per_emotion: usize,
    pub seed: u64,
    pub mean_edge_iou: f64,
    pub min_edge_iou: f64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

pub struct GeneratedTriplet {
    pub content: Image,
    pub stylized: Image,
    pub triplet: Triplet,
    pub edge_iou: f64,
}

/// Deterministically builds triplet `index`; the scene is redrawn until the
/// stylized image keeps [`MIN_EDGE_IOU`] of the content edges.
pub fn generate_triplet(
    index: usize,
    specs: &[StyleTransformSpec],
    styles_per_emotion: usize,
    seed: u64,
) -> Result<GeneratedTriplet> {
    let mut rng = SeedRng::fork(seed, TAG_TRIPLET, index as u64);
    let emotion = EmotionLabel::ALL[rng.below(NUM_EMOTIONS)];
    let style_id = rng.below(styles_per_emotion);
    // (0.5, 1]
    let emotion_score = 1.0 - 0.5 * rng.uniform();
    let spec = &specs[emotion.index() * styles_per_emotion + style_id];
    for attempt in 0..64u64 {
        let mut scene_rng = SeedRng::fork(seed, TAG_SCENE, ((index as u64) << 8) | attempt);
        let content = content_scene(&mut scene_rng).quantize8();
        let stylized =
            apply_style_transform(&content, spec, seed ^ ((index as u64) << 16) ^ attempt)
                .quantize8();
        let iou = edge_iou(&content, &stylized)?;
        if iou >= MIN_EDGE_IOU {
            let name = format!("{index:06}.png");
            return Ok(GeneratedTriplet {
                content,
                stylized,
                triplet: Triplet {
                    content_path: format!("content/{name}"),
                    stylized_path: format!("stylized/{name}"),
                    emotion,
                    emotion_score,
                    style_id: Some(style_id),
                    split: if index % 10 == 9 {
                        Split::Test
                    } else {
                        Split::Train
                    },
                },
                edge_iou: iou,
            });
        }
    }
    Err(Error::Dataset(format!(
        "triplet {index}: no scene kept edge IoU >= {MIN_EDGE_IOU}"
    )))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a full synthetic dataset under `out_dir` and returns its header.
pub fn gen_synthetic(
    out_dir: &Path,
    n_triplets: usize,
    styles_per_emotion: usize,
    seed: u64,
) -> Result<ManifestHeader> {
    if styles_per_emotion == 0 || n_triplets < NUM_EMOTIONS * styles_per_emotion {
        return Err(Error::InvalidArgument(format!(
            "need at least {} triplets for {styles_per_emotion} styles per emotion",
            NUM_EMOTIONS * styles_per_emotion.max(1)
        )));
    }
    let specs = spec_table(styles_per_emotion, seed)?;
    create_dir(&out_dir.join("content"))?;
    create_dir(&out_dir.join("stylized"))?;

    let mut lines = Vec::with_capacity(n_triplets);
    let (mut iou_sum, mut iou_min) = (0.0, f64::INFINITY);
    for i in 0..n_triplets {
        let g = generate_triplet(i, &specs, styles_per_emotion, seed)?;
        g.content.save_png(out_dir.join(&g.triplet.content_path))?;
        g.stylized
            .save_png(out_dir.join(&g.triplet.stylized_path))?;
        iou_sum += g.edge_iou;
        iou_min = iou_min.min(g.edge_iou);
        lines.push(serde_json::to_string(&g.triplet).expect("triplet serializes"));
    }
    let header = ManifestHeader {
        n_triplets,
        styles_per_emotion,
        seed,
        mean_edge_iou: iou_sum / n_triplets as f64,
        min_edge_iou: iou_min,
    };
    let mut manifest = serde_json::to_string(&HeaderLine {
        header: header.clone(),
    })
    .expect("header serializes");
    manifest.push('\n');
    for l in lines {
        manifest.push_str(&l);
        manifest.push('\n');
    }
    write_file(&out_dir.join(MANIFEST), manifest.as_bytes())?;

    let mut spec_text = String::new();
    for s in &specs {
        spec_text.push_str(&serde_json::to_string(s).expect("spec serializes"));
        spec_text.push('\n');
    }
    write_file(&out_dir.join(SPECS), spec_text.as_bytes())?;
    Ok(header)
}

/// A loaded manifest together with its root directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: Option<ManifestHeader>,
    pub triplets: Vec<Triplet>,
    pub specs: Vec<StyleTransformSpec>,
}

#[derive(Deserialize)]
struct RawTriplet {
    content_path: String,
    stylized_path: String,
    emotion: String,
    emotion_score: f64,
    #[serde(default)]
    style_id: Option<usize>,
    split: Split,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn load_specs(path: &Path) -> Result<Vec<StyleTransformSpec>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut specs = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        specs.push(serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(specs)
}

/// Parses and validates a manifest. Images are checked lazily on first read.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let specs = load_specs(&root.join(SPECS))?;
    let mut header = None;
    let mut triplets = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let lineno = i + 1;
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.contains("\"header\"") {
            let h: HeaderLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            header = Some(h.header);
            continue;
        }
        let raw: RawTriplet = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let emotion: EmotionLabel = raw.emotion.parse().map_err(|e: Error| err(e.to_string()))?;
        if !(raw.emotion_score > 0.0 && raw.emotion_score <= 1.0) {
            return Err(err(format!(
                "emotion_score {} outside (0, 1]",
                raw.emotion_score
            )));
        }
        if let (Some(sid), false) = (raw.style_id, specs.is_empty()) {
            if !specs
                .iter()
                .any(|s| s.emotion == emotion && s.style_id == sid)
            {
                return Err(err(format!("no style spec for ({emotion}, {sid})")));
            }
        }
        triplets.push(Triplet {
            content_path: raw.content_path,
            stylized_path: raw.stylized_path,
            emotion,
            emotion_score: raw.emotion_score,
            style_id: raw.style_id,
            split: raw.split,
        });
    }
    Ok(Dataset {
        root,
        header,
        triplets,
        specs,
    })
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        load_manifest(&dir.join(MANIFEST))
    }

    pub fn split(&self, split: Split) -> Vec<&Triplet> {
        self.triplets.iter().filter(|t| t.split == split).collect()
    }

    fn load_checked(&self, rel: &str) -> Result<Image> {
        let path = self.root.join(rel);
        let img = Image::load_png(&path)?;
        img.expect_square(SIZE).map_err(|e| Error::Image {
            path,
            message: e.to_string(),
        })?;
        Ok(img)
    }

    pub fn content(&self, t: &Triplet) -> Result<Image> {
        self.load_checked(&t.content_path)
    }

    pub fn stylized(&self, t: &Triplet) -> Result<Image> {
        self.load_checked(&t.stylized_path)
    }

    pub fn spec(&self, emotion: EmotionLabel, style_id: usize) -> Option<&StyleTransformSpec> {
        self.specs
            .iter()
            .find(|s| s.emotion == emotion && s.style_id == style_id)
    }

    /// Writes the triplets (and header) back as a manifest at `path`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if let Some(h) = &self.header {
            text.push_str(
                &serde_json::to_string(&HeaderLine { header: h.clone() }).expect("header"),
            );
            text.push('\n');
        }
        for t in &self.triplets {
            text.push_str(&serde_json::to_string(t).expect("triplet"));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
