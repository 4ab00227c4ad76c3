//! Emotion-oriented evaluation: probe accuracy, sentiment gap, style
//! difference and structural preservation of generated images.

pub mod metrics;
pub mod probe;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, Triplet};
use crate::encoders::{encode_style, l2, EmotionLabel, StyleFeature};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Real, SeedRng};
use crate::pipeline::{Content, SampleSettings, Stylizer};

pub use metrics::{edge_iou, edge_map, ssim};
pub use probe::{Probe, ProbeConfig, PROBE_GATE};

const TAG_SAMPLE: u32 = 96;

/// Fraction of images the probe assigns to their target emotion.
pub fn emo_accuracy(probe: &Probe, generated: &[(Image, EmotionLabel)]) -> Result<f64> {
    probe.accuracy(generated)
}

/// Probe probability of `emotion` for each image.
pub fn target_probabilities(probe: &Probe, images: &[(Image, EmotionLabel)]) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|(img, e)| Ok(probe.probabilities(img)?[e.index()]))
        .collect()
}

/// Mean absolute gap between target-emotion probabilities of paired
/// generated and reference images.
pub fn sentiment_gap(
    probe: &Probe,
    generated: &[(Image, EmotionLabel)],
    reference: &[(Image, EmotionLabel)],
) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "sentiment gap needs paired sets, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    if generated.iter().zip(reference).any(|(a, b)| a.1 != b.1) {
        return Err(Error::InvalidArgument(
            "sentiment gap pairs have different target emotions".into(),
        ));
    }
    let pg = target_probabilities(probe, generated)?;
    let pr = target_probabilities(probe, reference)?;
    Ok(mean(pg.iter().zip(&pr).map(|(a, b)| (a - b).abs())))
}

/// Style-feature centroids of ground-truth stylized images per (emotion, style).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleGroups {
    pub centroids: BTreeMap<(EmotionLabel, usize), Vec<f64>>,
}

impl StyleGroups {
    pub fn from_features(features: &[(EmotionLabel, usize, StyleFeature)]) -> Result<Self> {
        let mut grouped: BTreeMap<(EmotionLabel, usize), Vec<StyleFeature>> = BTreeMap::new();
        for (e, s, f) in features {
            grouped.entry((*e, *s)).or_default().push(f.clone());
        }
        if grouped.is_empty() {
            return Err(Error::InvalidArgument(
                "style groups need at least one image".into(),
            ));
        }
        Ok(StyleGroups {
            centroids: grouped
                .into_iter()
                .map(|(k, v)| (k, metrics::centroid(&v)))
                .collect(),
        })
    }

    /// Groups of the stylized images of one split.
    pub fn from_dataset(dataset: &Dataset, split: Split) -> Result<Self> {
        let feats = dataset
            .split(split)
            .par_iter()
            .map(|t| {
                Ok((
                    t.emotion,
                    t.style_id.unwrap_or(0),
                    encode_style(&dataset.stylized(t)?)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_features(&feats)
    }

    /// Distance from `feature` to the nearest centroid of `emotion`'s styles.
    pub fn distance(&self, feature: &StyleFeature, emotion: EmotionLabel) -> Result<f64> {
        self.centroids
            .range((emotion, 0)..=(emotion, usize::MAX))
            .map(|(_, c)| l2(&feature.0, c))
            .min_by(f64::total_cmp)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no reference styles for emotion {emotion}"))
            })
    }
}

/// Mean distance of each image's style feature to its emotion's nearest
/// style centroid.
pub fn style_difference(groups: &StyleGroups, generated: &[(Image, EmotionLabel)]) -> Result<f64> {
    let d = generated
        .par_iter()
        .map(|(img, e)| groups.distance(&encode_style(img)?, *e))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(d.into_iter()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    pub edge_iou: f64,
    pub ssim: f64,
}

/// Mean edge IoU and SSIM over paired content and generated images.
pub fn content_preservation(content: &[Image], generated: &[Image]) -> Result<Preservation> {
    if content.len() != generated.len() {
        return Err(Error::InvalidArgument(
            "content preservation needs paired sets".into(),
        ));
    }
    let pairs = content
        .par_iter()
        .zip(generated)
        .map(|(c, g)| Ok((edge_iou(c, g)?, ssim(c, g)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Preservation {
        edge_iou: mean(pairs.iter().map(|p| p.0)),
        ssim: mean(pairs.iter().map(|p| p.1)),
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionBreakdown {
    pub emotion: EmotionLabel,
    pub count: usize,
    pub emo_accuracy: f64,
    pub sentiment_gap: f64,
    pub style_difference: f64,
    pub edge_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub emo_accuracy: f64,
    pub sentiment_gap: f64,
    pub style_difference: f64,
    pub edge_iou: f64,
    pub ssim: f64,
    /// Probe accuracy on the held-out ground-truth stylized images.
    pub probe_accuracy: f64,
    /// Style difference of the held-out ground-truth stylized images.
    pub style_difference_reference: f64,
    /// Edge IoU between held-out content and ground-truth stylized images.
    pub edge_iou_reference: f64,
    pub per_emotion: Vec<EmotionBreakdown>,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub s_style: f64,
    pub s_content: f64,
}

impl EvalReport {
    /// Fails unless every metric is finite and fractions lie in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.emo_accuracy,
            self.edge_iou,
            self.probe_accuracy,
            self.edge_iou_reference,
        ];
        let others = [
            self.sentiment_gap,
            self.style_difference,
            self.style_difference_reference,
            self.ssim,
        ];
        if fractions.iter().any(|v| !(0.0..=1.0).contains(v))
            || others.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("evaluation metrics".into()));
        }
        if self.sentiment_gap < 0.0 || self.style_difference < 0.0 {
            return Err(Error::InvalidArgument("negative distance metric".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("emo_accuracy        {:.4}\n", self.emo_accuracy));
        s.push_str(&format!("sentiment_gap       {:.4}\n", self.sentiment_gap));
        s.push_str(&format!(
            "style_difference    {:.4}  (reference {:.4})\n",
            self.style_difference, self.style_difference_reference
        ));
        s.push_str(&format!(
            "edge_iou            {:.4}  (reference {:.4})\n",
            self.edge_iou, self.edge_iou_reference
        ));
        s.push_str(&format!("ssim                {:.4}\n", self.ssim));
        s.push_str(&format!("probe_accuracy      {:.4}\n", self.probe_accuracy));
        s.push_str(&format!(
            "sampling            steps={} s_style={} s_content={} seed={}\n",
            self.steps, self.s_style, self.s_content, self.seed
        ));
        s.push_str(&format!("config_hash         {}\n\n", self.config_hash));
        s.push_str("emotion        n    emo_acc  gap     sd      edge_iou\n");
        for b in &self.per_emotion {
            s.push_str(&format!(
                "{:<14} {:<4} {:.3}    {:.3}   {:.3}   {:.3}\n",
                b.emotion.name(),
                b.count,
                b.emo_accuracy,
                b.sentiment_gap,
                b.style_difference,
                b.edge_iou
            ));
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Summary(Box<EvalReport>),
    Emotion(EmotionBreakdown),
}

/// Writes `path` as JSON Lines (one summary line, then one line per
/// emotion) and a text summary next to it with extension `.txt`.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let mut lines = Vec::new();
    let mut head = report.clone();
    head.per_emotion.clear();
    lines.push(serde_json::to_string(&ReportLine::Summary(Box::new(head))).expect("serializable"));
    for b in &report.per_emotion {
        lines.push(serde_json::to_string(&ReportLine::Emotion(b.clone())).expect("serializable"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    let text_path = path.with_extension("txt");
    std::fs::write(&text_path, report.summary()).map_err(|e| Error::io(&text_path, e))?;
    Ok(text_path)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report: Option<EvalReport> = None;
    let mut per_emotion = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parsed: ReportLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            ReportLine::Summary(r) => report = Some(*r),
            ReportLine::Emotion(b) => per_emotion.push(b),
        }
    }
    let mut report = report.ok_or_else(|| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        message: "no summary line".into(),
    })?;
    report.per_emotion = per_emotion;
    Ok(report)
}

/// Held-out images used as references.
pub struct EvalSet {
    pub triplets: Vec<Triplet>,
    pub content: Vec<Image>,
    pub stylized: Vec<(Image, EmotionLabel)>,
}

impl EvalSet {
    pub fn load(dataset: &Dataset, split: Split) -> Result<Self> {
        let triplets: Vec<Triplet> = dataset.split(split).into_iter().cloned().collect();
        if triplets.is_empty() {
            return Err(Error::Dataset(format!("no {split:?} triplets to evaluate")));
        }
        let loaded = triplets
            .par_iter()
            .map(|t| Ok((dataset.content(t)?, (dataset.stylized(t)?, t.emotion))))
            .collect::<Result<Vec<_>>>()?;
        let (content, stylized) = loaded.into_iter().unzip();
        Ok(EvalSet {
            triplets,
            content,
            stylized,
        })
    }
}

/// Trains the probe on the training split and checks it on `held_out`.
pub fn train_gated_probe(
    dataset: &Dataset,
    held_out: &EvalSet,
    config: &ProbeConfig,
) -> Result<(Probe, f64)> {
    let train = dataset
        .split(Split::Train)
        .par_iter()
        .map(|t| Ok((dataset.stylized(t)?, t.emotion)))
        .collect::<Result<Vec<_>>>()?;
    let probe = Probe::train(&train, config)?;
    let accuracy = probe.check_gate(&held_out.stylized)?;
    Ok((probe, accuracy))
}

/// Stylizes every held-out content image toward its triplet's emotion.
/// Each image uses its own noise seed derived from `settings.seed`.
pub fn generate<T: Real>(
    stylizer: &Stylizer<T>,
    set: &EvalSet,
    settings: &SampleSettings,
) -> Result<Vec<(Image, EmotionLabel)>> {
    set.content
        .par_iter()
        .zip(&set.triplets)
        .enumerate()
        .map(|(i, (img, t))| {
            let s = SampleSettings {
                seed: SeedRng::fork(settings.seed, TAG_SAMPLE, i as u64).next_u64(),
                ..*settings
            };
            Ok((
                stylizer.stylize(Content::Image(img), t.emotion, None, &s)?,
                t.emotion,
            ))
        })
        .collect()
}

/// Scores generated images against the held-out references.
pub fn score(
    probe: &Probe,
    probe_accuracy: f64,
    groups: &StyleGroups,
    set: &EvalSet,
    generated: &[(Image, EmotionLabel)],
    settings: &SampleSettings,
    config_hash: &str,
) -> Result<EvalReport> {
    let gen_images: Vec<Image> = generated.iter().map(|(i, _)| i.clone()).collect();
    let ref_images: Vec<Image> = set.stylized.iter().map(|(i, _)| i.clone()).collect();
    let pres = content_preservation(&set.content, &gen_images)?;
    let reference = content_preservation(&set.content, &ref_images)?;
    let mut per_emotion = Vec::new();
    for e in EmotionLabel::ALL {
        let idx: Vec<usize> = (0..generated.len())
            .filter(|&i| generated[i].1 == e)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let g: Vec<_> = idx.iter().map(|&i| generated[i].clone()).collect();
        let r: Vec<_> = idx.iter().map(|&i| set.stylized[i].clone()).collect();
        let c: Vec<_> = idx.iter().map(|&i| set.content[i].clone()).collect();
        let gi: Vec<_> = g.iter().map(|(i, _)| i.clone()).collect();
        per_emotion.push(EmotionBreakdown {
            emotion: e,
            count: idx.len(),
            emo_accuracy: emo_accuracy(probe, &g)?,
            sentiment_gap: sentiment_gap(probe, &g, &r)?,
            style_difference: style_difference(groups, &g)?,
            edge_iou: content_preservation(&c, &gi)?.edge_iou,
        });
    }
    let report = EvalReport {
        emo_accuracy: emo_accuracy(probe, generated)?,
        sentiment_gap: sentiment_gap(probe, generated, &set.stylized)?,
        style_difference: style_difference(groups, generated)?,
        edge_iou: pres.edge_iou,
        ssim: pres.ssim,
        probe_accuracy,
        style_difference_reference: style_difference(groups, &set.stylized)?,
        edge_iou_reference: reference.edge_iou,
        per_emotion,
        config_hash: config_hash.to_string(),
        seed: settings.seed,
        steps: settings.steps,
        s_style: settings.s_style,
        s_content: settings.s_content,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SIZE;

    fn blocky(seed: u64) -> Image {
        let mut rng = SeedRng::new(seed);
        let mut img = Image::filled(SIZE, SIZE, [0.5; 3]);
        let (y0, x0) = (rng.below(16), rng.below(16));
        for y in y0..y0 + 12 {
            for x in x0..x0 + 10 {
                img.set_rgb(y, x, [0.9, rng.uniform() as f32 * 0.3, 0.1]);
            }
        }
        img
    }

    #[test]
    fn preservation_of_identical_and_flat_images() {
        let c: Vec<_> = (0..3).map(blocky).collect();
        let p = content_preservation(&c, &c).unwrap();
        assert_eq!((p.edge_iou, p.ssim), (1.0, 1.0));
        let gray: Vec<_> = (0..3)
            .map(|_| Image::filled(SIZE, SIZE, [0.5; 3]))
            .collect();
        assert_eq!(content_preservation(&c, &gray).unwrap().edge_iou, 0.0);
    }

    #[test]
    fn style_difference_of_a_single_reference_is_zero() {
        let img = blocky(4);
        let groups =
            StyleGroups::from_features(&[(EmotionLabel::Fear, 0, encode_style(&img).unwrap())])
                .unwrap();
        let sd = style_difference(&groups, &[(img, EmotionLabel::Fear)]).unwrap();
        assert_eq!(sd, 0.0);
        assert!(groups
            .distance(&encode_style(&blocky(5)).unwrap(), EmotionLabel::Awe)
            .is_err());
    }

    fn sample_report() -> EvalReport {
        EvalReport {
            emo_accuracy: 0.7,
            sentiment_gap: 0.1234567890123,
            style_difference: 1.0 / 3.0,
            edge_iou: 0.61,
            ssim: 0.4,
            probe_accuracy: 0.95,
            style_difference_reference: 0.3,
            edge_iou_reference: 0.7,
            per_emotion: vec![EmotionBreakdown {
                emotion: EmotionLabel::Anger,
                count: 25,
                emo_accuracy: 0.64,
                sentiment_gap: 0.2,
                style_difference: std::f64::consts::PI,
                edge_iou: 0.5,
            }],
            config_hash: "abc".into(),
            seed: 7,
            steps: 20,
            s_style: 2.0,
            s_content: 1.0,
        }
    }

    #[test]
    fn report_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let r = sample_report();
        let text = write_report(&r, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
        let summary = std::fs::read_to_string(text).unwrap();
        for key in [
            "emo_accuracy",
            "sentiment_gap",
            "style_difference",
            "edge_iou",
            "ssim",
        ] {
            assert!(summary.contains(key), "{key}");
        }
    }

    #[test]
    fn validation_rejects_out_of_range_fractions() {
        let mut r = sample_report();
        assert!(r.validate().is_ok());
        r.emo_accuracy = 1.5;
        assert!(r.validate().is_err());
        let mut r = sample_report();
        r.ssim = f64::NAN;
        assert!(r.validate().is_err());
    }
}
