//! Small convolutional emotion classifier used to score generated images.

use rayon::prelude::*;

use crate::encoders::{EmotionLabel, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Optimizer, OptimizerKind, ParamSet, SeedRng, Tape, Tensor, Var};

/// Held-out accuracy below which downstream metrics are refused.
pub const PROBE_GATE: f64 = 0.9;

const C1: usize = 16;
const C2: usize = 32;
const TAG_INIT: u32 = 80;
const TAG_EPOCH: u32 = 81;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub params: ParamSet<f32>,
    pub size: usize,
}

fn init(size: usize, rng: &mut SeedRng) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    let flat = C2 * (size / 4) * (size / 4);
    p.insert_randn("probe.conv1.weight", &[C1, 3, 3, 3], 27, 2f64.sqrt(), rng);
    p.insert("probe.conv1.bias", Tensor::zeros(&[C1]));
    p.insert_randn(
        "probe.conv2.weight",
        &[C2, C1, 3, 3],
        C1 * 9,
        2f64.sqrt(),
        rng,
    );
    p.insert("probe.conv2.bias", Tensor::zeros(&[C2]));
    p.insert_randn("probe.head.weight", &[flat, NUM_EMOTIONS], flat, 1.0, rng);
    p.insert("probe.head.bias", Tensor::zeros(&[NUM_EMOTIONS]));
    p
}

fn logits<'a>(tape: &mut Tape<'a, f32>, p: &'a ParamSet<f32>, image: &Image) -> Result<Var> {
    let mut t: Tensor<f32> = image.to_tensor();
    t.data_mut().iter_mut().for_each(|v| *v -= 0.5);
    let x = tape.constant(t);
    let mut h = x;
    for name in ["probe.conv1", "probe.conv2"] {
        let w = tape.param(p, &format!("{name}.weight"))?;
        let b = tape.param(p, &format!("{name}.bias"))?;
        h = tape.conv3x3(h, w, b)?;
        h = tape.relu(h);
        h = tape.avg_pool2(h)?;
    }
    let n = tape.value(h).len();
    let flat = tape.reshape(h, &[1, n])?;
    let w = tape.param(p, "probe.head.weight")?;
    let b = tape.param(p, "probe.head.bias")?;
    let out = tape.affine(flat, w, Some(b))?;
    tape.reshape(out, &[NUM_EMOTIONS])
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl Probe {
    /// Trains on labeled stylized images. Needs at least two classes.
    pub fn train(images: &[(Image, EmotionLabel)], config: &ProbeConfig) -> Result<Probe> {
        let classes: std::collections::BTreeSet<_> = images.iter().map(|(_, e)| *e).collect();
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "probe training needs at least 2 emotion classes, got {}",
                classes.len()
            )));
        }
        let size = images[0].0.width();
        for (img, _) in images {
            img.expect_square(size)?;
        }
        let mut params = init(size, &mut SeedRng::fork(config.seed, TAG_INIT, 0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate);
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            SeedRng::fork(config.seed, TAG_EPOCH, epoch as u64).shuffle(&mut order);
            for chunk in order.chunks(config.batch_size) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let frozen = &params;
                let grads = idx
                    .par_iter()
                    .map(|&i| {
                        let (img, label) = &images[i];
                        // Mirroring leaves style statistics unchanged.
                        let flipped;
                        let img = if (i + epoch) % 2 == 1 {
                            flipped = img.mirrored();
                            &flipped
                        } else {
                            img
                        };
                        let mut tape = Tape::new();
                        let z = logits(&mut tape, frozen, img)?;
                        let loss = tape.cross_entropy(z, label.index())?;
                        Ok(tape.backward(loss)?.into_param_grads())
                    })
                    .collect::<Result<Vec<_>>>()?;
                params.zero_grads();
                let scale = 1.0 / grads.len() as f32;
                for g in &grads {
                    params.accumulate(g, scale)?;
                }
                opt.update(&mut params)?;
            }
        }
        params.zero_grads();
        Ok(Probe { params, size })
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        image.expect_square(self.size)?;
        let mut tape = Tape::new();
        let z = logits(&mut tape, &self.params, image)?;
        Ok(tape.value(z).to_f64_vec())
    }

    pub fn probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(image)?))
    }

    /// Argmax class; lowest index on ties.
    pub fn predict(&self, image: &Image) -> Result<EmotionLabel> {
        let z = self.logits(image)?;
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        Ok(EmotionLabel::from_index(best).expect("eight logits"))
    }

    /// Fraction of images classified as their label.
    pub fn accuracy(&self, images: &[(Image, EmotionLabel)]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let hits = images
            .par_iter()
            .map(|(img, e)| Ok((self.predict(img)? == *e) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / images.len() as f64)
    }

    /// Errors unless held-out accuracy reaches the gate.
    pub fn check_gate(&self, held_out: &[(Image, EmotionLabel)]) -> Result<f64> {
        let accuracy = self.accuracy(held_out)?;
        if accuracy < PROBE_GATE {
            return Err(Error::ProbeGate {
                accuracy,
                gate: PROBE_GATE,
            });
        }
        Ok(accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tinted(rgb: [f32; 3], seed: u64) -> Image {
        let mut rng = SeedRng::new(seed);
        let mut img = Image::filled(8, 8, rgb);
        for y in 0..8 {
            for x in 0..8 {
                let n = 0.05 * rng.normal() as f32;
                let [r, g, b] = img.rgb(y, x);
                img.set_rgb(y, x, [r + n, g + n, b + n]);
            }
        }
        img
    }

    #[test]
    fn refuses_single_class() {
        let images = vec![
            (tinted([0.5; 3], 0), EmotionLabel::Awe),
            (tinted([0.4; 3], 1), EmotionLabel::Awe),
        ];
        assert!(Probe::train(&images, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn separates_planted_colors() {
        let colors = [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9]];
        let images: Vec<_> = (0..60)
            .map(|i| (tinted(colors[i % 3], i as u64), EmotionLabel::ALL[i % 3]))
            .collect();
        let cfg = ProbeConfig {
            epochs: 8,
            batch_size: 10,
            ..ProbeConfig::default()
        };
        let probe = Probe::train(&images, &cfg).unwrap();
        let held: Vec<_> = (0..30)
            .map(|i| {
                (
                    tinted(colors[i % 3], 1000 + i as u64),
                    EmotionLabel::ALL[i % 3],
                )
            })
            .collect();
        assert_eq!(probe.accuracy(&held).unwrap(), 1.0);
        let p = probe.probabilities(&held[0].0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
