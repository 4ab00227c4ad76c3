//! Structural and style metrics shared by dataset generation and evaluation.

use crate::encoders::{l2, StyleFeature};
use crate::error::{Error, Result};
use crate::image::Image;

/// Pixels whose Sobel magnitude exceeds the 80th percentile of the image.
pub fn edge_map(image: &Image) -> Vec<bool> {
    let mag = image.sobel_magnitude();
    let mut sorted = mag.clone();
    sorted.sort_by(f32::total_cmp);
    // Linear interpolation between order statistics.
    let pos = 0.8 * (sorted.len() - 1) as f32;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f32;
    let threshold = sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    mag.iter().map(|&m| m > threshold).collect()
}

/// Intersection over union of the two edge maps; two edge-free images score 1.
pub fn edge_iou(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let (ea, eb) = (edge_map(a), edge_map(b));
    let inter = ea.iter().zip(&eb).filter(|(x, y)| **x && **y).count();
    let union = ea.iter().zip(&eb).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM of the luma over all 8×8 sliding windows (uniform weights, L = 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let (la, lb) = (a.luminance(), b.luminance());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (u, v) = (la[y * w + x] as f64, lb[y * w + x] as f64);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ImageSize {
            what: "pair".into(),
            expected: format!("{}x{}", a.width(), a.height()),
            got: format!("{}x{}", b.width(), b.height()),
        });
    }
    Ok(())
}

/// Component-wise mean of style features.
pub fn centroid(features: &[StyleFeature]) -> Vec<f64> {
    let d = features[0].0.len();
    let mut c = vec![0.0; d];
    for f in features {
        for (a, b) in c.iter_mut().zip(&f.0) {
            *a += b;
        }
    }
    c.iter_mut().for_each(|v| *v /= features.len() as f64);
    c
}

/// Mean pairwise style distance within and across classes.
#[derive(Clone, Copy, Debug)]
pub struct StyleSeparation {
    pub intra: f64,
    pub inter: f64,
}

impl StyleSeparation {
    pub fn ratio(&self) -> f64 {
        self.inter / self.intra
    }
}

/// Pairwise distances between all feature pairs, split by class equality.
pub fn style_separation(features: &[(usize, StyleFeature)]) -> StyleSeparation {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let d = l2(&features[i].1 .0, &features[j].1 .0);
            if features[i].0 == features[j].0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    StyleSeparation {
        intra: intra / ni.max(1) as f64,
        inter: inter / nx.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SIZE;

    fn scene() -> Image {
        let mut img = Image::filled(SIZE, SIZE, [0.2, 0.2, 0.2]);
        for y in 8..20 {
            for x in 10..26 {
                img.set_rgb(y, x, [0.9, 0.6, 0.1]);
            }
        }
        img
    }

    #[test]
    fn identical_images_are_perfectly_preserved() {
        let a = scene();
        assert_eq!(edge_iou(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_image_shares_no_edges() {
        let gray = Image::filled(SIZE, SIZE, [0.5; 3]);
        assert_eq!(edge_iou(&scene(), &gray).unwrap(), 0.0);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(edge_iou(&scene(), &Image::filled(16, 16, [0.0; 3])).is_err());
    }
}
